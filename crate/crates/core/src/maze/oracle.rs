use std::collections::VecDeque;

use super::{ActionId, Cell, MazeSpec};
use crate::{Error, Result};

const UNREACHABLE: u32 = u32::MAX;

fn bfs(spec: &MazeSpec, from: Cell) -> Vec<u32> {
    let w = spec.width();
    let mut dist = vec![UNREACHABLE; w * spec.height()];
    let mut queue = VecDeque::new();
    dist[from.y * w + from.x] = 0;
    queue.push_back(from);
    while let Some(c) = queue.pop_front() {
        let d = dist[c.y * w + c.x];
        for (_, n) in spec.neighbors(c) {
            let slot = &mut dist[n.y * w + n.x];
            if *slot == UNREACHABLE {
                *slot = d + 1;
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Minimum number of steps between two free cells, or `None` when they lie in
/// different components.
pub fn temporal_distance_oracle(spec: &MazeSpec, a: Cell, b: Cell) -> Result<Option<u32>> {
    for c in [a, b] {
        if !spec.is_free(c) {
            return Err(Error::InvalidState(format!("cell ({}, {}) is blocked", c.x, c.y)));
        }
    }
    let d = bfs(spec, a)[b.y * spec.width() + b.x];
    Ok((d != UNREACHABLE).then_some(d))
}

/// All-pairs BFS table over the free cells of one maze.
#[derive(Debug, Clone)]
pub struct DistanceOracle {
    spec: MazeSpec,
    free: Vec<Cell>,
    /// cell (row-major over the full grid) -> position in `free`
    slot: Vec<Option<usize>>,
    dist: Vec<u32>,
}

impl DistanceOracle {
    pub fn new(spec: &MazeSpec) -> Self {
        let free = spec.free_cells();
        let w = spec.width();
        let mut slot = vec![None; w * spec.height()];
        for (i, c) in free.iter().enumerate() {
            slot[c.y * w + c.x] = Some(i);
        }
        let n = free.len();
        let mut dist = vec![UNREACHABLE; n * n];
        for (i, &c) in free.iter().enumerate() {
            let row = bfs(spec, c);
            for (j, &d) in free.iter().enumerate() {
                dist[i * n + j] = row[d.y * w + d.x];
            }
        }
        Self {
            spec: spec.clone(),
            free,
            slot,
            dist,
        }
    }

    pub fn spec(&self) -> &MazeSpec {
        &self.spec
    }

    pub fn free_cells(&self) -> &[Cell] {
        &self.free
    }

    fn slot_of(&self, c: Cell) -> Result<usize> {
        if c.x >= self.spec.width() || c.y >= self.spec.height() {
            return Err(Error::InvalidState(format!("cell ({}, {}) outside maze", c.x, c.y)));
        }
        self.slot[c.y * self.spec.width() + c.x]
            .ok_or_else(|| Error::InvalidState(format!("cell ({}, {}) is blocked", c.x, c.y)))
    }

    pub fn distance(&self, a: Cell, b: Cell) -> Result<Option<u32>> {
        let (i, j) = (self.slot_of(a)?, self.slot_of(b)?);
        let d = self.dist[i * self.free.len() + j];
        Ok((d != UNREACHABLE).then_some(d))
    }

    /// Free cells within `radius` steps of `c` (including `c`), row-major.
    pub fn ball(&self, c: Cell, radius: u32) -> Result<Vec<Cell>> {
        let i = self.slot_of(c)?;
        let n = self.free.len();
        Ok((0..n)
            .filter(|&j| self.dist[i * n + j] <= radius)
            .map(|j| self.free[j])
            .collect())
    }

    /// Smallest-id action that makes progress towards `to`; `None` when
    /// already there or unreachable.
    pub fn greedy_action(&self, from: Cell, to: Cell) -> Result<Option<ActionId>> {
        let Some(d) = self.distance(from, to)? else {
            return Ok(None);
        };
        if d == 0 {
            return Ok(None);
        }
        for (a, n) in self.spec.neighbors(from) {
            if self.distance(n, to)? == Some(d - 1) {
                return Ok(Some(a));
            }
        }
        unreachable!("BFS distances always admit a decreasing neighbour")
    }

    /// Every action whose successor lies on some shortest path to `to`.
    pub fn optimal_actions(&self, from: Cell, to: Cell) -> Result<Vec<ActionId>> {
        let d = match self.distance(from, to)? {
            Some(d) => d,
            None => return Ok(Vec::new()),
        };
        let mut out = Vec::new();
        for a in ActionId::all() {
            let n = self.spec.step_cell(from, a);
            let dn = self.distance(n, to)?;
            if d == 0 && n == from || d > 0 && dn == Some(d - 1) {
                out.push(a);
            }
        }
        Ok(out)
    }

    /// Deterministic shortest path as a list of actions.
    pub fn shortest_path(&self, from: Cell, to: Cell) -> Result<Option<Vec<ActionId>>> {
        if self.distance(from, to)?.is_none() {
            return Ok(None);
        }
        let mut cur = from;
        let mut path = Vec::new();
        while let Some(a) = self.greedy_action(cur, to)? {
            path.push(a);
            cur = self.spec.step_cell(cur, a);
        }
        Ok(Some(path))
    }
}
