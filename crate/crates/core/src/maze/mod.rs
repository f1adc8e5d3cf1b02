//! Deterministic grid-maze world.
//!
//! States are the centres of free cells in world units. Nine discrete actions
//! move to one of the eight neighbouring cells or stay put; a move into a wall,
//! or a diagonal move that would cut a wall corner, leaves the state unchanged.

mod dataset;
mod generate;
mod io;
mod oracle;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use dataset::{Dataset, DatasetMeta, Trajectory};
pub use generate::{generate_explore_dataset, generate_stitch_dataset, ExploreParams, StitchParams};
pub use io::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, DATASET_FORMAT_VERSION};
pub use oracle::{temporal_distance_oracle, DistanceOracle};

/// Integer cell coordinates; `y` grows downwards (row index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub x: f64,
    pub y: f64,
}

impl EnvState {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &EnvState) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn bits_eq(&self, other: &EnvState) -> bool {
        self.x.to_bits() == other.x.to_bits() && self.y.to_bits() == other.y.to_bits()
    }
}

/// One of nine discrete actions. Id 0 is "stay"; ids 1..=8 walk the compass
/// clockwise starting from north (towards row 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionId(u8);

const DISPLACEMENTS: [(i64, i64); 9] = [
    (0, 0),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
];

impl ActionId {
    pub const COUNT: usize = 9;
    pub const STAY: ActionId = ActionId(0);

    pub fn new(id: u8) -> Result<Self> {
        if (id as usize) < Self::COUNT {
            Ok(Self(id))
        } else {
            Err(Error::Config(format!("action id {id} out of range 0..9")))
        }
    }

    pub fn all() -> impl Iterator<Item = ActionId> {
        (0..Self::COUNT as u8).map(ActionId)
    }

    /// The eight moving actions.
    pub fn compass() -> impl Iterator<Item = ActionId> {
        (1..Self::COUNT as u8).map(ActionId)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Displacement in cell units.
    pub fn displacement(self) -> (i64, i64) {
        DISPLACEMENTS[self.0 as usize]
    }

    pub fn from_displacement(dx: i64, dy: i64) -> Option<Self> {
        DISPLACEMENTS
            .iter()
            .position(|&d| d == (dx, dy))
            .map(|i| ActionId(i as u8))
    }

    pub fn is_diagonal(self) -> bool {
        let (dx, dy) = self.displacement();
        dx != 0 && dy != 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MazeSpec {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    cell_size: f64,
}

impl MazeSpec {
    /// `walls` is row-major, `true` = blocked.
    pub fn new(width: usize, height: usize, walls: Vec<bool>, cell_size: f64) -> Result<Self> {
        if width < 3 || height < 3 {
            return Err(Error::InvalidMaze(format!(
                "maze must be at least 3x3, got {width}x{height}"
            )));
        }
        if walls.len() != width * height {
            return Err(Error::InvalidMaze(format!(
                "wall grid has {} entries, expected {}",
                walls.len(),
                width * height
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidMaze(format!("bad cell size {cell_size}")));
        }
        for x in 0..width {
            for y in [0, height - 1] {
                if !walls[y * width + x] {
                    return Err(Error::InvalidMaze(format!("border cell ({x},{y}) is open")));
                }
            }
        }
        for y in 0..height {
            for x in [0, width - 1] {
                if !walls[y * width + x] {
                    return Err(Error::InvalidMaze(format!("border cell ({x},{y}) is open")));
                }
            }
        }
        if walls.iter().all(|&w| w) {
            return Err(Error::InvalidMaze("maze has no free cell".into()));
        }
        Ok(Self {
            width,
            height,
            walls,
            cell_size,
        })
    }

    /// Parses `#` (wall) / `.` (free) rows. Blank lines are ignored.
    pub fn from_ascii(text: &str, cell_size: f64) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        let mut walls = Vec::with_capacity(width * height);
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::InvalidMaze(format!("row {y} has ragged width")));
            }
            for c in row.chars() {
                match c {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    other => {
                        return Err(Error::InvalidMaze(format!("unexpected character {other:?}")))
                    }
                }
            }
        }
        Self::new(width, height, walls, cell_size)
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(if self.walls[y * self.width + x] { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    /// Row-major `0`/`1` string, `1` = wall.
    pub fn walls_string(&self) -> String {
        self.walls.iter().map(|&w| if w { '1' } else { '0' }).collect()
    }

    pub fn from_walls_string(width: usize, height: usize, walls: &str, cell_size: f64) -> Result<Self> {
        let grid = walls
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::InvalidMaze(format!("bad wall character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(width, height, grid, cell_size)
    }

    /// Fully open interior surrounded by a wall border.
    pub fn open(width: usize, height: usize) -> Result<Self> {
        let mut walls = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                if x == 0 || y == 0 || x + 1 == width || y + 1 == height {
                    walls[y * width + x] = true;
                }
            }
        }
        Self::new(width, height, walls, 1.0)
    }

    /// A single horizontal corridor with `length` free cells.
    pub fn corridor(length: usize) -> Result<Self> {
        let width = length + 2;
        let mut walls = vec![true; width * 3];
        for x in 1..=length {
            walls[width + x] = false;
        }
        Self::new(width, 3, walls, 1.0)
    }

    /// Compact 8x8 layout with a 6x6 interior.
    pub fn compact8() -> Self {
        Self::from_ascii(COMPACT8, 1.0).expect("built-in maze is valid")
    }

    /// 14x14 layout with one-cell corridors, loops and dead ends.
    pub fn medium() -> Self {
        Self::from_ascii(MEDIUM, 1.0).expect("built-in maze is valid")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "compact8" => Some(Self::compact8()),
            "medium" => Some(Self::medium()),
            "open5" => Self::open(5, 5).ok(),
            _ => None,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        cell.x < self.width && cell.y < self.height && !self.walls[cell.y * self.width + cell.x]
    }

    fn is_free_signed(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && self.is_free(Cell::new(x as usize, y as usize))
    }

    /// Free cells in row-major order.
    pub fn free_cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.walls[y * self.width + x] {
                    cells.push(Cell::new(x, y));
                }
            }
        }
        cells
    }

    pub fn center(&self, cell: Cell) -> EnvState {
        EnvState::new(
            (cell.x as f64 + 0.5) * self.cell_size,
            (cell.y as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell containing `s`, if inside the grid.
    pub fn cell_of(&self, s: &EnvState) -> Option<Cell> {
        let fx = (s.x / self.cell_size).floor();
        let fy = (s.y / self.cell_size).floor();
        if !(fx.is_finite() && fy.is_finite()) || fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (x, y) = (fx as usize, fy as usize);
        (x < self.width && y < self.height).then_some(Cell::new(x, y))
    }

    pub fn free_cell_of(&self, s: &EnvState) -> Result<Cell> {
        match self.cell_of(s) {
            Some(c) if self.is_free(c) => Ok(c),
            _ => Err(Error::InvalidState(format!(
                "({}, {}) is not on a free cell",
                s.x, s.y
            ))),
        }
    }

    /// Nearest free cell centre to an arbitrary point (ties: row-major order).
    pub fn snap(&self, s: &EnvState) -> EnvState {
        if let Some(c) = self.cell_of(s) {
            if self.is_free(c) {
                return self.center(c);
            }
        }
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for c in self.free_cells() {
            let d = self.center(c).distance(s);
            if d < best_d {
                best_d = d;
                best = Some(c);
            }
        }
        self.center(best.expect("maze has a free cell"))
    }

    /// Successor cell under the corner-cut rule.
    pub fn step_cell(&self, cell: Cell, a: ActionId) -> Cell {
        let (dx, dy) = a.displacement();
        if dx == 0 && dy == 0 {
            return cell;
        }
        let (x, y) = (cell.x as i64, cell.y as i64);
        if !self.is_free_signed(x + dx, y + dy) {
            return cell;
        }
        if a.is_diagonal() && !(self.is_free_signed(x + dx, y) && self.is_free_signed(x, y + dy)) {
            return cell;
        }
        Cell::new((x + dx) as usize, (y + dy) as usize)
    }

    /// Distinct cells reachable in one step, in action-id order.
    pub fn neighbors(&self, cell: Cell) -> impl Iterator<Item = (ActionId, Cell)> + '_ {
        ActionId::compass().filter_map(move |a| {
            let n = self.step_cell(cell, a);
            (n != cell).then_some((a, n))
        })
    }
}

const COMPACT8: &str = "\
########
#..##..#
#..#...#
##...###
#..#...#
#.#..#.#
#...#..#
########
";

const MEDIUM: &str = "\
##############
#....#.......#
#.##.#.#####.#
#.#..#.....#.#
#.#.####.#.#.#
#...#....#...#
###.#.####.###
#...#....#...#
#.######.###.#
#......#.....#
#.####.#.###.#
#.#....#...#.#
#...##...#...#
##############
";

/// Exact environment dynamics.
pub fn step(spec: &MazeSpec, s: &EnvState, a: ActionId) -> Result<EnvState> {
    let cell = spec.free_cell_of(s)?;
    let next = spec.step_cell(cell, a);
    if next == cell {
        Ok(*s)
    } else {
        Ok(spec.center(next))
    }
}

/// Squared error `||step(s, a) - s_next||^2` between the true successor and a
/// claimed one.
pub fn dynamic_mse(spec: &MazeSpec, s: &EnvState, a: ActionId, s_next: &EnvState) -> Result<f64> {
    let p = step(spec, s, a)?;
    Ok((p.x - s_next.x).powi(2) + (p.y - s_next.y).powi(2))
}

/// Goal test: Euclidean distance within `delta_g`.
pub fn is_success(s: &EnvState, g: &EnvState, delta_g: f64) -> bool {
    debug_assert!(delta_g > 0.0);
    s.distance(g) <= delta_g
}
