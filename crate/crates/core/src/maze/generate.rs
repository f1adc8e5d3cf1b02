//! Offline dataset generators.
//!
//! *Stitch* episodes are short goal-reaching hops confined to a small BFS
//! ball; *Explore* episodes follow randomly re-sampled compass headings with
//! action noise.

use rand::Rng as _;
use rayon::prelude::*;

use super::{step, ActionId, Cell, Dataset, DatasetMeta, DistanceOracle, MazeSpec, Trajectory};
use crate::seed::child_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StitchParams {
    pub n_episodes: usize,
    /// Maximum BFS distance between hop endpoints, and between any visited
    /// cell and the episode's first cell.
    pub max_span: u32,
    pub ep_len: usize,
    pub seed: u64,
}

impl Default for StitchParams {
    fn default() -> Self {
        Self {
            n_episodes: 5000,
            max_span: 4,
            ep_len: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExploreParams {
    pub n_episodes: usize,
    pub ep_len: usize,
    pub resample_interval: usize,
    pub noise_prob: f64,
    pub seed: u64,
}

impl Default for ExploreParams {
    fn default() -> Self {
        Self {
            n_episodes: 10_000,
            ep_len: 500,
            resample_interval: 10,
            noise_prob: 0.3,
            seed: 0,
        }
    }
}

/// Builds a dataset of concatenated BFS-shortest-path hops.
///
/// Each episode starts at a uniformly drawn free cell (its anchor). Hop
/// targets are drawn uniformly among free cells within `max_span` of both the
/// current cell and the anchor, so no episode ever leaves the anchor's
/// `max_span` ball. Episodes are padded with "stay" when no hop is possible.
pub fn generate_stitch_dataset(spec: &MazeSpec, params: StitchParams) -> Result<Dataset> {
    if params.ep_len == 0 {
        return Err(Error::Config("ep_len must be at least 1".into()));
    }
    let oracle = DistanceOracle::new(spec);
    let free = oracle.free_cells().to_vec();
    if free.len() < 2 {
        return Err(Error::Generation("maze needs at least two free cells".into()));
    }
    if params.max_span > 0 {
        let any_pair = free
            .iter()
            .any(|&c| oracle.ball(c, params.max_span).map_or(false, |b| b.len() > 1));
        if !any_pair {
            return Err(Error::Generation(format!(
                "no reachable pair within max_span {}",
                params.max_span
            )));
        }
    }

    let trajectories = (0..params.n_episodes as u64)
        .into_par_iter()
        .map(|ep| stitch_episode(spec, &oracle, &free, &params, ep))
        .collect::<Result<Vec<_>>>()?;

    let meta = DatasetMeta::new("stitch", params.seed)
        .with_param("n_episodes", params.n_episodes)
        .with_param("max_span", params.max_span)
        .with_param("ep_len", params.ep_len);
    Ok(Dataset {
        spec: spec.clone(),
        trajectories,
        meta,
    })
}

fn stitch_episode(
    spec: &MazeSpec,
    oracle: &DistanceOracle,
    free: &[Cell],
    params: &StitchParams,
    ep: u64,
) -> Result<Trajectory> {
    let mut rng = child_rng(params.seed, ep);
    let anchor = free[rng.random_range(0..free.len())];
    let ball = oracle.ball(anchor, params.max_span)?;

    let mut cells = vec![anchor];
    let mut actions = Vec::with_capacity(params.ep_len);
    let mut cur = anchor;
    'hops: while cells.len() < params.ep_len {
        let mut targets = Vec::new();
        for &c in &ball {
            if c != cur && oracle.distance(cur, c)?.is_some_and(|d| d <= params.max_span) {
                targets.push(c);
            }
        }
        if targets.is_empty() {
            break;
        }
        let target = targets[rng.random_range(0..targets.len())];
        let path = oracle
            .shortest_path(cur, target)?
            .expect("targets are reachable");
        for a in path {
            cur = spec.step_cell(cur, a);
            actions.push(a);
            cells.push(cur);
            if cells.len() == params.ep_len {
                break 'hops;
            }
        }
    }
    while cells.len() < params.ep_len {
        actions.push(ActionId::STAY);
        cells.push(cur);
    }
    actions.push(ActionId::STAY);

    Ok(Trajectory {
        episode_id: ep,
        states: cells.into_iter().map(|c| spec.center(c)).collect(),
        actions,
    })
}

/// Builds a dataset of noisy heading-following walks.
pub fn generate_explore_dataset(spec: &MazeSpec, params: ExploreParams) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&params.noise_prob) {
        return Err(Error::Config(format!(
            "noise_prob {} outside [0, 1]",
            params.noise_prob
        )));
    }
    if params.ep_len == 0 || params.resample_interval == 0 {
        return Err(Error::Config("ep_len and resample_interval must be positive".into()));
    }
    let free = spec.free_cells();
    let compass: Vec<ActionId> = ActionId::compass().collect();

    let trajectories = (0..params.n_episodes as u64)
        .into_par_iter()
        .map(|ep| {
            let mut rng = child_rng(params.seed, ep);
            let mut s = spec.center(free[rng.random_range(0..free.len())]);
            let mut states = Vec::with_capacity(params.ep_len);
            let mut actions = Vec::with_capacity(params.ep_len);
            let mut heading = compass[0];
            for t in 0..params.ep_len {
                states.push(s);
                if t % params.resample_interval == 0 {
                    heading = compass[rng.random_range(0..compass.len())];
                }
                let noisy = rng.random::<f64>() < params.noise_prob;
                let a = if noisy {
                    ActionId::new(rng.random_range(0..ActionId::COUNT as u8))?
                } else {
                    heading
                };
                if t + 1 == params.ep_len {
                    actions.push(ActionId::STAY);
                } else {
                    actions.push(a);
                    s = step(spec, &s, a)?;
                }
            }
            Ok(Trajectory {
                episode_id: ep,
                states,
                actions,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let meta = DatasetMeta::new("explore", params.seed)
        .with_param("n_episodes", params.n_episodes)
        .with_param("ep_len", params.ep_len)
        .with_param("resample_interval", params.resample_interval)
        .with_param("noise_prob", params.noise_prob);
    Ok(Dataset {
        spec: spec.clone(),
        trajectories,
        meta,
    })
}
