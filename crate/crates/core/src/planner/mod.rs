//! Hierarchical diffusion planning and closed-loop evaluation.
//!
//! A high-level model inpaints sparse waypoints between the current state and
//! the goal; the stitcher fills each waypoint gap with a dense bridge. A
//! greedy one-step controller on the embedding tracks subgoals along the plan.

use std::collections::HashSet;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{strided_windows, CondSpec, DiffusionModel};
use crate::embedding::{latent_distance, StateEmbedding};
pub use crate::maze::dynamic_mse;
use crate::maze::{is_success, step, ActionId, Cell, Dataset, DistanceOracle, EnvState, MazeSpec};
use crate::norm::Normalizer;
use crate::seed::{derive_seed, rng_from_seed, Rng};
use crate::{Error, Result};

/// Replanning intervals accepted by [`PlannerConfig::validate`].
pub const REPLANNING_INTERVALS: [usize; 3] = [50, 100, 200];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub plan_horizon: usize,
    pub temporal_jump: usize,
    /// `None` never replans.
    pub replanning_interval: Option<usize>,
    pub subgoal_horizon: usize,
    pub max_episode_steps: usize,
    pub delta_g: f64,
    pub ddim_steps: usize,
    /// Sampler passes per DDIM step; see [`crate::diffusion::SampleOptions::resample`].
    pub resample: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            plan_horizon: 100,
            temporal_jump: 25,
            replanning_interval: Some(50),
            subgoal_horizon: 10,
            max_episode_steps: 200,
            delta_g: 0.5,
            ddim_steps: 20,
            resample: 10,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_jump < 2 {
            return Err(Error::Config("temporal_jump must be at least 2".into()));
        }
        if self.subgoal_horizon < 1 || self.subgoal_horizon > self.temporal_jump {
            return Err(Error::Config(format!(
                "subgoal_horizon must be in 1..={}",
                self.temporal_jump
            )));
        }
        if self.plan_horizon < 1 {
            return Err(Error::Config("plan_horizon must be positive".into()));
        }
        if let Some(r) = self.replanning_interval {
            if !REPLANNING_INTERVALS.contains(&r) {
                return Err(Error::Config(format!(
                    "replanning_interval must be one of {REPLANNING_INTERVALS:?} or off, got {r}"
                )));
            }
        }
        if !(self.delta_g > 0.0) {
            return Err(Error::Config("delta_g must be positive".into()));
        }
        if self.ddim_steps < 1 || self.resample < 1 {
            return Err(Error::Config("ddim_steps and resample must be positive".into()));
        }
        Ok(())
    }

    /// `ceil(plan_horizon / temporal_jump) + 1`.
    pub fn num_waypoints(&self) -> usize {
        self.plan_horizon.div_ceil(self.temporal_jump) + 1
    }

    /// States in a dense plan: `(num_waypoints - 1) * temporal_jump + 1`.
    pub fn plan_len(&self) -> usize {
        (self.num_waypoints() - 1) * self.temporal_jump + 1
    }
}

/// Normalized high-level training windows: `num_waypoints` states spaced
/// `temporal_jump` apart.
pub fn waypoint_windows(dataset: &Dataset, cfg: &PlannerConfig, stride: usize) -> (Array2<f64>, Normalizer) {
    let norm = dataset.normalizer();
    let w = strided_windows(dataset, &norm, cfg.num_waypoints(), cfg.temporal_jump, stride);
    (w, norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// Dense states snapped to free cell centres; first and last are the
    /// clamped current state and goal.
    pub states: Vec<EnvState>,
    /// Index into `states` of each waypoint.
    pub waypoint_indices: Vec<usize>,
}

impl Plan {
    pub fn waypoints(&self) -> Vec<EnvState> {
        self.waypoint_indices.iter().map(|&i| self.states[i]).collect()
    }
}

/// Waypoints by DDIM inpainting, then one stitcher bridge per gap.
pub fn plan(
    spec: &MazeSpec,
    high: &DiffusionModel,
    stitcher: &DiffusionModel,
    current: &EnvState,
    goal: &EnvState,
    cfg: &PlannerConfig,
    rng: &mut Rng,
) -> Result<Plan> {
    cfg.validate()?;
    let n_wp = cfg.num_waypoints();
    let jump = cfg.temporal_jump;
    if high.horizon() != n_wp {
        return Err(Error::Config(format!("high-level horizon {} != {n_wp} waypoints", high.horizon())));
    }
    if stitcher.horizon() != jump + 1 {
        return Err(Error::Config(format!(
            "stitcher horizon {} != temporal_jump + 1 = {}",
            stitcher.horizon(),
            jump + 1
        )));
    }
    let cur = current.to_array().to_vec();
    let g = goal.to_array().to_vec();
    let wp = high
        .sample_ddim_resampled(&[CondSpec::endpoints(n_wp, cur, g)], cfg.ddim_steps, cfg.resample, rng)?
        .pop()
        .expect("one sample");
    let mut waypoints: Vec<EnvState> = wp.rows().into_iter().map(|r| EnvState::new(r[0], r[1])).collect();
    for w in &mut waypoints[1..n_wp - 1] {
        *w = spec.snap(w);
    }
    let conds: Vec<CondSpec> = waypoints
        .windows(2)
        .map(|p| CondSpec::endpoints(jump + 1, p[0].to_array().to_vec(), p[1].to_array().to_vec()))
        .collect();
    let bridges = stitcher.sample_ddim_resampled(&conds, cfg.ddim_steps, cfg.resample, rng)?;

    let mut states = vec![*current];
    for (b, pair) in bridges.iter().zip(waypoints.windows(2)) {
        for t in 1..jump {
            states.push(spec.snap(&EnvState::new(b[[t, 0]], b[[t, 1]])));
        }
        states.push(pair[1]);
    }
    Ok(Plan {
        states,
        waypoint_indices: (0..n_wp).map(|k| k * jump).collect(),
    })
}

/// The action whose exact successor is closest to `subgoal` in latent space;
/// ties go to the smaller id.
pub fn low_level_act<E: StateEmbedding + ?Sized>(spec: &MazeSpec, phi: &E, s: &EnvState, subgoal: &EnvState) -> Result<ActionId> {
    let mut batch = Vec::with_capacity(ActionId::COUNT + 1);
    for a in ActionId::all() {
        batch.push(step(spec, s, a)?);
    }
    batch.push(*subgoal);
    let z = phi.embed_batch(&batch)?;
    let target = z.row(ActionId::COUNT).to_vec();
    let mut best = (ActionId::STAY, f64::INFINITY);
    for (a, row) in ActionId::all().zip(z.rows()) {
        let d = latent_distance(row.as_slice().expect("row"), &target);
        if d < best.1 {
            best = (a, d);
        }
    }
    Ok(best.0)
}

/// Smallest dynamic MSE over all actions from `s` to `s_next`.
pub fn best_action_mse(spec: &MazeSpec, s: &EnvState, s_next: &EnvState) -> Result<f64> {
    let mut best = f64::INFINITY;
    for a in ActionId::all() {
        best = best.min(dynamic_mse(spec, s, a, s_next)?);
    }
    Ok(best)
}

/// [`best_action_mse`] of every consecutive pair.
pub fn plan_dynamic_mse(spec: &MazeSpec, states: &[EnvState]) -> Result<Vec<f64>> {
    states.windows(2).map(|w| best_action_mse(spec, &w[0], &w[1])).collect()
}

/// First index of `trace` within `delta_g` of `goal`.
pub fn success_step(trace: &[EnvState], goal: &EnvState, delta_g: f64) -> Option<usize> {
    trace.iter().position(|s| is_success(s, goal, delta_g))
}

/// The models a planner episode reads.
pub struct PlannerModels<'a, E: StateEmbedding + ?Sized> {
    pub high: &'a DiffusionModel,
    pub stitcher: &'a DiffusionModel,
    pub phi: &'a E,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Task {
    pub start: Cell,
    pub goal: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    /// Environment steps taken (to success, or the step budget).
    pub steps: usize,
    /// Visited states, starting with the start state.
    pub trace: Vec<EnvState>,
    pub actions: Vec<ActionId>,
    pub n_plans: usize,
    /// [`plan_dynamic_mse`] of every generated plan.
    pub plan_mse: Vec<f64>,
}

/// Closed-loop execution of one task.
pub fn rollout_episode<E: StateEmbedding + ?Sized>(
    spec: &MazeSpec,
    models: &PlannerModels<E>,
    start: &EnvState,
    goal: &EnvState,
    cfg: &PlannerConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    cfg.validate()?;
    spec.free_cell_of(start)?;
    spec.free_cell_of(goal)?;
    let mut out = EpisodeOutcome {
        success: false,
        steps: 0,
        trace: vec![*start],
        actions: Vec::new(),
        n_plans: 0,
        plan_mse: Vec::new(),
    };
    if is_success(start, goal, cfg.delta_g) {
        out.success = true;
        return Ok(out);
    }

    let mut s = *start;
    let mut current: Option<Plan> = None;
    let mut subgoal = 0;
    let mut since_subgoal = 0;
    for t in 0..cfg.max_episode_steps {
        let replan = match (&current, cfg.replanning_interval) {
            (None, _) => true,
            (Some(_), Some(r)) => t % r == 0,
            (Some(_), None) => false,
        };
        if replan {
            let p = plan(spec, models.high, models.stitcher, &s, goal, cfg, rng)?;
            out.plan_mse.extend(plan_dynamic_mse(spec, &p.states)?);
            out.n_plans += 1;
            subgoal = cfg.subgoal_horizon.min(p.states.len() - 1);
            since_subgoal = 0;
            current = Some(p);
        }
        let p = current.as_ref().expect("plan exists");
        let a = low_level_act(spec, models.phi, &s, &p.states[subgoal])?;
        s = step(spec, &s, a)?;
        out.actions.push(a);
        out.trace.push(s);
        out.steps = t + 1;
        if is_success(&s, goal, cfg.delta_g) {
            out.success = true;
            return Ok(out);
        }
        since_subgoal += 1;
        if is_success(&s, &p.states[subgoal], cfg.delta_g) || since_subgoal >= cfg.subgoal_horizon {
            subgoal = (subgoal + cfg.subgoal_horizon).min(p.states.len() - 1);
            since_subgoal = 0;
        }
    }
    Ok(out)
}

/// Unique free cells visited divided by the number of free cells.
pub fn coverage<'a>(spec: &MazeSpec, states: impl IntoIterator<Item = &'a EnvState>) -> f64 {
    let visited: HashSet<Cell> = states
        .into_iter()
        .filter_map(|s| spec.cell_of(s))
        .filter(|c| spec.is_free(*c))
        .collect();
    visited.len() as f64 / spec.free_cells().len() as f64
}

pub fn dataset_coverage(dataset: &Dataset) -> f64 {
    coverage(&dataset.spec, dataset.states())
}

/// `n` tasks whose oracle distance is at least `min_distance`: all such
/// ordered pairs, sorted by distance, are cut into `n` equal strata and one
/// pair is drawn uniformly from each.
pub fn task_catalog(oracle: &DistanceOracle, n: usize, min_distance: u32, seed: u64) -> Result<Vec<Task>> {
    let free = oracle.free_cells();
    let mut pairs = Vec::new();
    for &a in free {
        for &b in free {
            if let Some(d) = oracle.distance(a, b)? {
                if d >= min_distance && a != b {
                    pairs.push((d, a, b));
                }
            }
        }
    }
    if pairs.len() < n {
        return Err(Error::Config(format!(
            "only {} pairs have distance >= {min_distance}, need {n}",
            pairs.len()
        )));
    }
    pairs.sort();
    let mut rng = rng_from_seed(seed);
    Ok((0..n)
        .map(|k| {
            let stratum = &pairs[k * pairs.len() / n..(k + 1) * pairs.len() / n];
            let &(_, start, goal) = stratum.choose(&mut rng).expect("non-empty stratum");
            Task { start, goal }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: usize,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub n_plans: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: Task,
    pub oracle_distance: Option<u32>,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub count: usize,
    pub median: f64,
    pub p90: f64,
    pub p95: f64,
    pub max: f64,
}

/// Nearest-rank percentile of a sorted slice.
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl Percentiles {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            count: v.len(),
            median: median_sorted(&v),
            p90: nearest_rank(&v, 0.90),
            p95: nearest_rank(&v, 0.95),
            max: v[v.len() - 1],
        })
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(median_sorted(&v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: PlannerConfig,
    pub seeds: Vec<u64>,
    pub n_episodes: usize,
    pub n_successes: usize,
    pub success_rate: f64,
    pub mean_episode_length: f64,
    /// Cells visited by all executed episodes.
    pub coverage: f64,
    pub plan_mse: Option<Percentiles>,
    pub per_task: Vec<TaskSummary>,
    /// Task-major, then seed order.
    pub episodes: Vec<EpisodeRecord>,
}

/// Every task under every seed; episode `(task, seed)` draws from
/// `derive_seed(seed, task)`.
pub fn evaluate<E: StateEmbedding + ?Sized>(
    spec: &MazeSpec,
    models: &PlannerModels<E>,
    tasks: &[Task],
    cfg: &PlannerConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    cfg.validate()?;
    if tasks.is_empty() || seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one task and one seed".into()));
    }
    let oracle = DistanceOracle::new(spec);
    let jobs: Vec<(usize, u64)> = (0..tasks.len()).flat_map(|t| seeds.iter().map(move |&s| (t, s))).collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(t, seed)| {
            let task = tasks[t];
            let mut rng = rng_from_seed(derive_seed(seed, t as u64));
            rollout_episode(spec, models, &spec.center(task.start), &spec.center(task.goal), cfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_task: Vec<TaskSummary> = tasks
        .iter()
        .map(|&task| {
            Ok(TaskSummary {
                task,
                oracle_distance: oracle.distance(task.start, task.goal)?,
                episodes: 0,
                successes: 0,
                success_rate: 0.0,
            })
        })
        .collect::<Result<_>>()?;
    let mut episodes = Vec::with_capacity(outcomes.len());
    let mut plan_mse = Vec::new();
    for (&(t, seed), o) in jobs.iter().zip(&outcomes) {
        per_task[t].episodes += 1;
        per_task[t].successes += o.success as usize;
        plan_mse.extend_from_slice(&o.plan_mse);
        episodes.push(EpisodeRecord {
            task: t,
            seed,
            success: o.success,
            steps: o.steps,
            n_plans: o.n_plans,
        });
    }
    for s in &mut per_task {
        s.success_rate = s.successes as f64 / s.episodes as f64;
    }
    let n_successes = episodes.iter().filter(|e| e.success).count();
    let n = episodes.len();
    Ok(EvalReport {
        config: cfg.clone(),
        seeds: seeds.to_vec(),
        n_episodes: n,
        n_successes,
        success_rate: n_successes as f64 / n as f64,
        mean_episode_length: episodes.iter().map(|e| e.steps as f64).sum::<f64>() / n as f64,
        coverage: coverage(spec, outcomes.iter().flat_map(|o| o.trace.iter())),
        plan_mse: Percentiles::of(&plan_mse),
        per_task,
        episodes,
    })
}

#[cfg(test)]
mod tests;
