//! The stitching loop.
//!
//! A rollout starts from a random dataset segment and a random unit
//! direction `z` in latent space. Each stitch retrieves the `k` segments whose
//! start latents are nearest to the current end, scores them by progress
//! along `z` plus weighted novelty against every latent visited so far, and
//! appends a diffusion bridge from the current end to the winner's end.
//! Actions are labelled afterwards by an inverse dynamics model.

mod inverse;

pub use inverse::{
    accuracy, cross_entropy_and_grad, infer_actions, labelled_transitions, train_inverse_dynamics, InverseDynamicsModel,
    InverseTrainConfig, InverseTrainer,
};

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::diffusion::{CondSpec, DiffusionModel};
use crate::embedding::StateEmbedding;
use crate::index::{euclidean, IvfIndex, SegmentSet};
use crate::maze::{dynamic_mse, Dataset, DatasetMeta, EnvState, Trajectory};
use crate::seed::{derive_seed, rng_from_seed, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchConfig {
    pub k: usize,
    pub k_density: usize,
    pub beta: f64,
    pub n_stitch: usize,
    pub n_traj: usize,
    pub h_stitcher: usize,
    pub ddim_steps: usize,
    /// Sampler passes per DDIM step; see [`crate::diffusion::SampleOptions::resample`].
    pub resample: usize,
    /// `None` uses the index default.
    pub n_probe: Option<usize>,
    pub seed: u64,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self {
            k: 10,
            k_density: 30,
            beta: 2.0,
            n_stitch: 8,
            n_traj: 500,
            h_stitcher: 26,
            ddim_steps: 20,
            resample: 10,
            n_probe: None,
            seed: 0,
        }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k_density < 1 {
            return Err(Error::Config("k and k_density must be at least 1".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if self.ddim_steps < 1 || self.resample < 1 {
            return Err(Error::Config("ddim_steps and resample must be at least 1".into()));
        }
        if self.h_stitcher < 2 {
            return Err(Error::Config("h_stitcher must be at least 2".into()));
        }
        Ok(())
    }
}

/// A uniformly random unit vector (Gaussian draw, normalized).
pub fn sample_direction(dim: usize, rng: &mut Rng) -> Vec<f64> {
    assert!(dim >= 1, "latent_dim must be positive");
    loop {
        let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            return z.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// `<phi_end - phi_start, z>`.
pub fn progress_score(phi_start: &[f64], phi_end: &[f64], z: &[f64]) -> f64 {
    phi_start.iter().zip(phi_end).zip(z).map(|((s, e), d)| (e - s) * d).sum()
}

/// Mean distance from `candidate` to its `min(k_density, |visited|)` nearest
/// visited latents; 0 when nothing has been visited.
pub fn novelty_score(candidate: &[f64], visited: &[Vec<f64>], k_density: usize) -> f64 {
    if visited.is_empty() {
        return 0.0;
    }
    let c = ArrayView1::from(candidate);
    let mut d: Vec<f64> = visited.iter().map(|v| euclidean(ArrayView1::from(&v[..]), c)).collect();
    let k = k_density.min(d.len());
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, f64::total_cmp);
    }
    let nearest = &mut d[..k];
    nearest.sort_by(f64::total_cmp);
    nearest.iter().sum::<f64>() / k as f64
}

pub fn combined_score(progress: f64, novelty: f64, beta: f64) -> f64 {
    progress + beta * novelty
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub id: usize,
    pub progress: f64,
    pub novelty: f64,
    pub score: f64,
}

/// Highest score; ties go to the smaller record id.
pub fn select_best(candidates: &[ScoredCandidate]) -> Result<ScoredCandidate> {
    let mut best: Option<ScoredCandidate> = None;
    for c in candidates {
        best = match best {
            Some(b) if b.score > c.score || (b.score == c.score && b.id < c.id) => Some(b),
            _ => Some(*c),
        };
    }
    best.ok_or(Error::NoCandidates)
}

/// DDIM inpainting of a bridge whose first and last rows are `start` and
/// `end`. Rows are raw world coordinates (not snapped to cells).
pub fn refine_bridge(
    stitcher: &DiffusionModel,
    start: &EnvState,
    end: &EnvState,
    ddim_steps: usize,
    resample: usize,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    let h = stitcher.horizon();
    let cond = CondSpec::endpoints(h, start.to_array().to_vec(), end.to_array().to_vec());
    let mut out = stitcher.sample_ddim_resampled(&[cond], ddim_steps, resample, rng)?;
    Ok(out.pop().expect("one sample"))
}

/// Everything a rollout reads. All parts are immutable and shared across
/// parallel rollouts.
pub struct StitchContext<'a, E: StateEmbedding + ?Sized> {
    pub dataset: &'a Dataset,
    pub segments: &'a SegmentSet,
    pub index: &'a IvfIndex,
    pub phi: &'a E,
    pub stitcher: &'a DiffusionModel,
    pub inverse: &'a InverseDynamicsModel,
}

/// Per-rollout measurements of junction and bridge consistency.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutDiagnostics {
    /// Dynamic MSE of hard-concatenating the raw segments at each stitch:
    /// the source action recorded at the current end, executed from the
    /// current end, against the chosen segment's first state.
    pub raw_junction_mse: Vec<f64>,
    /// Dynamic MSE of every appended bridge transition (stored, snapped
    /// states; inferred actions).
    pub bridge_mse: Vec<f64>,
    /// As `bridge_mse`, against the unsnapped sampled next state.
    pub bridge_mse_unsnapped: Vec<f64>,
    pub selected: Vec<ScoredCandidate>,
    /// Every scored candidate of every stitch.
    pub scored: Vec<ScoredCandidate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutput {
    pub trajectory: Trajectory,
    /// `V_rollout`: one latent per state of the trajectory.
    pub visited: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub diagnostics: RolloutDiagnostics,
}

/// Runs one stitching rollout with its own RNG stream.
pub fn run_rollout<E: StateEmbedding + ?Sized>(ctx: &StitchContext<E>, cfg: &StitchConfig, episode_id: u64, rollout_seed: u64) -> Result<RolloutOutput> {
    cfg.validate()?;
    let records = &ctx.segments.records;
    if records.is_empty() || ctx.index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if ctx.stitcher.horizon() != cfg.h_stitcher {
        return Err(Error::Config(format!(
            "stitcher horizon {} != h_stitcher {}",
            ctx.stitcher.horizon(),
            cfg.h_stitcher
        )));
    }
    let spec = &ctx.dataset.spec;
    let mut rng = rng_from_seed(rollout_seed);
    let init = &records[rng.random_range(0..records.len())];
    let src = &ctx.dataset.trajectories[init.traj_id];
    let mut states: Vec<EnvState> = src.states[init.start_offset..init.start_offset + init.length].to_vec();
    // where the current end sits in the source data: (trajectory, offset)
    let mut end_source = (init.traj_id, init.start_offset + init.length - 1);

    let z = sample_direction(ctx.phi.latent_dim(), &mut rng);
    let mut visited: Vec<Vec<f64>> = ctx.phi.embed_batch(&states)?.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut diag = RolloutDiagnostics::default();
    let n_probe = cfg.n_probe.unwrap_or(ctx.index.n_probe);

    for _ in 0..cfg.n_stitch {
        let end = *states.last().expect("non-empty");
        let query = visited.last().expect("non-empty").clone();
        let hits = ctx.index.topk(&query, cfg.k, n_probe)?;
        let scored: Vec<ScoredCandidate> = hits
            .iter()
            .map(|&(id, _)| {
                let r = &records[id];
                let p = progress_score(&r.phi_start, &r.phi_end, &z);
                let n = novelty_score(&r.phi_end, &visited, cfg.k_density);
                ScoredCandidate {
                    id,
                    progress: p,
                    novelty: n,
                    score: combined_score(p, n, cfg.beta),
                }
            })
            .collect();
        let best = select_best(&scored)?;
        diag.scored.extend_from_slice(&scored);
        diag.selected.push(best);
        let rec = &records[best.id];

        let src_action = ctx.dataset.trajectories[end_source.0].actions[end_source.1];
        diag.raw_junction_mse.push(dynamic_mse(spec, &end, src_action, &rec.start_state)?);

        let bridge = refine_bridge(ctx.stitcher, &end, &rec.end_state, cfg.ddim_steps, cfg.resample, &mut rng)?;
        let raw: Vec<EnvState> = bridge.rows().into_iter().map(|r| EnvState::new(r[0], r[1])).collect();
        let snapped: Vec<EnvState> = raw.iter().map(|s| spec.snap(s)).collect();
        let actions = infer_actions(ctx.inverse, &snapped)?;
        for t in 0..snapped.len() - 1 {
            diag.bridge_mse.push(dynamic_mse(spec, &snapped[t], actions[t], &snapped[t + 1])?);
            diag.bridge_mse_unsnapped.push(dynamic_mse(spec, &snapped[t], actions[t], &raw[t + 1])?);
        }
        let appended = &snapped[1..];
        visited.extend(ctx.phi.embed_batch(appended)?.rows().into_iter().map(|r| r.to_vec()));
        states.extend_from_slice(appended);
        end_source = (rec.traj_id, rec.start_offset + rec.length - 1);
    }

    let actions = infer_actions(ctx.inverse, &states)?;
    Ok(RolloutOutput {
        trajectory: Trajectory {
            episode_id,
            states,
            actions,
        },
        visited,
        z,
        diagnostics: diag,
    })
}

/// Summary of an augmentation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub rollouts: Vec<RolloutDiagnostics>,
}

impl AugmentReport {
    pub fn raw_junction_mse(&self) -> Vec<f64> {
        self.rollouts.iter().flat_map(|r| r.raw_junction_mse.iter().copied()).collect()
    }

    pub fn bridge_mse(&self) -> Vec<f64> {
        self.rollouts.iter().flat_map(|r| r.bridge_mse.iter().copied()).collect()
    }

    pub fn bridge_mse_unsnapped(&self) -> Vec<f64> {
        self.rollouts.iter().flat_map(|r| r.bridge_mse_unsnapped.iter().copied()).collect()
    }
}

/// `n_traj` rollouts with seeds `derive_seed(seed, n)`, run in parallel and
/// collected in rollout order. `extra_meta` is merged into the dataset meta.
pub fn augment_dataset<E: StateEmbedding + ?Sized>(
    ctx: &StitchContext<E>,
    cfg: &StitchConfig,
    extra_meta: Map<String, Value>,
) -> Result<(Dataset, AugmentReport)> {
    cfg.validate()?;
    let outputs = (0..cfg.n_traj as u64)
        .into_par_iter()
        .map(|n| run_rollout(ctx, cfg, n, derive_seed(cfg.seed, n)))
        .collect::<Result<Vec<_>>>()?;
    let mut trajectories = Vec::with_capacity(outputs.len());
    let mut report = AugmentReport::default();
    for o in outputs {
        trajectories.push(o.trajectory);
        report.rollouts.push(o.diagnostics);
    }
    let mut meta = DatasetMeta::new("augment", cfg.seed);
    if let Value::Object(m) = serde_json::to_value(cfg)? {
        meta.params = m;
    }
    meta.params.extend(extra_meta);
    Ok((
        Dataset {
            spec: ctx.dataset.spec.clone(),
            trajectories,
            meta,
        },
        report,
    ))
}

#[cfg(test)]
mod tests;
