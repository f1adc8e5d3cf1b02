use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ddim_sample, ddpm_sample, gaussian, q_sample, CondSpec, DiffusionSchedule, NoisePredictor, SampleOptions, ScheduleKind};
use crate::embedding::sidecar_path;
use crate::nn::{self, load_params, save_params, Activation, AdamState, Mlp, MlpSpec, ParamSet, TrainState};
use crate::norm::Normalizer;
use crate::seed::{derive_seed, rng_from_seed, Rng, RngState};
use crate::{Error, Result};

/// `[sin(i f_k)..., cos(i f_k)...]` with `f_k = 10000^(-k / (dim / 2))`.
pub fn sinusoidal_embedding(step: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let a = step as f64 * f;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    out
}

/// MLP epsilon-predictor fed with the flattened noisy trajectory and a
/// sinusoidal embedding of the diffusion step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub net: Mlp,
    pub horizon: usize,
    pub state_dim: usize,
    pub time_dim: usize,
    pub trained_steps: u64,
}

impl NoiseModel {
    pub fn new(horizon: usize, state_dim: usize, time_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let width = horizon * state_dim;
        let spec = MlpSpec::with_hidden(width + time_dim, hidden, width, Activation::Gelu)?;
        Ok(Self {
            net: Mlp::new(spec, seed),
            horizon,
            state_dim,
            time_dim,
            trained_steps: 0,
        })
    }

    fn inputs(&self, x: ArrayView2<f64>, steps: &[usize]) -> Result<Array2<f64>> {
        let width = self.horizon * self.state_dim;
        if x.ncols() != width || x.nrows() != steps.len() {
            return Err(Error::Shape(format!(
                "noise model expects {} x {width}, got {:?}",
                steps.len(),
                x.dim()
            )));
        }
        let mut input = Array2::zeros((x.nrows(), width + self.time_dim));
        input.slice_mut(s![.., ..width]).assign(&x);
        let mut cache: Option<(usize, Vec<f64>)> = None;
        for (b, &t) in steps.iter().enumerate() {
            if cache.as_ref().map(|c| c.0) != Some(t) {
                cache = Some((t, sinusoidal_embedding(t, self.time_dim)));
            }
            let emb = &cache.as_ref().unwrap().1;
            for (k, v) in emb.iter().enumerate() {
                input[[b, width + k]] = *v;
            }
        }
        Ok(input)
    }

    /// Summed squared error per sample, averaged over the batch, with its
    /// parameter gradient.
    pub fn loss_and_grad(&self, x_noisy: ArrayView2<f64>, steps: &[usize], eps: ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
        let input = self.inputs(x_noisy, steps)?;
        let (pred, tape) = self.net.forward_tape(input.view())?;
        let b = steps.len() as f64;
        let diff = &pred - &eps;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
        let upstream = diff.mapv(|d| 2.0 * d / b);
        let (grads, _) = self.net.backward(&tape, upstream.view())?;
        Ok((loss, grads))
    }
}

impl NoisePredictor for NoiseModel {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn predict(&self, x: ArrayView2<f64>, steps: &[usize]) -> Result<Array2<f64>> {
        let input = self.inputs(x, steps)?;
        self.net.forward(input.view())
    }

    fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }
}

/// Draws per-row steps `i ~ U{1..M}` and noise, and returns the mean
/// per-sample squared noise-prediction error.
pub fn train_loss<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    x0: ArrayView2<f64>,
    rng: &mut Rng,
) -> Result<f64> {
    let (steps, eps, noisy) = noisy_batch(schedule, x0, rng)?;
    let pred = model.predict(noisy.view(), &steps)?;
    Ok((&pred - &eps).iter().map(|d| d * d).sum::<f64>() / steps.len() as f64)
}

fn noisy_batch(schedule: &DiffusionSchedule, x0: ArrayView2<f64>, rng: &mut Rng) -> Result<(Vec<usize>, Array2<f64>, Array2<f64>)> {
    let b = x0.nrows();
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = gaussian(b, x0.ncols(), rng);
    let mut noisy = Array2::zeros(x0.dim());
    for r in 0..b {
        let row = q_sample(schedule, x0.slice(s![r..r + 1, ..]), steps[r], eps.slice(s![r..r + 1, ..]))?;
        noisy.row_mut(r).assign(&row.row(0));
    }
    Ok((steps, eps, noisy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub train_steps: u64,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            horizon: 26,
            hidden: vec![256, 256, 256],
            time_dim: 32,
            diffusion_steps: 1000,
            schedule: ScheduleKind::Cosine,
            lr: 2e-4,
            weight_decay: 1e-5,
            batch_size: 64,
            train_steps: 20_000,
            log_every: 100,
            seed: 0,
        }
    }
}

/// A trained noise model with its schedule and normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub noise: NoiseModel,
    pub schedule: DiffusionSchedule,
    pub normalizer: Normalizer,
    pub clip: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    schedule: ScheduleKind,
    diffusion_steps: usize,
    horizon: usize,
    state_dim: usize,
    time_dim: usize,
    trained_steps: u64,
    clip: Option<f64>,
    normalizer: Normalizer,
}

impl DiffusionModel {
    pub fn horizon(&self) -> usize {
        self.noise.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.noise.state_dim
    }

    fn options(&self, resample: usize) -> SampleOptions {
        SampleOptions { clip: self.clip, resample }
    }

    fn to_normalized(&self, cond: &CondSpec) -> CondSpec {
        CondSpec {
            clamps: cond
                .clamps
                .iter()
                .map(|(t, v)| (*t, self.normalizer.normalize(v)))
                .collect(),
        }
    }

    fn to_world(&self, samples: Vec<Array2<f64>>, conds: &[CondSpec]) -> Vec<Array2<f64>> {
        samples
            .into_iter()
            .zip(conds)
            .map(|(mut x, cond)| {
                for mut row in x.rows_mut() {
                    let v = self.normalizer.denormalize(row.as_slice().expect("row"));
                    row.as_slice_mut().expect("row").copy_from_slice(&v);
                }
                for (t, v) in &cond.clamps {
                    x.row_mut(*t).as_slice_mut().expect("row").copy_from_slice(v);
                }
                x
            })
            .collect()
    }

    /// DDIM sampling with clamps in world coordinates; returned trajectories
    /// are in world coordinates with clamped rows bit-exact.
    pub fn sample_ddim(&self, conds: &[CondSpec], n_steps: usize, rng: &mut Rng) -> Result<Vec<Array2<f64>>> {
        self.sample_ddim_resampled(conds, n_steps, 1, rng)
    }

    /// As [`DiffusionModel::sample_ddim`] with `resample` passes per step
    /// (see [`SampleOptions::resample`]).
    pub fn sample_ddim_resampled(&self, conds: &[CondSpec], n_steps: usize, resample: usize, rng: &mut Rng) -> Result<Vec<Array2<f64>>> {
        let norm_conds: Vec<CondSpec> = conds.iter().map(|c| self.to_normalized(c)).collect();
        let out = ddim_sample(&self.noise, &self.schedule, n_steps, &norm_conds, self.options(resample), rng)?;
        Ok(self.to_world(out, conds))
    }

    /// Ancestral sampling; otherwise as [`DiffusionModel::sample_ddim`].
    pub fn sample_ddpm(&self, conds: &[CondSpec], rng: &mut Rng) -> Result<Vec<Array2<f64>>> {
        let norm_conds: Vec<CondSpec> = conds.iter().map(|c| self.to_normalized(c)).collect();
        let out = ddpm_sample(&self.noise, &self.schedule, &norm_conds, self.options(1), rng)?;
        Ok(self.to_world(out, conds))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_params(path, &self.noise.net.spec, &self.noise.net.params)?;
        let side = Sidecar {
            schedule: self.schedule.kind,
            diffusion_steps: self.schedule.steps(),
            horizon: self.noise.horizon,
            state_dim: self.noise.state_dim,
            time_dim: self.noise.time_dim,
            trained_steps: self.noise.trained_steps,
            clip: self.clip,
            normalizer: self.normalizer.clone(),
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (spec, params) = load_params(path)?;
        let side: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let width = side.horizon * side.state_dim;
        if spec.input_dim() != width + side.time_dim || spec.output_dim() != width {
            return Err(Error::Corrupt("diffusion sidecar does not match parameters".into()));
        }
        Ok(Self {
            noise: NoiseModel {
                net: Mlp::from_parts(spec, params)?,
                horizon: side.horizon,
                state_dim: side.state_dim,
                time_dim: side.time_dim,
                trained_steps: side.trained_steps,
            },
            schedule: DiffusionSchedule::new(side.diffusion_steps, side.schedule)?,
            normalizer: side.normalizer,
            clip: side.clip,
        })
    }
}

/// Epsilon-prediction trainer over a fixed matrix of normalized windows.
pub struct DiffusionTrainer {
    pub cfg: DiffusionTrainConfig,
    pub model: NoiseModel,
    pub schedule: DiffusionSchedule,
    pub normalizer: Normalizer,
    pub adam: AdamState,
    pub rng: Rng,
    pub step: u64,
    pub losses: Vec<(u64, f64)>,
    data: Array2<f64>,
}

impl DiffusionTrainer {
    /// `data` rows are flattened normalized trajectories of `cfg.horizon`
    /// states of dimension `state_dim`.
    pub fn new(data: Array2<f64>, state_dim: usize, normalizer: Normalizer, cfg: DiffusionTrainConfig) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Config("no training windows".into()));
        }
        if data.ncols() != cfg.horizon * state_dim {
            return Err(Error::Shape(format!(
                "windows have width {}, expected {}",
                data.ncols(),
                cfg.horizon * state_dim
            )));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let model = NoiseModel::new(cfg.horizon, state_dim, cfg.time_dim, &cfg.hidden, cfg.seed)?;
        let adam = AdamState::new(model.net.params.len(), cfg.lr).with_weight_decay(cfg.weight_decay);
        Ok(Self {
            schedule: DiffusionSchedule::new(cfg.diffusion_steps, cfg.schedule)?,
            model,
            normalizer,
            adam,
            rng: rng_from_seed(derive_seed(cfg.seed, u64::MAX)),
            step: 0,
            losses: Vec::new(),
            data,
            cfg,
        })
    }

    pub fn resume(data: Array2<f64>, state_dim: usize, normalizer: Normalizer, cfg: DiffusionTrainConfig, state: TrainState) -> Result<Self> {
        let mut t = Self::new(data, state_dim, normalizer, cfg)?;
        let [params]: [ParamSet; 1] = state
            .params
            .try_into()
            .map_err(|_| Error::Corrupt("diffusion state needs one param set".into()))?;
        t.model.net = Mlp::from_parts(t.model.net.spec.clone(), params)?;
        if state.adam.m.len() != t.model.net.params.len() {
            return Err(Error::Corrupt("adam moments do not match parameters".into()));
        }
        t.adam = state.adam;
        t.rng = state.rng.restore().ok_or_else(|| Error::Corrupt("bad rng state".into()))?;
        t.step = state.step;
        t.model.trained_steps = state.step;
        t.losses = state.losses;
        Ok(t)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            rng: RngState::capture(&self.rng),
            params: vec![self.model.net.params.clone()],
            adam: self.adam.clone(),
            losses: self.losses.clone(),
        }
    }

    pub fn train_step(&mut self) -> Result<f64> {
        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| self.rng.random_range(0..self.data.nrows()))
            .collect();
        let x0 = nn::gather_rows(self.data.view(), &idx);
        let (steps, eps, noisy) = noisy_batch(&self.schedule, x0.view(), &mut self.rng)?;
        let (loss, grads) = self.model.loss_and_grad(noisy.view(), &steps, eps.view())?;
        self.adam.step(&mut self.model.net.params.values, &grads)?;
        self.step += 1;
        self.model.trained_steps = self.step;
        if self.cfg.log_every > 0 && self.step % self.cfg.log_every == 0 {
            self.losses.push((self.step, loss));
        }
        Ok(loss)
    }

    pub fn train_until(&mut self, total_steps: u64) -> Result<()> {
        while self.step < total_steps {
            self.train_step()?;
        }
        Ok(())
    }

    pub fn train(&mut self) -> Result<()> {
        self.train_until(self.cfg.train_steps)
    }

    /// Clip bound for predicted clean samples: the largest absolute
    /// normalized training value, widened by 10%.
    pub fn clip_bound(&self) -> f64 {
        1.1 * self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn model(&self) -> DiffusionModel {
        DiffusionModel {
            noise: self.model.clone(),
            schedule: self.schedule.clone(),
            normalizer: self.normalizer.clone(),
            clip: Some(self.clip_bound()),
        }
    }
}
