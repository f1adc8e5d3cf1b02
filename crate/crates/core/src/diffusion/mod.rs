//! Denoising diffusion over fixed-horizon state sequences.
//!
//! A trajectory tensor is an `H x D` matrix of normalized states. Batches are
//! handled flattened: each row of a `B x (H * D)` matrix is one trajectory in
//! row-major order. Samplers support inpainting: clamped rows are replaced at
//! every reverse step by a correspondingly noised copy of the clamp value,
//! and set to the exact clamp value at the end.

mod data;
mod model;
mod schedule;

pub use data::{strided_windows, window_count};
pub use model::{
    sinusoidal_embedding, train_loss, DiffusionModel, DiffusionTrainConfig, DiffusionTrainer, NoiseModel,
};
pub use schedule::{make_schedule, DiffusionSchedule, ScheduleKind};

use ndarray::{Array2, ArrayView2, Zip};
use rand_distr::{Distribution, StandardNormal};

use crate::seed::Rng;
use crate::{Error, Result};

/// `sqrt(alpha_bar_i) * x0 + sqrt(1 - alpha_bar_i) * eps`; `i == 0` returns
/// `x0` unchanged.
pub fn q_sample(schedule: &DiffusionSchedule, x0: ArrayView2<f64>, i: usize, eps: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x0.dim() != eps.dim() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.dim(), eps.dim())));
    }
    if i > schedule.steps() {
        return Err(Error::Config(format!("step {i} beyond M = {}", schedule.steps())));
    }
    let ab = schedule.alpha_bar(i);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(&x0).and(&eps).map_collect(|&x, &e| a * x + b * e))
}

/// Iterates the single-step kernel `x_i = sqrt(1 - beta_i) x_{i-1} + sqrt(beta_i) z`.
pub fn q_sample_iterated(schedule: &DiffusionSchedule, x0: ArrayView2<f64>, i: usize, rng: &mut Rng) -> Array2<f64> {
    let mut x = x0.to_owned();
    for k in 1..=i {
        let beta = schedule.beta(k);
        let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
        x.mapv_inplace(|v| a * v + b * { let z: f64 = StandardNormal.sample(rng); z });
    }
    x
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Rows of a trajectory pinned to given values. Row indices are 0-based.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CondSpec {
    pub clamps: Vec<(usize, Vec<f64>)>,
}

impl CondSpec {
    pub fn none() -> Self {
        Self::default()
    }

    /// Pins the first and last rows of a horizon-`h` trajectory.
    pub fn endpoints(h: usize, start: Vec<f64>, end: Vec<f64>) -> Self {
        Self {
            clamps: vec![(0, start), (h - 1, end)],
        }
    }

    pub fn validate(&self, horizon: usize, dim: usize) -> Result<()> {
        let mut seen = vec![false; horizon];
        for (t, v) in &self.clamps {
            if *t >= horizon {
                return Err(Error::Config(format!("clamp index {t} outside horizon {horizon}")));
            }
            if seen[*t] {
                return Err(Error::Config(format!("two clamps at index {t}")));
            }
            seen[*t] = true;
            if v.len() != dim {
                return Err(Error::Shape(format!("clamp at {t} has {} values, expected {dim}", v.len())));
            }
        }
        Ok(())
    }

    /// The clamp values laid out as a flat trajectory row, with zeros elsewhere.
    fn apply(&self, row: &mut [f64], dim: usize, mut value: impl FnMut(usize, f64, usize) -> f64) {
        for (t, v) in &self.clamps {
            for d in 0..dim {
                row[t * dim + d] = value(*t, v[d], d);
            }
        }
    }
}

/// An epsilon-prediction network over flattened `H x D` trajectories.
pub trait NoisePredictor: Sync {
    fn horizon(&self) -> usize;
    fn state_dim(&self) -> usize;

    /// `x` is `B x (H * D)`; `steps[b]` is the diffusion step of row `b`.
    fn predict(&self, x: ArrayView2<f64>, steps: &[usize]) -> Result<Array2<f64>>;

    fn is_trained(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    /// Clip predicted clean trajectories to `[-c, c]` before each update.
    pub clip: Option<f64>,
    /// Passes per reverse step. After every pass but the last, the state is
    /// pushed back up one step with fresh forward noise and the step is
    /// repeated, so unclamped rows can adapt to the clamps. 1 is plain
    /// sampling.
    pub resample: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { clip: None, resample: 1 }
    }
}

/// `x <- sqrt(ratio) x + sqrt(1 - ratio) z`: forward noising from one step to
/// a noisier one, where `ratio` is the quotient of their `alpha_bar`s.
fn renoise(x: &mut Array2<f64>, ratio: f64, rng: &mut Rng) {
    let (a, b) = (ratio.sqrt(), (1.0 - ratio).sqrt());
    x.mapv_inplace(|v| a * v + b * {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
}

fn check_model<P: NoisePredictor + ?Sized>(model: &P, conds: &[CondSpec]) -> Result<usize> {
    if !model.is_trained() {
        return Err(Error::Untrained("noise model has not been trained".into()));
    }
    for c in conds {
        c.validate(model.horizon(), model.state_dim())?;
    }
    Ok(model.horizon() * model.state_dim())
}

fn predict_x0(
    schedule: &DiffusionSchedule,
    x: &Array2<f64>,
    eps: &Array2<f64>,
    t: usize,
    opts: SampleOptions,
    conds: &[CondSpec],
    dim: usize,
) -> Array2<f64> {
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut x0 = Zip::from(x).and(eps).map_collect(|&xv, &e| (xv - sb * e) / sa);
    if let Some(c) = opts.clip {
        x0.mapv_inplace(|v| v.clamp(-c, c));
    }
    for (b, cond) in conds.iter().enumerate() {
        let mut row = x0.row_mut(b);
        cond.apply(row.as_slice_mut().expect("contiguous"), dim, |_, v, _| v);
    }
    x0
}

fn check_resample(opts: SampleOptions) -> Result<()> {
    if opts.resample == 0 {
        return Err(Error::Config("resample must be at least 1".into()));
    }
    Ok(())
}

/// Ancestral (DDPM) sampling: one trajectory per entry of `conds`.
pub fn ddpm_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    conds: &[CondSpec],
    opts: SampleOptions,
    rng: &mut Rng,
) -> Result<Vec<Array2<f64>>> {
    let width = check_model(model, conds)?;
    check_resample(opts)?;
    let dim = model.state_dim();
    let n = conds.len();
    let m = schedule.steps();
    let mut x = gaussian(n, width, rng);
    replace_noised(&mut x, conds, schedule, m, dim, rng);
    for i in (1..=m).rev() {
        let (ab, ab_prev, beta) = (schedule.alpha_bar(i), schedule.alpha_bar(i - 1), schedule.beta(i));
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        for pass in 0..opts.resample {
            let eps = model.predict(x.view(), &vec![i; n])?;
            let x0 = predict_x0(schedule, &x, &eps, i, opts, &[], dim);
            let mut next = Zip::from(&x0).and(&x).map_collect(|&a, &b| c0 * a + ct * b);
            if i > 1 {
                let sigma = schedule.posterior_var(i).sqrt();
                next.mapv_inplace(|v| v + sigma * { let z: f64 = StandardNormal.sample(rng); z });
            }
            x = next;
            replace_noised(&mut x, conds, schedule, i - 1, dim, rng);
            if pass + 1 < opts.resample && i > 1 {
                renoise(&mut x, 1.0 - beta, rng);
            }
        }
    }
    Ok(unflatten(x, model.horizon(), dim))
}

fn replace_noised(x: &mut Array2<f64>, conds: &[CondSpec], schedule: &DiffusionSchedule, i: usize, dim: usize, rng: &mut Rng) {
    let ab = schedule.alpha_bar(i);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    for (r, cond) in conds.iter().enumerate() {
        let mut row = x.row_mut(r);
        let row = row.as_slice_mut().expect("contiguous");
        if i == 0 {
            cond.apply(row, dim, |_, v, _| v);
        } else {
            cond.apply(row, dim, |_, v, _| a * v + b * { let z: f64 = StandardNormal.sample(rng); z });
        }
    }
}

/// The `n` DDIM timesteps `floor((j + 1) M / n)` for `j = 0..n`.
pub fn ddim_timesteps(m: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > m {
        return Err(Error::Config(format!("ddim steps must lie in 1..={m}, got {n}")));
    }
    Ok((0..n).map(|j| (j + 1) * m / n).collect())
}

/// Deterministic (eta = 0) DDIM sampling over `n_steps` strided timesteps.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    n_steps: usize,
    conds: &[CondSpec],
    opts: SampleOptions,
    rng: &mut Rng,
) -> Result<Vec<Array2<f64>>> {
    let width = check_model(model, conds)?;
    check_resample(opts)?;
    let dim = model.state_dim();
    let n = conds.len();
    let ts = ddim_timesteps(schedule.steps(), n_steps)?;
    let mut x = gaussian(n, width, rng);
    replace_noised(&mut x, conds, schedule, schedule.steps(), dim, rng);
    for j in (0..ts.len()).rev() {
        let t = ts[j];
        let t_prev = if j == 0 { 0 } else { ts[j - 1] };
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for pass in 0..opts.resample {
            let eps = model.predict(x.view(), &vec![t; n])?;
            let x0 = predict_x0(schedule, &x, &eps, t, opts, conds, dim);
            x = Zip::from(&x0).and(&x).map_collect(|&c, &xv| {
                let e = (xv - sa * c) / sb;
                pa * c + pb * e
            });
            if pass + 1 < opts.resample && j > 0 {
                renoise(&mut x, ab / ab_prev, rng);
            }
        }
    }
    replace_noised(&mut x, conds, schedule, 0, dim, rng);
    Ok(unflatten(x, model.horizon(), dim))
}

fn unflatten(x: Array2<f64>, horizon: usize, dim: usize) -> Vec<Array2<f64>> {
    x.rows()
        .into_iter()
        .map(|r| Array2::from_shape_vec((horizon, dim), r.to_vec()).expect("row width"))
        .collect()
}
