use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Noise schedule with 1-based step indices: `beta(i)` and `alpha_bar(i)`
/// for `i` in `1..=M`, and `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(m: usize, kind: ScheduleKind) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let betas = match kind {
            ScheduleKind::Linear => {
                // the usual 1e-4..2e-2 range at M = 1000, rescaled for other M
                let scale = 1000.0 / m as f64;
                let (lo, hi) = (scale * 1e-4, (scale * 0.02).min(MAX_BETA));
                (0..m)
                    .map(|k| {
                        if m == 1 {
                            lo.min(hi)
                        } else {
                            lo + (hi - lo) * k as f64 / (m - 1) as f64
                        }
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    ((t / m as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (1..=m)
                    .map(|i| (1.0 - f(i as f64) / f(i as f64 - 1.0)).clamp(1e-12, MAX_BETA))
                    .collect()
            }
        };
        Self::from_betas_kind(betas, kind)
    }

    /// Builds a schedule from explicit `beta_1..beta_M`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        Self::from_betas_kind(betas, ScheduleKind::Linear)
    }

    fn from_betas_kind(betas: Vec<f64>, kind: ScheduleKind) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let mut alphas_bar = Vec::with_capacity(betas.len() + 1);
        alphas_bar.push(1.0);
        for b in &betas {
            alphas_bar.push(alphas_bar.last().unwrap() * (1.0 - b));
        }
        let mut posterior_var = vec![0.0; betas.len() + 1];
        for i in 1..=betas.len() {
            posterior_var[i] = betas[i - 1] * (1.0 - alphas_bar[i - 1]) / (1.0 - alphas_bar[i]);
        }
        Ok(Self {
            kind,
            betas,
            alphas_bar,
            posterior_var,
        })
    }

    /// Number of diffusion steps `M`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.betas[i - 1]
    }

    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alphas_bar[i]
    }

    /// `beta_i (1 - alpha_bar_{i-1}) / (1 - alpha_bar_i)`.
    pub fn posterior_var(&self, i: usize) -> f64 {
        self.posterior_var[i]
    }
}

pub fn make_schedule(m: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    DiffusionSchedule::new(m, kind)
}
