use ndarray::{Array2, ArrayView2};

use super::{backward, forward, forward_tape, MlpSpec};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Number of partials failing both the relative and absolute tolerance.
    pub n_failed: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.n_failed == 0
    }
}

/// Compares [`backward`] against central differences of
/// `L = sum(upstream * forward(batch))` for every parameter.
pub fn gradcheck(
    spec: &MlpSpec,
    params: &[f64],
    batch: ArrayView2<f64>,
    upstream: ArrayView2<f64>,
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradCheckReport> {
    let (_, tape) = forward_tape(spec, params, batch)?;
    let (analytic, _) = backward(spec, params, &tape, upstream)?;
    let objective = |p: &[f64]| -> Result<f64> {
        let y: Array2<f64> = forward(spec, p, batch)?;
        Ok((&y * &upstream).sum())
    };
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        n_checked: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        n_failed: 0,
    };
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = objective(&p)?;
        p[i] = orig - h;
        let down = objective(&p)?;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        report.n_checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        if abs > abs_tol {
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > rel_tol {
                report.n_failed += 1;
            }
        }
    }
    Ok(report)
}
