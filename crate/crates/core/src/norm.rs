//! Per-dimension affine normalization of state coordinates.
//!
//! Statistics are z-scores snapped to dyadic values: the mean is rounded to a
//! multiple of 1/16 and the standard deviation to a power of two. Scaling by a
//! power of two is exact, so cell-centred coordinates (and anything
//! normalized from them) survive a normalize/denormalize round trip without
//! a single changed bit.

use serde::{Deserialize, Serialize};

const MEAN_QUANTUM: f64 = 1.0 / 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits dyadic z-score statistics over `rows`, each of length `dim`.
    pub fn fit<'a, I>(rows: I, dim: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        let mut n = 0usize;
        for row in rows {
            for d in 0..dim {
                sum[d] += row[d];
                sum_sq[d] += row[d] * row[d];
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let nf = n as f64;
        let mut mean = Vec::with_capacity(dim);
        let mut std = Vec::with_capacity(dim);
        for d in 0..dim {
            let m = sum[d] / nf;
            let var = (sum_sq[d] / nf - m * m).max(0.0);
            mean.push((m / MEAN_QUANTUM).round() * MEAN_QUANTUM);
            let s = var.sqrt();
            let s = if s > 1e-3 { s } else { 1.0 };
            std.push(2f64.powi(s.log2().round() as i32));
        }
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_value(&self, d: usize, x: f64) -> f64 {
        (x - self.mean[d]) / self.std[d]
    }

    pub fn denormalize_value(&self, d: usize, y: f64) -> f64 {
        y * self.std[d] + self.mean[d]
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(d, &v)| self.normalize_value(d, v))
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(d, &v)| self.denormalize_value(d, v))
            .collect()
    }

    /// Normalizes a flattened `[T × dim]` buffer in place.
    pub fn normalize_rows(&self, buf: &mut [f64]) {
        let dim = self.dim();
        for (i, v) in buf.iter_mut().enumerate() {
            *v = self.normalize_value(i % dim, *v);
        }
    }

    pub fn denormalize_rows(&self, buf: &mut [f64]) {
        let dim = self.dim();
        for (i, v) in buf.iter_mut().enumerate() {
            *v = self.denormalize_value(i % dim, *v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fitted_stats_are_dyadic() {
        let rows: Vec<[f64; 2]> = (0..10).map(|i| [i as f64 + 0.5, 3.5]).collect();
        let n = Normalizer::fit(rows.iter().map(|r| &r[..]), 2);
        for d in 0..2 {
            assert_eq!((n.mean[d] * 16.0).fract(), 0.0);
            assert_eq!(n.std[d].log2().fract(), 0.0);
        }
        // constant column falls back to unit scale
        assert_eq!(n.std[1], 1.0);
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise_on_cell_lattice(
            cx in 0u32..64, cy in 0u32..64,
            mx in -64i32..64, my in -64i32..64,
            kx in -3i32..4, ky in -3i32..4,
        ) {
            let n = Normalizer {
                mean: vec![mx as f64 / 16.0, my as f64 / 16.0],
                std: vec![2f64.powi(kx), 2f64.powi(ky)],
            };
            let world = [cx as f64 + 0.5, cy as f64 + 0.5];
            let y = n.normalize(&world);
            let back = n.denormalize(&y);
            prop_assert_eq!(back[0].to_bits(), world[0].to_bits());
            prop_assert_eq!(back[1].to_bits(), world[1].to_bits());
            let y2 = n.normalize(&back);
            prop_assert_eq!(y2[0].to_bits(), y[0].to_bits());
            prop_assert_eq!(y2[1].to_bits(), y[1].to_bits());
        }
    }
}
