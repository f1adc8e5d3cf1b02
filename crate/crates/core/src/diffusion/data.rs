use ndarray::Array2;

use crate::maze::Dataset;
use crate::norm::Normalizer;

/// Number of windows of `len` states spaced `jump` apart, started every
/// `stride` steps, that fit in a trajectory of `traj_len` states.
pub fn window_count(traj_len: usize, len: usize, jump: usize, stride: usize) -> usize {
    let span = (len - 1) * jump + 1;
    if traj_len < span {
        0
    } else {
        (traj_len - span) / stride + 1
    }
}

/// Normalized, flattened training windows from every trajectory: row `r`
/// holds `len` states `s_o, s_{o+jump}, ...` in row-major `(x, y)` order.
pub fn strided_windows(dataset: &Dataset, norm: &Normalizer, len: usize, jump: usize, stride: usize) -> Array2<f64> {
    assert!(len >= 1 && jump >= 1 && stride >= 1, "window parameters must be positive");
    let mut rows = Vec::new();
    let mut n = 0;
    for traj in &dataset.trajectories {
        let count = window_count(traj.len(), len, jump, stride);
        for w in 0..count {
            let start = w * stride;
            for k in 0..len {
                let s = traj.states[start + k * jump];
                rows.push(norm.normalize_value(0, s.x));
                rows.push(norm.normalize_value(1, s.y));
            }
            n += 1;
        }
    }
    Array2::from_shape_vec((n, len * 2), rows).expect("window layout")
}
