//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward closure; it never touches the
//! analytic backward pass it is compared against.

use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Relative error used throughout: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference gradient of `f` at `x` for the listed coordinates.
pub fn numeric_grad(x: &Tensor, coords: &[usize], mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest relative error between `analytic[coords]` and the central differences.
pub fn max_relative_error(
    x: &Tensor,
    analytic: &Tensor,
    coords: &[usize],
    floor: f64,
    f: impl FnMut(&Tensor) -> f64,
) -> f64 {
    let numeric = numeric_grad(x, coords, f);
    coords
        .iter()
        .zip(numeric)
        .map(|(&i, n)| relative_error(analytic.data()[i], n, floor))
        .fold(0.0, f64::max)
}

/// Up to `limit` coordinates spread evenly across a tensor of `len` values.
pub fn spread_coords(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    (0..limit).map(|j| j * (len - 1) / (limit - 1)).collect()
}
