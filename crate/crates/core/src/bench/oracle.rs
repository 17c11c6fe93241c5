//! Finite-difference oracle for raw-parameter gradients.
//!
//! The oracle only calls forward code: it perturbs one raw lattice value at a
//! time and differentiates a scalar objective with the fourth-order central
//! stencil `(8(f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h`.

use crate::field::{ParamGradient, VoxelGrid};

/// Default perturbation for raw parameters.
pub const FD_STEP: f64 = 1e-4;

/// Numerical gradient of `objective` with respect to every raw parameter.
pub fn numeric_gradient(grid: &VoxelGrid, step: f64, objective: impl Fn(&VoxelGrid) -> f64) -> Vec<f64> {
    let mut g = grid.clone();
    (0..grid.param_count())
        .map(|i| {
            let orig = g.param(i);
            let mut eval = |d: f64| {
                *g.param_mut(i) = orig + d;
                objective(&g)
            };
            let f1 = eval(step) - eval(-step);
            let f2 = eval(2.0 * step) - eval(-2.0 * step);
            *g.param_mut(i) = orig;
            (8.0 * f1 - f2) / (12.0 * step)
        })
        .collect()
}

/// Worst relative error between an analytic and a numeric gradient.
///
/// Each component is compared as `|a - n| / max(|a|, |n|, 1e-3 * scale)` where
/// `scale` is the largest numeric magnitude, so components that are negligible
/// relative to the gradient as a whole are judged on an absolute scale.
/// Returns `(max_rel_err, index_of_worst)`; two all-zero gradients give 0.
pub fn max_relative_error(analytic: &ParamGradient, numeric: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let mut worst = (0.0, 0);
    for (i, &n) in numeric.iter().enumerate() {
        let a = analytic.get(i);
        let diff = (a - n).abs();
        if diff == 0.0 {
            continue;
        }
        let rel = diff / a.abs().max(n.abs()).max(floor);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    worst
}
