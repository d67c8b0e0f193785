//! Euclidean projection onto the capped simplex and the proximal-linear
//! weight update built on it.

use crate::error::{Error, Result};
use crate::model::{check_cap, WeightVector};
use crate::vecops;

const MIN_BISECTIONS: usize = 60;
const MAX_BISECTIONS: usize = 200;
const FEASIBILITY_TOL: f64 = 1e-12;

/// Projection together with its KKT certificate:
/// `w_i = clamp(v_i - multiplier, 0, cap)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionResult {
    pub w: WeightVector,
    pub multiplier: f64,
    /// Coordinates clipped at zero.
    pub active_lo: Vec<usize>,
    /// Coordinates clipped at the cap.
    pub active_hi: Vec<usize>,
}

fn clipped_sum(v: &[f64], lambda: f64, cap: f64) -> f64 {
    v.iter().map(|vi| (vi - lambda).clamp(0.0, cap)).sum()
}

/// `argmin_{w in capped simplex} |w - v|^2`, found by bisection on the
/// water level.
pub fn project(v: &[f64], cap: f64) -> Result<ProjectionResult> {
    let k = v.len();
    check_cap(k, cap)?;
    if !vecops::all_finite(v) {
        return Err(Error::invalid("projection input has non-finite entries"));
    }
    let kf = k as f64;
    let min_v = v.iter().copied().fold(f64::INFINITY, f64::min);

    // Single feasible point.
    if (cap * kf - 1.0).abs() <= FEASIBILITY_TOL {
        let cap = 1.0 / kf;
        return Ok(ProjectionResult {
            w: WeightVector::from_parts_unchecked(vec![cap; k], cap),
            multiplier: min_v - cap,
            active_lo: Vec::new(),
            active_hi: (0..k).collect(),
        });
    }

    let max_v = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (min_v - 1.0, max_v);
    let mut lambda = 0.5 * (lo + hi);
    for iter in 0..MAX_BISECTIONS {
        lambda = 0.5 * (lo + hi);
        let excess = clipped_sum(v, lambda, cap) - 1.0;
        if excess > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        if iter + 1 >= MIN_BISECTIONS && excess.abs() <= FEASIBILITY_TOL {
            break;
        }
        if hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
            break;
        }
    }

    let mut values = Vec::with_capacity(k);
    let mut active_lo = Vec::new();
    let mut active_hi = Vec::new();
    for (i, vi) in v.iter().enumerate() {
        let shifted = vi - lambda;
        if shifted <= 0.0 {
            active_lo.push(i);
        } else if shifted >= cap {
            active_hi.push(i);
        }
        values.push(shifted.clamp(0.0, cap));
    }
    Ok(ProjectionResult {
        w: WeightVector::from_parts_unchecked(values, cap),
        multiplier: lambda,
        active_lo,
        active_hi,
    })
}

/// `argmin_{w} <g, w> + |w - w_ref|^2 / (2 step)` over the capped simplex.
pub fn prox_linear_step(
    g: &[f64],
    w_ref: &WeightVector,
    step: f64,
    cap: f64,
) -> Result<WeightVector> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("prox step must be > 0, got {step}")));
    }
    if g.len() != w_ref.len() {
        return Err(Error::DimensionMismatch {
            expected: w_ref.len(),
            got: g.len(),
        });
    }
    let v: Vec<f64> = w_ref
        .values()
        .iter()
        .zip(g)
        .map(|(w, gi)| w - step * gi)
        .collect();
    Ok(project(&v, cap)?.w)
}
