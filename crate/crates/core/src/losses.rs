//! Concrete loss families with computable smoothness constants.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{
    empirical_grad, FederatedDataset, LossConstants, LossModel, NodeDataset, QuadraticMoments,
    SamplePoint,
};
use crate::vecops::{axpy, dot, norm};

/// Above this dimension the strong-convexity modulus falls back to the ridge.
pub const EIGEN_DIM_LIMIT: usize = 200;

pub const DEFAULT_RIDGE: f64 = 1e-3;

/// `0.5 (x'theta - y)^2 + (ridge / 2) |theta|^2`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticRegressionLoss {
    ridge: f64,
}

impl QuadraticRegressionLoss {
    pub fn new(ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::invalid(format!("ridge must be >= 0, got {ridge}")));
        }
        Ok(Self { ridge })
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }
}

impl Default for QuadraticRegressionLoss {
    fn default() -> Self {
        Self {
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl LossModel for QuadraticRegressionLoss {
    fn sample_loss(&self, theta: &[f64], z: &SamplePoint) -> f64 {
        let r = dot(&z.features, theta) - z.target;
        0.5 * r * r + 0.5 * self.ridge * dot(theta, theta)
    }

    fn accumulate_grad(&self, theta: &[f64], z: &SamplePoint, scale: f64, out: &mut [f64]) {
        let r = dot(&z.features, theta) - z.target;
        axpy(scale * r, &z.features, out);
        if self.ridge != 0.0 {
            axpy(scale * self.ridge, theta, out);
        }
    }

    fn accumulate_hvp(
        &self,
        _theta: &[f64],
        z: &SamplePoint,
        v: &[f64],
        scale: f64,
        out: &mut [f64],
    ) {
        let xv = dot(&z.features, v);
        axpy(scale * xv, &z.features, out);
        if self.ridge != 0.0 {
            axpy(scale * self.ridge, v, out);
        }
    }

    fn constants(&self, data: &FederatedDataset) -> Result<LossConstants> {
        quad_constants(data, self.ridge)
    }

    fn quadratic_moments(&self, data: &NodeDataset) -> Option<QuadraticMoments> {
        let d = data.dim();
        let n = data.len() as f64;
        let mut hessian = DMatrix::<f64>::zeros(d, d);
        let mut linear = vec![0.0; d];
        let mut offset = 0.0;
        for z in data.samples() {
            let x = &z.features;
            for i in 0..d {
                for j in 0..d {
                    hessian[(i, j)] += x[i] * x[j] / n;
                }
            }
            axpy(z.target / n, x, &mut linear);
            offset += 0.5 * z.target * z.target / n;
        }
        for i in 0..d {
            hessian[(i, i)] += self.ridge;
        }
        Some(QuadraticMoments {
            hessian,
            linear,
            offset,
        })
    }
}

/// `log(1 + exp(-y x'theta)) + (reg / 2) |theta|^2` with `y` in `{-1, +1}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizedLogisticLoss {
    reg: f64,
}

impl RegularizedLogisticLoss {
    pub fn new(reg: f64) -> Result<Self> {
        if !(reg > 0.0 && reg.is_finite()) {
            return Err(Error::invalid(format!(
                "logistic regularization must be > 0, got {reg}"
            )));
        }
        Ok(Self { reg })
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LossModel for RegularizedLogisticLoss {
    fn sample_loss(&self, theta: &[f64], z: &SamplePoint) -> f64 {
        let margin = z.target * dot(&z.features, theta);
        softplus(-margin) + 0.5 * self.reg * dot(theta, theta)
    }

    fn accumulate_grad(&self, theta: &[f64], z: &SamplePoint, scale: f64, out: &mut [f64]) {
        let margin = z.target * dot(&z.features, theta);
        let coef = -z.target * sigmoid(-margin);
        axpy(scale * coef, &z.features, out);
        axpy(scale * self.reg, theta, out);
    }

    fn accumulate_hvp(
        &self,
        theta: &[f64],
        z: &SamplePoint,
        v: &[f64],
        scale: f64,
        out: &mut [f64],
    ) {
        let s = sigmoid(dot(&z.features, theta));
        let curv = s * (1.0 - s);
        axpy(scale * curv * dot(&z.features, v), &z.features, out);
        axpy(scale * self.reg, v, out);
    }

    fn constants(&self, data: &FederatedDataset) -> Result<LossConstants> {
        logistic_constants(data, self.reg)
    }

    fn accuracy(&self, theta: &[f64], data: &NodeDataset) -> Option<f64> {
        let hits = data
            .samples()
            .iter()
            .filter(|z| {
                let score = dot(&z.features, theta);
                let pred = if score >= 0.0 { 1.0 } else { -1.0 };
                pred == z.target
            })
            .count();
        Some(hits as f64 / data.len() as f64)
    }
}

fn max_feature_norm(data: &FederatedDataset) -> f64 {
    data.all_samples()
        .map(|z| norm(&z.features))
        .fold(0.0, f64::max)
}

pub fn quad_constants(data: &FederatedDataset, ridge: f64) -> Result<LossConstants> {
    quad_constants_with_limit(data, ridge, EIGEN_DIM_LIMIT)
}

/// As [`quad_constants`], with an explicit dimension above which the
/// eigenvalue bound is skipped.
pub fn quad_constants_with_limit(
    data: &FederatedDataset,
    ridge: f64,
    eigen_dim_limit: usize,
) -> Result<LossConstants> {
    if data.nodes().iter().any(|n| n.is_empty()) {
        return Err(Error::invalid("empty node dataset"));
    }
    let r = max_feature_norm(data);
    let d = data.dim();
    let mut mu = ridge;
    if d <= eigen_dim_limit {
        let unregularized = QuadraticRegressionLoss { ridge: 0.0 };
        let min_eig = data
            .nodes()
            .iter()
            .map(|node| {
                let m = unregularized.quadratic_moments(node).expect("quadratic");
                SymmetricEigen::new(m.hessian).eigenvalues.min()
            })
            .fold(f64::INFINITY, f64::min);
        // Rounding can push a zero eigenvalue slightly negative.
        mu += min_eig.max(0.0);
    }
    Ok(LossConstants {
        l1: r * r + ridge,
        l2: 0.0,
        mu,
    })
}

pub fn logistic_constants(data: &FederatedDataset, reg: f64) -> Result<LossConstants> {
    if !(reg > 0.0) {
        return Err(Error::invalid(format!(
            "logistic regularization must be > 0, got {reg}"
        )));
    }
    let r = max_feature_norm(data);
    Ok(LossConstants {
        l1: 0.25 * r * r + reg,
        l2: r.powi(3) / (6.0 * 3f64.sqrt()),
        mu: reg,
    })
}

/// Estimate of the Lipschitz constant of the node losses: the largest
/// gradient norm of any node loss (validation included) observed at the
/// given parameter points.
pub fn estimate_l0(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    trajectory: &[&[f64]],
) -> Result<f64> {
    let mut best = 0.0f64;
    for theta in trajectory {
        best = best.max(empirical_grad(model, fed.validation(), theta)?.norm());
        for node in fed.nodes() {
            best = best.max(empirical_grad(model, node, theta)?.norm());
        }
    }
    Ok(best)
}
