//! Hypergradient of the validation loss with respect to the node weights.
//!
//! The approximate route solves the weighted training problem and the
//! Hessian-inverse quadratic program with Local-SVRG and contracts the result
//! with the node gradients. The dense route solves the training problem by
//! Newton's method and inverts the weighted Hessian explicitly; it serves as
//! the reference for small dimensions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    check_k, empirical_grad, empirical_hessian, empirical_loss, FederatedDataset, LossConstants,
    LossModel, ParamVector, QuadraticMoments, WeightVector,
};
use crate::network::Network;
use crate::svrg::{local_svrg_solve, FiniteSum, SvrgConfig};
use crate::vecops;

/// Largest dimension the dense oracle will materialize Hessians for.
pub const DENSE_DIM_LIMIT: usize = 200;
/// Condition number above which the weighted Hessian counts as singular.
pub const MAX_CONDITION: f64 = 1e12;

fn moments_of(model: &dyn LossModel, fed: &FederatedDataset) -> Option<Vec<QuadraticMoments>> {
    fed.nodes()
        .iter()
        .map(|n| model.quadratic_moments(n))
        .collect()
}

fn mat_vec_minus(m: &QuadraticMoments, x: &[f64], rhs: &[f64]) -> Vec<f64> {
    let hx = &m.hessian * DVector::from_column_slice(x);
    hx.iter().zip(rhs).map(|(a, b)| a - b).collect()
}

/// The weighted training problem: components are per-sample losses.
pub struct InnerInstance<'a> {
    model: &'a dyn LossModel,
    fed: &'a FederatedDataset,
    constants: LossConstants,
    moments: Option<Vec<QuadraticMoments>>,
}

pub fn inner_instance<'a>(
    model: &'a dyn LossModel,
    fed: &'a FederatedDataset,
) -> Result<InnerInstance<'a>> {
    Ok(InnerInstance {
        model,
        fed,
        constants: model.constants(fed)?,
        moments: moments_of(model, fed),
    })
}

impl FiniteSum for InnerInstance<'_> {
    fn dim(&self) -> usize {
        self.fed.dim()
    }

    fn num_nodes(&self) -> usize {
        self.fed.num_nodes()
    }

    fn node_len(&self, k: usize) -> usize {
        self.fed.node(k).len()
    }

    fn add_component_grad(&self, k: usize, i: usize, x: &[f64], scale: f64, out: &mut [f64]) {
        self.model
            .accumulate_grad(x, &self.fed.node(k).samples()[i], scale, out);
    }

    fn node_grad(&self, k: usize, x: &[f64]) -> Vec<f64> {
        match &self.moments {
            Some(m) => mat_vec_minus(&m[k], x, &m[k].linear),
            None => empirical_grad(self.model, self.fed.node(k), x)
                .expect("dimension checked at construction")
                .into_inner(),
        }
    }

    fn strong_convexity(&self) -> f64 {
        self.constants.mu
    }

    fn smoothness(&self) -> f64 {
        self.constants.l1
    }
}

/// The Hessian-inverse quadratic program with components
/// `0.5 h' hess l(theta; z) h - h' g0`.
pub struct QpInstance<'a> {
    model: &'a dyn LossModel,
    fed: &'a FederatedDataset,
    theta: Vec<f64>,
    g0: Vec<f64>,
    constants: LossConstants,
    moments: Option<Vec<QuadraticMoments>>,
}

pub fn qp_instance<'a>(
    model: &'a dyn LossModel,
    fed: &'a FederatedDataset,
    theta: &[f64],
    g0: &[f64],
) -> Result<QpInstance<'a>> {
    let d = fed.dim();
    for len in [theta.len(), g0.len()] {
        if len != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: len,
            });
        }
    }
    Ok(QpInstance {
        model,
        fed,
        theta: theta.to_vec(),
        g0: g0.to_vec(),
        constants: model.constants(fed)?,
        moments: moments_of(model, fed),
    })
}

impl QpInstance<'_> {
    /// `sum_k w_k hess L_k(theta) h - g0`
    pub fn residual(&self, w: &WeightVector, h: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; h.len()];
        for (k, wk) in w.values().iter().enumerate() {
            let g = self.node_grad(k, h);
            vecops::axpy(*wk, &g, &mut r);
        }
        r
    }
}

impl FiniteSum for QpInstance<'_> {
    fn dim(&self) -> usize {
        self.fed.dim()
    }

    fn num_nodes(&self) -> usize {
        self.fed.num_nodes()
    }

    fn node_len(&self, k: usize) -> usize {
        self.fed.node(k).len()
    }

    fn add_component_grad(&self, k: usize, i: usize, h: &[f64], scale: f64, out: &mut [f64]) {
        let z = &self.fed.node(k).samples()[i];
        self.model.accumulate_hvp(&self.theta, z, h, scale, out);
        vecops::axpy(-scale, &self.g0, out);
    }

    fn node_grad(&self, k: usize, h: &[f64]) -> Vec<f64> {
        match &self.moments {
            Some(m) => mat_vec_minus(&m[k], h, &self.g0),
            None => {
                let mut out = vec![0.0; h.len()];
                let node = self.fed.node(k);
                let scale = 1.0 / node.len() as f64;
                for z in node.samples() {
                    self.model
                        .accumulate_hvp(&self.theta, z, h, scale, &mut out);
                }
                vecops::axpy(-1.0, &self.g0, &mut out);
                out
            }
        }
    }

    fn strong_convexity(&self) -> f64 {
        self.constants.mu
    }

    fn smoothness(&self) -> f64 {
        self.constants.l1
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HypergradResult {
    /// Approximate `dF/dw_k` for each training node.
    pub grad: Vec<f64>,
    /// Approximate inner solution.
    pub theta: ParamVector,
    /// Approximate QP solution.
    pub h: ParamVector,
    /// Validation loss at `theta`.
    pub validation_loss: f64,
    /// Validation gradient at `theta`.
    pub validation_grad: Vec<f64>,
    /// Node training gradients at `theta`.
    pub node_grads: Vec<Vec<f64>>,
    /// `|sum_k w_k grad L_k(theta)|`
    pub inner_residual: f64,
    /// `|H(theta) h - grad L_0(theta)|`
    pub qp_residual: f64,
}

/// Starting points for the two Local-SVRG solves; zero when absent.
#[derive(Clone, Debug, Default)]
pub struct WarmStart {
    pub theta: Option<Vec<f64>>,
    pub h: Option<Vec<f64>>,
}

pub fn approx_hypergrad(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    w: &WeightVector,
    cfg_inner: &SvrgConfig,
    cfg_qp: &SvrgConfig,
    net: &mut Network,
) -> Result<HypergradResult> {
    approx_hypergrad_from(model, fed, w, cfg_inner, cfg_qp, net, &WarmStart::default())
}

pub fn approx_hypergrad_from(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    w: &WeightVector,
    cfg_inner: &SvrgConfig,
    cfg_qp: &SvrgConfig,
    net: &mut Network,
    warm: &WarmStart,
) -> Result<HypergradResult> {
    check_k(fed, w)?;
    let d = fed.dim();
    let k_nodes = fed.num_nodes();
    let vector_round = (k_nodes * d) as u64;
    let zeros = vec![0.0; d];

    let inner = inner_instance(model, fed)?;
    let theta = local_svrg_solve(
        &inner,
        w,
        warm.theta.as_deref().unwrap_or(&zeros),
        cfg_inner,
        net,
    )?;
    // Center broadcasts theta.
    net.record_round(vector_round);

    let g0 = empirical_grad(model, fed.validation(), &theta)?.into_inner();
    net.record_ops(fed.validation().len() as u64);
    net.record_round(vector_round);

    let qp = qp_instance(model, fed, &theta, &g0)?;
    let h = local_svrg_solve(&qp, w, warm.h.as_deref().unwrap_or(&zeros), cfg_qp, net)?;
    net.record_round(vector_round);

    let node_grads: Vec<Vec<f64>> = (0..k_nodes).map(|k| inner.node_grad(k, &theta)).collect();
    net.record_ops(fed.nodes().iter().map(|n| n.len() as u64).sum());
    net.record_round(vector_round);

    let grad: Vec<f64> = node_grads.iter().map(|gk| -vecops::dot(gk, &h)).collect();

    let mut weighted = vec![0.0; d];
    for (gk, wk) in node_grads.iter().zip(w.values()) {
        vecops::axpy(*wk, gk, &mut weighted);
    }
    let inner_residual = vecops::norm(&weighted);
    let qp_residual = vecops::norm(&qp.residual(w, &h));
    let validation_loss = empirical_loss(model, fed.validation(), &theta)?;

    Ok(HypergradResult {
        grad,
        theta,
        h,
        validation_loss,
        validation_grad: g0,
        node_grads,
        inner_residual,
        qp_residual,
    })
}

fn weighted_objective_raw(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    weights: &[f64],
    theta: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for (node, wk) in fed.nodes().iter().zip(weights) {
        total += wk * empirical_loss(model, node, theta)?;
    }
    Ok(total)
}

fn weighted_grad_raw(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    weights: &[f64],
    theta: &[f64],
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; theta.len()];
    for (node, wk) in fed.nodes().iter().zip(weights) {
        vecops::axpy(*wk, &empirical_grad(model, node, theta)?, &mut g);
    }
    Ok(g)
}

fn weighted_hessian_raw(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    weights: &[f64],
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    let d = theta.len();
    let mut h = DMatrix::zeros(d, d);
    for (node, wk) in fed.nodes().iter().zip(weights) {
        if *wk != 0.0 {
            h += empirical_hessian(model, node, theta)? * *wk;
        }
    }
    Ok(h)
}

/// Solves `H x = b` for a symmetric `H`, refusing ill-conditioned systems.
fn solve_spd(h: &DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let eig = SymmetricEigen::new(h.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(Error::Singular { condition });
    }
    let rhs = DVector::from_column_slice(b);
    let sol = match h.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => h.clone().lu().solve(&rhs).ok_or(Error::Singular {
            condition: f64::INFINITY,
        })?,
    };
    Ok(sol.iter().copied().collect())
}

/// Minimizer of `sum_k weights_k L_k` by damped Newton steps. Weights need
/// not lie on the simplex, only keep the weighted Hessian positive definite.
pub fn solve_inner_dense(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    weights: &[f64],
) -> Result<ParamVector> {
    let d = fed.dim();
    if weights.len() != fed.num_nodes() {
        return Err(Error::DimensionMismatch {
            expected: fed.num_nodes(),
            got: weights.len(),
        });
    }
    if d > DENSE_DIM_LIMIT {
        return Err(Error::invalid(format!(
            "dense solve needs d <= {DENSE_DIM_LIMIT}, got {d}"
        )));
    }
    let mut theta = vec![0.0; d];
    let mut obj = weighted_objective_raw(model, fed, weights, &theta)?;
    for _ in 0..100 {
        let g = weighted_grad_raw(model, fed, weights, &theta)?;
        if vecops::norm(&g) <= 1e-15 {
            break;
        }
        let h = weighted_hessian_raw(model, fed, weights, &theta)?;
        let step = solve_spd(&h, &g)?;
        let slope = vecops::dot(&g, &step);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let trial: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let trial_obj = weighted_objective_raw(model, fed, weights, &trial)?;
            // Objective differences drown in rounding near the optimum; a full
            // Newton step is then always taken.
            if trial_obj <= obj - 1e-4 * t * slope
                || (t == 1.0 && trial_obj <= obj + 1e-14 * obj.abs().max(1.0))
            {
                theta = trial;
                obj = trial_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || t * vecops::norm(&step) <= 1e-16 * (1.0 + vecops::norm(&theta)) {
            break;
        }
    }
    ParamVector::new(theta)
}

/// Validation loss at the exact inner solution for raw weights.
pub fn outer_value_dense(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    weights: &[f64],
) -> Result<f64> {
    let theta = solve_inner_dense(model, fed, weights)?;
    empirical_loss(model, fed.validation(), &theta)
}

/// Exact hypergradient through the implicit-function formula with a dense
/// Hessian inverse.
pub fn dense_hypergrad_oracle(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    w: &WeightVector,
) -> Result<Vec<f64>> {
    check_k(fed, w)?;
    let theta = solve_inner_dense(model, fed, w.values())?;
    let h = weighted_hessian_raw(model, fed, w.values(), &theta)?;
    let g0 = empirical_grad(model, fed.validation(), &theta)?;
    let v = solve_spd(&h, &g0)?;
    fed.nodes()
        .iter()
        .map(|node| Ok(-vecops::dot(&empirical_grad(model, node, &theta)?, &v)))
        .collect()
}

/// Central difference of the exact outer value along `(e_i - e_j)/sqrt 2`.
pub fn tangent_fd(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    w: &WeightVector,
    i: usize,
    j: usize,
    eps: f64,
) -> Result<f64> {
    let step = eps / 2f64.sqrt();
    let mut plus = w.values().to_vec();
    let mut minus = w.values().to_vec();
    plus[i] += step;
    plus[j] -= step;
    minus[i] -= step;
    minus[j] += step;
    let fp = outer_value_dense(model, fed, &plus)?;
    let fm = outer_value_dense(model, fed, &minus)?;
    Ok((fp - fm) / (2.0 * eps))
}

/// Lipschitz constant of the outer gradient.
pub fn lipschitz_lf(l0: f64, l1: f64, l2: f64, mu: f64, k: usize) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::invalid(format!("mu must be > 0, got {mu}")));
    }
    if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 || k == 0 {
        return Err(Error::invalid("l0, l1, l2 must be >= 0 and K >= 1"));
    }
    let kf = k as f64;
    Ok(
        (2.0 * l0 * l1 / mu + l2 * l0 * l0 / (mu * mu)) * (kf.sqrt() * l0 / mu)
            + kf * l1 * l0 * l0 / (mu * mu),
    )
}
