//! Baseline trainers and the measurable quantities of the weighting problem:
//! the heterogeneity distance `G`, distance to the optimal weight set, the
//! error-bound constant and the generalization gap.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hypergrad::inner_instance;
use crate::model::{
    check_cap, empirical_grad, empirical_loss, FederatedDataset, LossModel, NodeDataset,
    ParamVector, WeightVector,
};
use crate::network::{Network, NodeRng};
use crate::simplex::project;
use crate::svrg::{local_svrg_solve, SvrgConfig};
use crate::vecops;

/// Population of a linear-Gaussian regression family: node `k` has
/// `y = x'theta_k + eps_k` with `E[xx'] = sigma` shared by every node.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTruth {
    pub sigma: DMatrix<f64>,
    /// `theta_k` for the training nodes.
    pub node_optima: Vec<Vec<f64>>,
    pub validation_optimum: Vec<f64>,
    /// `E[eps_k^2]` for the training nodes.
    pub node_noise: Vec<f64>,
    pub validation_noise: f64,
}

impl QuadraticTruth {
    fn quad(&self, theta: &[f64], center: &[f64], noise: f64) -> f64 {
        let diff =
            DVector::from_iterator(theta.len(), theta.iter().zip(center).map(|(a, b)| a - b));
        0.5 * diff.dot(&(&self.sigma * &diff)) + 0.5 * noise
    }

    fn quad_grad(&self, theta: &[f64], center: &[f64]) -> Vec<f64> {
        let diff =
            DVector::from_iterator(theta.len(), theta.iter().zip(center).map(|(a, b)| a - b));
        (&self.sigma * diff).iter().copied().collect()
    }

    /// Population validation loss.
    pub fn validation_loss(&self, theta: &[f64]) -> f64 {
        self.quad(theta, &self.validation_optimum, self.validation_noise)
    }

    /// Population loss of training node `k` (zero-based).
    pub fn node_loss(&self, k: usize, theta: &[f64]) -> f64 {
        self.quad(theta, &self.node_optima[k], self.node_noise[k])
    }

    /// Population inner solution `sum_k w_k theta_k`.
    pub fn theta_of(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.validation_optimum.len()];
        for (t, wk) in self.node_optima.iter().zip(w) {
            vecops::axpy(*wk, t, &mut out);
        }
        out
    }

    /// Population outer objective.
    pub fn outer_value(&self, w: &[f64]) -> f64 {
        self.validation_loss(&self.theta_of(w))
    }

    /// Gradient of the population outer objective in `w`.
    pub fn outer_grad(&self, w: &[f64]) -> Vec<f64> {
        let g = self.quad_grad(&self.theta_of(w), &self.validation_optimum);
        self.node_optima
            .iter()
            .map(|t| vecops::dot(t, &g))
            .collect()
    }

    /// A minimizer of the population outer objective over the capped simplex,
    /// by projected gradient descent.
    pub fn optimal_weights(&self, cap: f64) -> Result<WeightVector> {
        let k = self.node_optima.len();
        let d = self.validation_optimum.len();
        let m = DMatrix::from_fn(d, k, |i, j| self.node_optima[j][i]);
        let curvature = (m.transpose() * &self.sigma * &m).norm();
        let mut w = WeightVector::uniform(k, 1.0 / k as f64)?;
        w = project(w.values(), cap)?.w;
        if curvature == 0.0 {
            return Ok(w);
        }
        let step = 1.0 / curvature;
        for _ in 0..20_000 {
            let next =
                crate::simplex::prox_linear_step(&self.outer_grad(w.values()), &w, step, cap)?;
            let moved = vecops::dist(next.values(), w.values());
            w = next;
            if moved < 1e-15 {
                break;
            }
        }
        Ok(w)
    }
}

#[derive(Clone, Debug)]
pub enum Population {
    Quadratic(QuadraticTruth),
    /// Large held-out sample from the validation distribution.
    MonteCarlo(NodeDataset),
}

/// What is known about the data-generating process of a synthetic task.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Zero-based training nodes whose distribution equals the validation one.
    pub identical: Vec<usize>,
    /// Minimizer of the population validation loss.
    pub theta_star: Vec<f64>,
    pub population: Population,
    /// Held-out sample from the validation distribution.
    pub test: NodeDataset,
}

/// Losses indexed by node, with index 0 the validation distribution and
/// `1..=K` the training nodes.
pub trait LossFamily: Sync {
    fn num_nodes(&self) -> usize;
    fn dim(&self) -> usize;
    fn loss(&self, k: usize, theta: &[f64]) -> f64;
    fn grad(&self, k: usize, theta: &[f64]) -> Vec<f64>;
}

impl LossFamily for QuadraticTruth {
    fn num_nodes(&self) -> usize {
        self.node_optima.len()
    }

    fn dim(&self) -> usize {
        self.validation_optimum.len()
    }

    fn loss(&self, k: usize, theta: &[f64]) -> f64 {
        if k == 0 {
            self.validation_loss(theta)
        } else {
            self.node_loss(k - 1, theta)
        }
    }

    fn grad(&self, k: usize, theta: &[f64]) -> Vec<f64> {
        let center = if k == 0 {
            &self.validation_optimum
        } else {
            &self.node_optima[k - 1]
        };
        self.quad_grad(theta, center)
    }
}

/// Empirical node losses of a federated dataset.
pub struct EmpiricalFamily<'a> {
    pub model: &'a dyn LossModel,
    pub fed: &'a FederatedDataset,
}

impl EmpiricalFamily<'_> {
    fn data(&self, k: usize) -> &NodeDataset {
        if k == 0 {
            self.fed.validation()
        } else {
            self.fed.node(k - 1)
        }
    }
}

impl LossFamily for EmpiricalFamily<'_> {
    fn num_nodes(&self) -> usize {
        self.fed.num_nodes()
    }

    fn dim(&self) -> usize {
        self.fed.dim()
    }

    fn loss(&self, k: usize, theta: &[f64]) -> f64 {
        empirical_loss(self.model, self.data(k), theta).expect("dimension checked")
    }

    fn grad(&self, k: usize, theta: &[f64]) -> Vec<f64> {
        empirical_grad(self.model, self.data(k), theta)
            .expect("dimension checked")
            .into_inner()
    }
}

/// Minimizes the validation loss alone with single-node SVRG.
pub fn local_train(
    model: &dyn LossModel,
    validation: &NodeDataset,
    cfg: &SvrgConfig,
    net: &mut Network,
) -> Result<ParamVector> {
    let node = NodeDataset::new(1, validation.samples().to_vec())?;
    let fed = FederatedDataset::new(vec![node], validation.clone())?;
    let inst = inner_instance(model, &fed)?;
    let w = WeightVector::vertex(1, 0)?;
    local_svrg_solve(&inst, &w, &vec![0.0; fed.dim()], cfg, net)
}

/// One Local-SVRG solve of the weighted training problem at a fixed `w`.
pub fn fedavg_train(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    w: &WeightVector,
    cfg: &SvrgConfig,
    net: &mut Network,
) -> Result<ParamVector> {
    let inst = inner_instance(model, fed)?;
    local_svrg_solve(&inst, w, &vec![0.0; fed.dim()], cfg, net)
}

fn sq_distance_to_validation(family: &dyn LossFamily, theta: &[f64]) -> (f64, Vec<f64>) {
    let l0 = family.loss(0, theta);
    let g0 = family.grad(0, theta);
    let mut value = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for k in 1..=family.num_nodes() {
        let diff = l0 - family.loss(k, theta);
        value += diff * diff;
        let gk = family.grad(k, theta);
        for ((g, a), b) in grad.iter_mut().zip(&g0).zip(&gk) {
            *g += 2.0 * diff * (a - b);
        }
    }
    (value, grad)
}

fn project_ball(theta: &mut [f64], radius: f64) {
    let n = vecops::norm(theta);
    if n > radius {
        theta.iter_mut().for_each(|t| *t *= radius / n);
    }
}

fn random_in_ball(rng: &mut NodeRng, d: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        if vecops::norm(&v) <= 1.0 {
            return v.into_iter().map(|x| x * radius).collect();
        }
    }
}

const ASCENT_ITERS: usize = 500;

/// `sqrt(max_{|theta| <= radius} sum_k (L_0 - L_k)^2)` by projected gradient
/// ascent from `starts` points (the origin and random points of the ball).
pub fn metric_g(family: &dyn LossFamily, radius: f64, starts: usize, seed: u64) -> Result<f64> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("radius must be > 0, got {radius}")));
    }
    let d = family.dim();
    let mut rng = NodeRng::new(seed, 0, 0x6d65_7472_6963);
    let mut best = 0.0f64;
    for start in 0..starts.max(1) {
        let mut theta = if start == 0 {
            vec![0.0; d]
        } else {
            random_in_ball(&mut rng, d, radius)
        };
        let (mut value, mut grad) = sq_distance_to_validation(family, &theta);
        let mut step = radius / (1.0 + vecops::norm(&grad));
        for _ in 0..ASCENT_ITERS {
            let mut trial = theta.clone();
            vecops::axpy(step, &grad, &mut trial);
            project_ball(&mut trial, radius);
            let (tv, tg) = sq_distance_to_validation(family, &trial);
            if tv > value {
                let moved = vecops::dist(&trial, &theta);
                theta = trial;
                value = tv;
                grad = tg;
                step *= 1.5;
                if moved <= 1e-13 * radius {
                    break;
                }
            } else {
                step *= 0.5;
                if step <= 1e-14 * radius {
                    break;
                }
            }
        }
        best = best.max(value);
    }
    Ok(best.sqrt())
}

fn identical_projection(w: &WeightVector, identical: &[usize], cap: f64) -> Result<Vec<f64>> {
    check_cap(identical.len(), cap)?;
    let sub: Vec<f64> = identical.iter().map(|&k| w.values()[k]).collect();
    let p = project(&sub, cap)?.w;
    let mut out = vec![0.0; w.len()];
    for (&k, v) in identical.iter().zip(p.values()) {
        out[k] = *v;
    }
    Ok(out)
}

/// Distance from `w` to the weights supported on the identical nodes.
pub fn dist_to_wstar(w: &WeightVector, truth: &GroundTruth, cap: f64) -> Result<f64> {
    if let Some(&bad) = truth.identical.iter().find(|&&k| k >= w.len()) {
        return Err(Error::invalid(format!("identical node {bad} out of range")));
    }
    let nearest = identical_projection(w, &truth.identical, cap)?;
    Ok(vecops::dist(w.values(), &nearest))
}

/// `max Dist(w, W*) / (F(w) - F*)^(1/r)` over samples whose gap is at least
/// `1e-12`.
pub fn verify_error_bound(
    samples: &[(WeightVector, f64)],
    f_star: f64,
    truth: &GroundTruth,
    r: f64,
) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::invalid(format!("exponent r must be > 0, got {r}")));
    }
    let mut best: Option<f64> = None;
    for (w, f) in samples {
        let gap = f - f_star;
        if gap < -1e-9 {
            return Err(Error::invalid(format!(
                "sample value {f} lies below the optimal value {f_star}"
            )));
        }
        if gap < 1e-12 {
            continue;
        }
        let ratio = dist_to_wstar(w, truth, w.cap())? / gap.powf(1.0 / r);
        best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
    }
    best.ok_or_else(|| Error::invalid("every sample has a vanishing optimality gap"))
}

/// Weights approaching the optimal set: sample `i` of `n` sits at fraction
/// `((i + 1) / n)^power` of the way from its nearest optimal point to a
/// random feasible weight.
pub fn radial_samples(
    truth: &GroundTruth,
    k: usize,
    cap: f64,
    n: usize,
    power: f64,
    seed: u64,
) -> Result<Vec<WeightVector>> {
    check_cap(k, cap)?;
    let mut rng = NodeRng::new(seed, 1, 0x7261_6469_616c);
    (0..n)
        .map(|i| {
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
            let far = project(&raw, cap)?.w;
            let anchor = identical_projection(&far, &truth.identical, cap)?;
            let t = ((i + 1) as f64 / n as f64).powf(power);
            let values = anchor
                .iter()
                .zip(far.values())
                .map(|(a, f)| (a + t * (f - a)).clamp(0.0, cap))
                .collect();
            Ok(WeightVector::from_parts_unchecked(values, cap))
        })
        .collect()
}

/// `L_0(theta) - L_0(theta*)` with its Monte Carlo standard error (zero for
/// closed-form truths).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapEstimate {
    pub gap: f64,
    pub std_error: f64,
    pub samples: usize,
}

pub fn generalization_gap(
    model: &dyn LossModel,
    truth: &GroundTruth,
    theta: &[f64],
) -> Result<GapEstimate> {
    if theta.len() != truth.theta_star.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.theta_star.len(),
            got: theta.len(),
        });
    }
    match &truth.population {
        Population::Quadratic(q) => Ok(GapEstimate {
            gap: q.validation_loss(theta) - q.validation_loss(&truth.theta_star),
            std_error: 0.0,
            samples: 0,
        }),
        Population::MonteCarlo(sample) => {
            let diffs: Vec<f64> = sample
                .samples()
                .iter()
                .map(|z| model.sample_loss(theta, z) - model.sample_loss(&truth.theta_star, z))
                .collect();
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = if diffs.len() > 1 {
                diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Ok(GapEstimate {
                gap: mean,
                std_error: (var / n).sqrt(),
                samples: diffs.len(),
            })
        }
    }
}
