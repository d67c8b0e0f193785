//! Domain types shared across the crate and the empirical loss evaluators.
//!
//! Node `0` always denotes the center, which holds the validation set; nodes
//! `1..=K` hold training sets. Evaluators check dimensions once at the API
//! boundary and then run unchecked over samples.

use std::ops::{Deref, DerefMut};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops;

/// Absolute tolerance on `sum(w) == 1`.
pub const SUM_TOL: f64 = 1e-9;
/// Slack allowed on the box constraints before a weight is rejected.
pub const CAP_TOL: f64 = 1e-12;

/// Dense parameter vector: model parameters or the quadratic-program variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if !vecops::all_finite(&entries) {
            return Err(Error::invalid("parameter vector has non-finite entries"));
        }
        Ok(Self(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub(crate) fn from_vec_unchecked(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        vecops::norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A point on the capped simplex `{w : sum w = 1, 0 <= w_k <= cap}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    values: Vec<f64>,
    cap: f64,
}

impl WeightVector {
    /// Validates and clamps `values` onto `[0, cap]`.
    pub fn new(values: Vec<f64>, cap: f64) -> Result<Self> {
        let k = values.len();
        check_cap(k, cap)?;
        if !vecops::all_finite(&values) {
            return Err(Error::invalid("weights must be finite"));
        }
        let mut values = values;
        for (i, v) in values.iter_mut().enumerate() {
            if *v < -CAP_TOL || *v > cap + CAP_TOL {
                return Err(Error::invalid(format!(
                    "weight {i} = {v} lies outside [0, {cap}]"
                )));
            }
            *v = v.clamp(0.0, cap);
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self { values, cap })
    }

    pub fn uniform(k: usize, cap: f64) -> Result<Self> {
        check_cap(k, cap)?;
        Ok(Self {
            values: vec![1.0 / k as f64; k],
            cap,
        })
    }

    /// The vertex `e_index`; requires `cap == 1`.
    pub fn vertex(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::invalid(format!(
                "vertex {index} out of range for K={k}"
            )));
        }
        let mut values = vec![0.0; k];
        values[index] = 1.0;
        Self::new(values, 1.0)
    }

    /// Bypasses validation. Callers guarantee feasibility.
    pub(crate) fn from_parts_unchecked(values: Vec<f64>, cap: f64) -> Self {
        Self { values, cap }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub(crate) fn check_cap(k: usize, cap: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid(
            "weight vector needs at least one coordinate",
        ));
    }
    if !cap.is_finite() || cap > 1.0 + CAP_TOL || cap * (k as f64) < 1.0 - 1e-12 {
        return Err(Error::EmptyFeasibleSet { k, cap });
    }
    Ok(())
}

/// One data point. Regression targets are reals, binary labels are `±1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub features: Vec<f64>,
    pub target: f64,
}

impl SamplePoint {
    pub fn new(features: Vec<f64>, target: f64) -> Self {
        Self { features, target }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDataset {
    node_id: usize,
    samples: Vec<SamplePoint>,
}

impl NodeDataset {
    pub fn new(node_id: usize, samples: Vec<SamplePoint>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid(format!("node {node_id} has no samples")))?;
        let d = first.features.len();
        for s in &samples {
            if s.features.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.features.len(),
                });
            }
        }
        Ok(Self { node_id, samples })
    }

    pub fn node_id(&self) -> usize {
        self.node_id
    }

    pub fn samples(&self) -> &[SamplePoint] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].features.len()
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: d,
            });
        }
        Ok(())
    }
}

/// `K` training nodes plus the center's validation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    nodes: Vec<NodeDataset>,
    validation: NodeDataset,
}

impl FederatedDataset {
    pub fn new(nodes: Vec<NodeDataset>, validation: NodeDataset) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::invalid(
                "federation needs at least one training node",
            ));
        }
        if validation.node_id() != 0 {
            return Err(Error::invalid("validation set must carry node id 0"));
        }
        let d = validation.dim();
        for (k, node) in nodes.iter().enumerate() {
            if node.node_id() != k + 1 {
                return Err(Error::invalid(format!(
                    "node at position {k} has id {}, expected {}",
                    node.node_id(),
                    k + 1
                )));
            }
            node.check_dim(d)?;
        }
        Ok(Self { nodes, validation })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn dim(&self) -> usize {
        self.validation.dim()
    }

    pub fn nodes(&self) -> &[NodeDataset] {
        &self.nodes
    }

    /// Training node `k`, zero-based (node id `k + 1`).
    pub fn node(&self, k: usize) -> &NodeDataset {
        &self.nodes[k]
    }

    pub fn validation(&self) -> &NodeDataset {
        &self.validation
    }

    /// Every sample, training and validation.
    pub fn all_samples(&self) -> impl Iterator<Item = &SamplePoint> {
        self.nodes
            .iter()
            .flat_map(|n| n.samples().iter())
            .chain(self.validation.samples())
    }
}

/// Smoothness and strong-convexity bounds of a loss family on a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConstants {
    /// Lipschitz constant of the gradient.
    pub l1: f64,
    /// Lipschitz constant of the Hessian.
    pub l2: f64,
    /// Strong convexity modulus.
    pub mu: f64,
}

/// Node-level second moments of a quadratic loss:
/// `L(theta) = 0.5 theta' A theta - c' theta + e`.
#[derive(Clone, Debug)]
pub struct QuadraticMoments {
    pub hessian: DMatrix<f64>,
    pub linear: Vec<f64>,
    pub offset: f64,
}

/// Per-sample loss with gradient and Hessian-vector product.
pub trait LossModel: Send + Sync {
    fn sample_loss(&self, theta: &[f64], z: &SamplePoint) -> f64;

    /// `out += scale * grad l(theta; z)`
    fn accumulate_grad(&self, theta: &[f64], z: &SamplePoint, scale: f64, out: &mut [f64]);

    /// `out += scale * hess l(theta; z) v`
    fn accumulate_hvp(
        &self,
        theta: &[f64],
        z: &SamplePoint,
        v: &[f64],
        scale: f64,
        out: &mut [f64],
    );

    fn constants(&self, data: &FederatedDataset) -> Result<LossConstants>;

    /// Closed-form node moments, when the loss is quadratic in `theta`.
    fn quadratic_moments(&self, _data: &NodeDataset) -> Option<QuadraticMoments> {
        None
    }

    /// Classification accuracy, for losses that define a decision rule.
    fn accuracy(&self, _theta: &[f64], _data: &NodeDataset) -> Option<f64> {
        None
    }

    fn sample_grad(&self, theta: &[f64], z: &SamplePoint) -> ParamVector {
        let mut out = vec![0.0; theta.len()];
        self.accumulate_grad(theta, z, 1.0, &mut out);
        ParamVector::from_vec_unchecked(out)
    }

    fn sample_hvp(&self, theta: &[f64], z: &SamplePoint, v: &[f64]) -> ParamVector {
        let mut out = vec![0.0; theta.len()];
        self.accumulate_hvp(theta, z, v, 1.0, &mut out);
        ParamVector::from_vec_unchecked(out)
    }
}

pub fn empirical_loss(model: &dyn LossModel, data: &NodeDataset, theta: &[f64]) -> Result<f64> {
    data.check_dim(theta.len())?;
    let n = data.len() as f64;
    Ok(data
        .samples()
        .iter()
        .map(|z| model.sample_loss(theta, z))
        .sum::<f64>()
        / n)
}

pub fn empirical_grad(
    model: &dyn LossModel,
    data: &NodeDataset,
    theta: &[f64],
) -> Result<ParamVector> {
    data.check_dim(theta.len())?;
    let mut out = vec![0.0; theta.len()];
    let scale = 1.0 / data.len() as f64;
    for z in data.samples() {
        model.accumulate_grad(theta, z, scale, &mut out);
    }
    Ok(ParamVector::from_vec_unchecked(out))
}

pub fn empirical_hvp(
    model: &dyn LossModel,
    data: &NodeDataset,
    theta: &[f64],
    v: &[f64],
) -> Result<ParamVector> {
    data.check_dim(theta.len())?;
    data.check_dim(v.len())?;
    let mut out = vec![0.0; theta.len()];
    let scale = 1.0 / data.len() as f64;
    for z in data.samples() {
        model.accumulate_hvp(theta, z, v, scale, &mut out);
    }
    Ok(ParamVector::from_vec_unchecked(out))
}

/// `sum_k w_k L_k(theta)` over the training nodes.
pub fn weighted_objective(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    w: &WeightVector,
    theta: &[f64],
) -> Result<f64> {
    check_k(fed, w)?;
    let mut total = 0.0;
    for (node, wk) in fed.nodes().iter().zip(w.values()) {
        total += wk * empirical_loss(model, node, theta)?;
    }
    Ok(total)
}

pub fn weighted_grad(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    w: &WeightVector,
    theta: &[f64],
) -> Result<ParamVector> {
    check_k(fed, w)?;
    let mut out = vec![0.0; theta.len()];
    for (node, wk) in fed.nodes().iter().zip(w.values()) {
        let g = empirical_grad(model, node, theta)?;
        vecops::axpy(*wk, &g, &mut out);
    }
    Ok(ParamVector::from_vec_unchecked(out))
}

/// Dense `(1/n) sum_i hess l(theta; z_i)`, assembled column by column from
/// Hessian-vector products.
pub fn empirical_hessian(
    model: &dyn LossModel,
    data: &NodeDataset,
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    let d = theta.len();
    data.check_dim(d)?;
    let mut h = DMatrix::zeros(d, d);
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        let col = empirical_hvp(model, data, theta, &e)?;
        h.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    // Symmetrize away rounding asymmetry.
    let ht = h.transpose();
    Ok((h + ht) * 0.5)
}

pub(crate) fn check_k(fed: &FederatedDataset, w: &WeightVector) -> Result<()> {
    if w.len() != fed.num_nodes() {
        return Err(Error::DimensionMismatch {
            expected: fed.num_nodes(),
            got: w.len(),
        });
    }
    Ok(())
}
