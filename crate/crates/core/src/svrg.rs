//! Local-SVRG for weighted distributed finite sums
//! `min_x sum_k w_k f_k(x)`, `f_k = (1/n_k) sum_i f_{k,i}`.
//!
//! Each node takes variance-reduced stochastic steps on its own components and
//! every `tau` steps all nodes replace their iterate by the weighted average.
//! The returned point is the exponentially weighted average of the virtual
//! iterates `x^(t) = sum_k w_k x_k^(t)` over `t = 0..=T`.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamVector, WeightVector};
use crate::network::{weighted_sum, Network, NodeState};
use crate::vecops;

/// Component-gradient access to a distributed finite sum.
pub trait FiniteSum: Sync {
    fn dim(&self) -> usize;

    fn num_nodes(&self) -> usize;

    /// `n_k`, zero-based node index.
    fn node_len(&self, k: usize) -> usize;

    /// `out += scale * grad f_{k,i}(x)`
    fn add_component_grad(&self, k: usize, i: usize, x: &[f64], scale: f64, out: &mut [f64]);

    /// `(1/n_k) sum_i grad f_{k,i}(x)`
    fn node_grad(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let n = self.node_len(k);
        let mut out = vec![0.0; x.len()];
        let scale = 1.0 / n as f64;
        for i in 0..n {
            self.add_component_grad(k, i, x, scale, &mut out);
        }
        out
    }

    fn strong_convexity(&self) -> f64;

    fn smoothness(&self) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvrgConfig {
    /// Learning rate.
    pub gamma: f64,
    /// Communication period.
    pub tau: usize,
    /// Probability of refreshing a node's reference point.
    pub q: f64,
    /// Iteration count.
    pub iters: usize,
}

impl SvrgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if self.tau == 0 {
            return Err(Error::invalid("communication period must be >= 1"));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::invalid(format!(
                "q must lie in (0, 1], got {}",
                self.q
            )));
        }
        Ok(())
    }

    /// Rounds one call charges: one per completed period plus the output
    /// aggregation.
    pub fn comm_rounds(&self) -> u64 {
        (self.iters / self.tau) as u64 + 1
    }
}

/// Largest learning rate covered by the Local-SVRG convergence guarantee.
pub fn gamma0(l1: f64, mu: f64, tau: usize, q: f64) -> Result<f64> {
    if !(l1 > 0.0) || !(mu > 0.0) {
        return Err(Error::invalid("gamma0 needs l1 > 0 and mu > 0"));
    }
    if tau == 0 || !(q > 0.0) {
        return Err(Error::invalid("gamma0 needs tau >= 1 and q > 0"));
    }
    let middle = if tau == 1 {
        f64::INFINITY
    } else {
        if q >= 1.0 {
            return Err(Error::invalid("gamma0 needs q < 1 when tau > 1"));
        }
        let t = (tau - 1) as f64;
        1.0 / (l1 * (5.0 * std::f64::consts::E * t * (6.0 * t + 8.0 + 16.0 / (1.0 - q))).sqrt())
    };
    Ok((3.0 / (80.0 * l1)).min(middle).min(q / (4.0 * mu)))
}

#[derive(Clone, Debug)]
pub struct SvrgOutput {
    /// Weighted average of the virtual iterates.
    pub solution: ParamVector,
    /// Final virtual iterate `x^(T)`.
    pub last: Vec<f64>,
    /// `x^(0), ..., x^(T)` when recording was requested.
    pub trajectory: Option<Vec<Vec<f64>>>,
}

/// Output weights `u_t / u_T = rho^(T - t)`; normalizing by `u_T` keeps them
/// bounded for long runs.
#[derive(Clone, Copy)]
struct Averaging {
    rho: f64,
    horizon: usize,
}

impl Averaging {
    fn coef(&self, t: usize) -> f64 {
        self.rho.powi((self.horizon - t) as i32)
    }
}

/// `out = grad f_{k,i}(x) - grad f_{k,i}(y) + ref_grad`, the variance-reduced
/// estimate of `grad f_k(x)` with `ref_grad = grad f_k(y)`.
pub fn svrg_estimate_into<F: FiniteSum + ?Sized>(
    inst: &F,
    k: usize,
    i: usize,
    x: &[f64],
    y: &[f64],
    ref_grad: &[f64],
    out: &mut [f64],
) {
    out.copy_from_slice(ref_grad);
    inst.add_component_grad(k, i, x, 1.0, out);
    inst.add_component_grad(k, i, y, -1.0, out);
}

struct NodeWorker {
    k: usize,
    state: NodeState,
    ref_grad: Vec<f64>,
    ref_stale: bool,
    /// `sum_t c_t x_k^(t)` over the unsynchronized steps.
    acc: Vec<f64>,
    history: Option<Vec<Vec<f64>>>,
    ops: u64,
    scratch: Vec<f64>,
}

impl NodeWorker {
    /// Steps `t0..t1`; the iterate after step `t1 - 1` is left un-averaged.
    fn run<F: FiniteSum + ?Sized>(
        &mut self,
        inst: &F,
        cfg: &SvrgConfig,
        avg: Averaging,
        t0: usize,
        t1: usize,
    ) -> Result<()> {
        let n = inst.node_len(self.k);
        for t in t0..t1 {
            if self.ref_stale {
                self.ref_grad = inst.node_grad(self.k, &self.state.y);
                self.ops += n as u64;
                self.ref_stale = false;
            }
            let i = self.state.rng.sample_index(n);
            let g = &mut self.scratch;
            svrg_estimate_into(
                inst,
                self.k,
                i,
                &self.state.x,
                &self.state.y,
                &self.ref_grad,
                g,
            );
            self.ops += 2;
            if self.state.rng.bernoulli(cfg.q) {
                self.state.y.copy_from_slice(&self.state.x);
                self.ref_stale = true;
            }
            vecops::axpy(-cfg.gamma, g, &mut self.state.x);
            if !vecops::all_finite(&self.state.x) {
                return Err(Error::Divergence { iteration: t + 1 });
            }
            let synced = (t + 1) % cfg.tau == 0;
            if !synced {
                vecops::axpy(avg.coef(t + 1), &self.state.x, &mut self.acc);
                if let Some(h) = self.history.as_mut() {
                    h.push(self.state.x.clone());
                }
            }
        }
        Ok(())
    }
}

/// Runs Local-SVRG and returns the averaged output.
pub fn local_svrg_solve<F: FiniteSum + ?Sized>(
    inst: &F,
    w: &WeightVector,
    x0: &[f64],
    cfg: &SvrgConfig,
    net: &mut Network,
) -> Result<ParamVector> {
    Ok(local_svrg_run(inst, w, x0, cfg, net, false)?.solution)
}

/// Runs Local-SVRG, optionally recording every virtual iterate.
pub fn local_svrg_run<F: FiniteSum + ?Sized>(
    inst: &F,
    w: &WeightVector,
    x0: &[f64],
    cfg: &SvrgConfig,
    net: &mut Network,
    record: bool,
) -> Result<SvrgOutput> {
    cfg.validate()?;
    let k_nodes = inst.num_nodes();
    let d = inst.dim();
    if w.len() != k_nodes {
        return Err(Error::DimensionMismatch {
            expected: k_nodes,
            got: w.len(),
        });
    }
    if x0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x0.len(),
        });
    }
    if !vecops::all_finite(x0) {
        return Err(Error::invalid("initial point has non-finite entries"));
    }
    let mu = inst.strong_convexity();
    if let Ok(g0) = gamma0(inst.smoothness(), mu, cfg.tau, cfg.q) {
        if cfg.gamma > g0 {
            warn!("learning rate {} exceeds gamma0 = {g0:.3e}", cfg.gamma);
        }
    }

    let big_t = cfg.iters;
    let averaging = Averaging {
        rho: 1.0 - (cfg.gamma * mu.max(0.0)).min(cfg.q / 4.0),
        horizon: big_t,
    };
    let coef = |t: usize| averaging.coef(t);
    let total_coef: f64 = (0..=big_t).map(coef).sum();

    let call = net.next_call_index();
    let seed = net.seed();
    let mut workers: Vec<NodeWorker> = (0..k_nodes)
        .map(|k| NodeWorker {
            k,
            state: NodeState::new(k + 1, x0, seed, call),
            ref_grad: Vec::new(),
            ref_stale: true,
            acc: vec![0.0; d],
            history: record.then(Vec::new),
            ops: 0,
            scratch: vec![0.0; d],
        })
        .collect();

    // Contributions of synchronized iterates, identical at every node.
    let mut synced_acc = vec![0.0; d];
    vecops::axpy(coef(0), x0, &mut synced_acc);
    let mut synced_history: Vec<(usize, Vec<f64>)> = Vec::new();
    if record {
        synced_history.push((0, x0.to_vec()));
    }
    let mut last = x0.to_vec();

    let mut t0 = 0;
    while t0 < big_t {
        let t1 = ((t0 / cfg.tau) + 1) * cfg.tau;
        let t1 = t1.min(big_t);
        net.install(|| {
            workers
                .par_iter_mut()
                .try_for_each(|wk| wk.run(inst, cfg, averaging, t0, t1))
        })?;
        if t1.is_multiple_of(cfg.tau) {
            let views: Vec<&[f64]> = workers.iter().map(|wk| wk.state.x.as_slice()).collect();
            let avg = crate::network::weighted_aggregate(net, &views, w)?.into_inner();
            for wk in workers.iter_mut() {
                wk.state.x.copy_from_slice(&avg);
            }
            vecops::axpy(coef(t1), &avg, &mut synced_acc);
            if record {
                synced_history.push((t1, avg.clone()));
            }
            last = avg;
        }
        t0 = t1;
    }

    if !big_t.is_multiple_of(cfg.tau) {
        let views: Vec<&[f64]> = workers.iter().map(|wk| wk.state.x.as_slice()).collect();
        last = weighted_sum(&views, w.values())?;
    }

    // Output aggregation: each node ships its weighted trajectory sum.
    let accs: Vec<&[f64]> = workers.iter().map(|wk| wk.acc.as_slice()).collect();
    let mut numer = weighted_sum(&accs, w.values())?;
    net.record_round((k_nodes * d) as u64);
    net.record_ops(workers.iter().map(|wk| wk.ops).sum());
    vecops::axpy(1.0, &synced_acc, &mut numer);
    for v in numer.iter_mut() {
        *v /= total_coef;
    }
    if !vecops::all_finite(&numer) {
        return Err(Error::Divergence { iteration: big_t });
    }

    let trajectory = record.then(|| {
        let mut traj = vec![Vec::new(); big_t + 1];
        for (t, x) in synced_history {
            traj[t] = x;
        }
        let mut cursor = vec![0usize; k_nodes];
        for (t, slot) in traj.iter_mut().enumerate() {
            if t % cfg.tau == 0 {
                continue;
            }
            let views: Vec<&[f64]> = workers
                .iter()
                .zip(cursor.iter_mut())
                .map(|(wk, c)| {
                    let v = wk.history.as_ref().expect("recorded")[*c].as_slice();
                    *c += 1;
                    v
                })
                .collect();
            *slot = weighted_sum(&views, w.values()).expect("consistent dimensions");
        }
        traj
    });

    Ok(SvrgOutput {
        solution: ParamVector::from_vec_unchecked(numer),
        last,
        trajectory,
    })
}
