//! Outer solvers over the capped simplex: the accelerated method for convex
//! outer objectives and the proximal-gradient method for the non-convex case,
//! both driven by approximate hypergradients.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergrad::{approx_hypergrad_from, lipschitz_lf, HypergradResult, WarmStart};
use crate::losses::estimate_l0;
use crate::model::{check_k, FederatedDataset, LossModel, WeightVector};
use crate::network::{Network, NodeRng, RoundLedger};
use crate::simplex::{project, prox_linear_step};
use crate::svrg::SvrgConfig;
use crate::vecops;

pub use crate::svrg::gamma0;

/// How `(gamma_s, T_s)` are chosen at outer iteration `s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    ConvexTau1,
    ConvexTauGt1,
    NonconvexTau1,
    NonconvexTauGt1,
    /// Same `(gamma, iters)` every iteration; the QP solve may use its own
    /// learning rate.
    Fixed {
        gamma: f64,
        iters: usize,
        qp_gamma: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterConfig {
    /// Outer iteration count `S`.
    pub iters: usize,
    /// Outer stepsize; `None` derives `1 / (3 l_F)` at the first iteration.
    pub eta: Option<f64>,
    /// Cap `b` of the simplex.
    pub cap: f64,
    pub tau: usize,
    pub q: f64,
    pub schedule: Schedule,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    /// Bound on `|theta(w)|`; estimated from the trajectory when absent.
    pub radius: Option<f64>,
    /// Start each Local-SVRG call from the previous solution.
    pub warm_start: bool,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            iters: 10,
            eta: None,
            cap: 1.0,
            tau: 1,
            q: 1.0 / 50.0,
            schedule: Schedule::ConvexTau1,
            a1: 1.0,
            a2: 1.0,
            a3: 1.0,
            radius: None,
            warm_start: false,
        }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::invalid("outer iteration count must be >= 1"));
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::invalid(format!("eta must be > 0, got {eta}")));
            }
        }
        if self.tau == 0 || !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::invalid("need tau >= 1 and q in (0, 1]"));
        }
        if !(self.a1 > 0.0 && self.a2 > 0.0 && self.a3 > 0.0) {
            return Err(Error::invalid("A1, A2, A3 must be positive"));
        }
        if let Schedule::Fixed {
            gamma,
            iters,
            qp_gamma,
        } = self.schedule
        {
            if !(gamma > 0.0) || iters == 0 || qp_gamma.is_some_and(|g| !(g > 0.0)) {
                return Err(Error::invalid(
                    "fixed schedule needs gamma > 0 and iters >= 1",
                ));
            }
        }
        Ok(())
    }
}

fn round_up_to_period(iters: usize, tau: usize) -> usize {
    iters.max(1).div_ceil(tau) * tau
}

fn ceil_iters(x: f64) -> usize {
    if x.is_finite() && x > 1.0 {
        x.ceil() as usize
    } else {
        1
    }
}

/// `(gamma_s, T_s)` for outer iteration `s`. `T_s` is at least one and is
/// rounded up to a whole number of communication periods.
pub fn inner_schedule(s: usize, cfg: &OuterConfig, gamma0: f64, mu: f64) -> (f64, usize) {
    let s1 = (s + 1) as f64;
    let tm1 = cfg.tau.saturating_sub(1) as f64;
    let spread = (cfg.a1 + cfg.a2 * tm1 + cfg.a3 * tm1 * tm1).sqrt();
    let (gamma, iters) = match cfg.schedule {
        Schedule::ConvexTau1 => (
            gamma0,
            ceil_iters((cfg.a1 * s1.powi(4) / gamma0).ln() / (gamma0 * mu)),
        ),
        Schedule::NonconvexTau1 => (
            gamma0,
            ceil_iters((cfg.a1 * s1.powi(2) / gamma0).ln() / (gamma0 * mu)),
        ),
        Schedule::ConvexTauGt1 | Schedule::NonconvexTauGt1 => {
            let growth = if matches!(cfg.schedule, Schedule::ConvexTauGt1) {
                s1 * s1
            } else {
                s1
            };
            let m = (1.0 / gamma0).max(growth * spread);
            (1.0 / m, ceil_iters(m * (m.powi(3)).ln() / mu))
        }
        Schedule::Fixed { gamma, iters, .. } => (gamma, iters),
    };
    (gamma, round_up_to_period(iters, cfg.tau))
}

/// `|w - Proj(w - eta g)| / eta`
pub fn stationarity(w: &WeightVector, g: &[f64], eta: f64, cap: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("eta must be > 0, got {eta}")));
    }
    let v: Vec<f64> = w
        .values()
        .iter()
        .zip(g)
        .map(|(wi, gi)| wi - eta * gi)
        .collect();
    let p = project(&v, cap)?.w;
    Ok(vecops::dist(w.values(), p.values()) / eta)
}

/// One outer iteration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OuterRecord {
    pub s: usize,
    /// Point the hypergradient was evaluated at.
    pub w_query: Vec<f64>,
    /// Iterate the solver reports after this step.
    pub w: Vec<f64>,
    pub grad: Vec<f64>,
    /// Validation loss at the approximate inner solution.
    pub f_estimate: f64,
    pub stationarity: f64,
    pub gamma: f64,
    pub inner_iters: usize,
    pub inner_residual: f64,
    pub qp_residual: f64,
    pub theta: Vec<f64>,
    /// Running gradient-norm estimate of `l0`.
    pub l0_estimate: f64,
    pub ledger: RoundLedger,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OuterTrace {
    pub records: Vec<OuterRecord>,
}

#[derive(Clone, Debug)]
pub struct OuterResult {
    /// The solver's output: `w_ag^(S)` for the accelerated method, `w^(s_bar)`
    /// for the proximal method.
    pub w: WeightVector,
    /// Final iterate.
    pub last: WeightVector,
    /// Sampled index for the proximal method.
    pub selected: Option<usize>,
    pub eta: f64,
    pub trace: OuterTrace,
}

struct Driver<'a> {
    model: &'a dyn LossModel,
    fed: &'a FederatedDataset,
    cfg: &'a OuterConfig,
    gamma0: f64,
    mu: f64,
    l1: f64,
    l2: f64,
    eta: Option<f64>,
    l0: f64,
    radius: f64,
    warm: WarmStart,
}

impl<'a> Driver<'a> {
    fn new(
        model: &'a dyn LossModel,
        fed: &'a FederatedDataset,
        w0: &WeightVector,
        cfg: &'a OuterConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_k(fed, w0)?;
        if (w0.cap() - cfg.cap).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "initial weight has cap {}, config has {}",
                w0.cap(),
                cfg.cap
            )));
        }
        let c = model.constants(fed)?;
        let gamma0 = match cfg.schedule {
            Schedule::Fixed { .. } => f64::NAN,
            _ => gamma0(c.l1, c.mu, cfg.tau, cfg.q)?,
        };
        Ok(Self {
            model,
            fed,
            cfg,
            gamma0,
            mu: c.mu,
            l1: c.l1,
            l2: c.l2,
            eta: cfg.eta,
            l0: 0.0,
            radius: cfg.radius.unwrap_or(0.0),
            warm: WarmStart::default(),
        })
    }

    fn svrg_configs(&self, s: usize) -> (SvrgConfig, SvrgConfig, f64, usize) {
        let (gamma, iters) = inner_schedule(s, self.cfg, self.gamma0, self.mu);
        let qp_gamma = match self.cfg.schedule {
            Schedule::Fixed {
                qp_gamma: Some(g), ..
            } => g,
            _ => gamma,
        };
        let make = |gamma| SvrgConfig {
            gamma,
            tau: self.cfg.tau,
            q: self.cfg.q,
            iters,
        };
        (make(gamma), make(qp_gamma), gamma, iters)
    }

    fn hypergrad(
        &mut self,
        s: usize,
        w: &WeightVector,
        net: &mut Network,
    ) -> Result<(HypergradResult, f64, usize)> {
        let (ci, cq, gamma, iters) = self.svrg_configs(s);
        let hr = approx_hypergrad_from(self.model, self.fed, w, &ci, &cq, net, &self.warm)?;
        if self.cfg.warm_start {
            self.warm = WarmStart {
                theta: Some(hr.theta.to_vec()),
                h: Some(hr.h.to_vec()),
            };
        }
        let zeros = vec![0.0; self.fed.dim()];
        self.l0 = self
            .l0
            .max(estimate_l0(self.model, self.fed, &[&zeros, &hr.theta])?);
        if self.cfg.radius.is_none() {
            self.radius = self.radius.max(hr.theta.norm());
        }
        if self.eta.is_none() {
            let lf = lipschitz_lf(self.l0, self.l1, self.l2, self.mu, self.fed.num_nodes())?;
            let eta = if lf > 0.0 { 1.0 / (3.0 * lf) } else { 1.0 };
            debug!("derived eta = {eta:.3e} from l_F = {lf:.3e}");
            self.eta = Some(eta);
        }
        Ok((hr, gamma, iters))
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        s: usize,
        w_query: &WeightVector,
        w_out: &WeightVector,
        hr: HypergradResult,
        gamma: f64,
        iters: usize,
        net: &Network,
    ) -> Result<OuterRecord> {
        let eta = self.eta.expect("set after first hypergradient");
        Ok(OuterRecord {
            s,
            w_query: w_query.values().to_vec(),
            w: w_out.values().to_vec(),
            stationarity: stationarity(w_query, &hr.grad, eta, self.cfg.cap)?,
            grad: hr.grad,
            f_estimate: hr.validation_loss,
            gamma,
            inner_iters: iters,
            inner_residual: hr.inner_residual,
            qp_residual: hr.qp_residual,
            theta: hr.theta.into_inner(),
            l0_estimate: self.l0,
            ledger: net.ledger(),
        })
    }
}

fn combine(a: &WeightVector, wa: f64, b: &WeightVector, wb: f64) -> WeightVector {
    let cap = a.cap();
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (wa * x + wb * y).clamp(0.0, cap))
        .collect();
    WeightVector::from_parts_unchecked(values, cap)
}

/// Called with each record as soon as its iteration completes.
pub type Observer<'a> = &'a mut dyn FnMut(&OuterRecord) -> Result<()>;

/// Accelerated outer method for convex outer objectives.
pub fn solve_convex(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    w0: &WeightVector,
    cfg: &OuterConfig,
    net: &mut Network,
) -> Result<OuterResult> {
    solve_convex_observed(model, fed, w0, cfg, net, &mut |_| Ok(()))
}

pub fn solve_convex_observed(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    w0: &WeightVector,
    cfg: &OuterConfig,
    net: &mut Network,
    observer: Observer<'_>,
) -> Result<OuterResult> {
    let mut drv = Driver::new(model, fed, w0, cfg)?;
    let mut w = w0.clone();
    let mut w_ag = w0.clone();
    let mut trace = OuterTrace::default();
    for s in 0..cfg.iters {
        let sf = s as f64;
        let w_md = combine(&w, 2.0 / (sf + 2.0), &w_ag, sf / (sf + 2.0));
        let (hr, gamma, iters) = drv.hypergrad(s, &w_md, net)?;
        let eta = drv.eta.expect("set");
        let w_next = prox_linear_step(&hr.grad, &w, eta * (sf + 1.0) / 4.0, cfg.cap)?;
        let w_ag_next = prox_linear_step(&hr.grad, &w_md, eta, cfg.cap)?;
        let rec = drv.record(s, &w_md, &w_ag_next, hr, gamma, iters, net)?;
        observer(&rec)?;
        trace.records.push(rec);
        w = w_next;
        w_ag = w_ag_next;
    }
    Ok(OuterResult {
        w: w_ag.clone(),
        last: w_ag,
        selected: None,
        eta: drv.eta.expect("set"),
        trace,
    })
}

/// Proximal-gradient outer method. The output is the iterate at a uniformly
/// sampled index; the full trace allows any other selection afterwards.
pub fn solve_nonconvex(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    w0: &WeightVector,
    cfg: &OuterConfig,
    net: &mut Network,
) -> Result<OuterResult> {
    solve_nonconvex_observed(model, fed, w0, cfg, net, &mut |_| Ok(()))
}

pub fn solve_nonconvex_observed(
    model: &dyn LossModel,
    fed: &FederatedDataset,
    w0: &WeightVector,
    cfg: &OuterConfig,
    net: &mut Network,
    observer: Observer<'_>,
) -> Result<OuterResult> {
    let mut drv = Driver::new(model, fed, w0, cfg)?;
    let mut iterates = vec![w0.clone()];
    let mut trace = OuterTrace::default();
    for s in 0..cfg.iters {
        let w = iterates[s].clone();
        let (hr, gamma, iters) = drv.hypergrad(s, &w, net)?;
        let eta = drv.eta.expect("set");
        let w_next = prox_linear_step(&hr.grad, &w, eta, cfg.cap)?;
        let rec = drv.record(s, &w, &w_next, hr, gamma, iters, net)?;
        observer(&rec)?;
        trace.records.push(rec);
        iterates.push(w_next);
    }
    let mut rng = NodeRng::new(net.seed(), 0, u64::MAX);
    let selected = rng.sample_index(cfg.iters);
    Ok(OuterResult {
        w: iterates[selected].clone(),
        last: iterates.pop().expect("nonempty"),
        selected: Some(selected),
        eta: drv.eta.expect("set"),
        trace,
    })
}
