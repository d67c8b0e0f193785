//! Experiment configuration and the runner that binds data generation,
//! solvers, baselines and metrics to on-disk telemetry.
//!
//! A run writes four files into the output directory:
//!
//! * `telemetry.csv`: one row per outer iteration plus a final row, with the
//!   columns listed in [`TELEMETRY_COLUMNS`] followed by `w_1..w_K`.
//! * `events.jsonl`: the same records as JSON objects, with wall-clock time.
//! * `weights.csv`: the weight trajectory, one row per telemetry row.
//! * `summary.json`: final metrics, the resolved configuration and the seed.
//!
//! Telemetry contains no wall-clock quantities, so a fixed seed reproduces it
//! byte for byte regardless of the worker count.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    format_float, gen_hetero_classification, gen_linear_regression, gen_mean_estimation, Task,
    TaskKind, TaskSpec,
};
use crate::error::{Error, Result};
use crate::hypergrad::{
    approx_hypergrad, dense_hypergrad_oracle, inner_instance, tangent_fd, DENSE_DIM_LIMIT,
};
use crate::losses::{QuadraticRegressionLoss, RegularizedLogisticLoss};
use crate::metrics::{dist_to_wstar, generalization_gap, metric_g, EmpiricalFamily, Population};
use crate::model::{
    check_cap, empirical_loss, FederatedDataset, LossModel, NodeDataset, WeightVector,
};
use crate::network::{Network, NodeRng, RoundLedger};
use crate::outer::{
    gamma0, inner_schedule, solve_convex_observed, solve_nonconvex_observed, OuterConfig,
    OuterRecord, Schedule,
};
use crate::simplex::project;
use crate::svrg::{local_svrg_solve, SvrgConfig};
use crate::vecops;

/// Fixed leading columns of `telemetry.csv`.
pub const TELEMETRY_COLUMNS: [&str; 14] = [
    "run_id",
    "s",
    "comm_rounds",
    "scalars_sent",
    "wall_ops",
    "f_estimate",
    "test_loss",
    "test_accuracy",
    "gen_gap",
    "gen_gap_se",
    "dist_wstar",
    "stationarity",
    "gamma",
    "inner_iters",
];

/// Maximum relative hypergradient error accepted by [`check_hypergrad`].
pub const HYPERGRAD_TOLERANCE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerScheduleKind {
    Fixed,
    ConvexTau1,
    ConvexTauGt1,
    NonconvexTau1,
    NonconvexTauGt1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerSection {
    pub schedule: InnerScheduleKind,
    /// Learning rate of the fixed schedule; the safe rate when absent.
    pub gamma: Option<f64>,
    /// Learning rate of the quadratic-program solve; `gamma` when absent.
    pub qp_gamma: Option<f64>,
    pub tau: usize,
    pub q: f64,
    /// Iterations per call of the fixed schedule; `epochs` passes over the
    /// largest node when absent.
    pub iters: Option<usize>,
    pub epochs: f64,
}

impl Default for InnerSection {
    fn default() -> Self {
        Self {
            schedule: InnerScheduleKind::Fixed,
            gamma: None,
            qp_gamma: None,
            tau: 10,
            q: 1.0 / 50.0,
            iters: None,
            epochs: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    BilevelConvex,
    BilevelNonconvex,
    Fedavg,
    Local,
    StaticW,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::BilevelConvex => "bilevel-convex",
            SolverKind::BilevelNonconvex => "bilevel-nonconvex",
            SolverKind::Fedavg => "fedavg",
            SolverKind::Local => "local",
            SolverKind::StaticW => "static-w",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        [
            SolverKind::BilevelConvex,
            SolverKind::BilevelNonconvex,
            SolverKind::Fedavg,
            SolverKind::Local,
            SolverKind::StaticW,
        ]
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::config("outer.solver", format!("unknown solver `{name}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Last,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterSection {
    pub solver: SolverKind,
    pub iters: usize,
    /// Outer stepsize; derived from the smoothness bound when absent.
    pub eta: Option<f64>,
    pub cap: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    /// Bound on the inner solutions.
    pub radius: Option<f64>,
    pub warm_start: bool,
    /// Which iterate the non-convex method reports.
    pub select: Selection,
    /// Starting weights; uniform when absent.
    pub initial_weights: Option<Vec<f64>>,
    /// Weights for the `static-w` baseline.
    pub static_weights: Option<Vec<f64>>,
}

impl Default for OuterSection {
    fn default() -> Self {
        Self {
            solver: SolverKind::BilevelConvex,
            iters: 20,
            eta: None,
            cap: 1.0 / 3.0,
            a1: 1.0,
            a2: 1.0,
            a3: 1.0,
            radius: None,
            warm_start: false,
            select: Selection::Last,
            initial_weights: None,
            static_weights: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Loss and accuracy on the held-out test sample.
    Test,
    /// Generalization gap against the population optimum.
    Gap,
    /// Distance of the weights to the optimal weight set.
    Dist,
    /// Heterogeneity distance `G`.
    G,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub compute: Vec<MetricKind>,
    /// Ball radius for `G`; twice the largest node optimum norm when absent.
    pub radius: Option<f64>,
    pub g_starts: usize,
    /// Size of the held-out sample for Monte Carlo population estimates.
    pub mc_samples: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            compute: vec![
                MetricKind::Test,
                MetricKind::Gap,
                MetricKind::Dist,
                MetricKind::G,
            ],
            radius: None,
            g_starts: 20,
            mc_samples: 100_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Jsonl,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            formats: vec![OutputFormat::Csv, OutputFormat::Jsonl, OutputFormat::Json],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub inner: InnerSection,
    pub outer: OuterSection,
    pub metrics: MetricsSection,
    pub output: OutputSection,
}

fn key_from_message(message: &str) -> String {
    let field = message
        .split("unknown field `")
        .nth(1)
        .and_then(|rest| rest.split('`').next());
    match field {
        Some(f) => f.to_string(),
        None => message
            .split("for key `")
            .nth(1)
            .and_then(|rest| rest.split('`').next())
            .unwrap_or("<root>")
            .to_string(),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            Error::config(key_from_message(&message), message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Accepts a bare configuration or a run summary embedding one.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let body = value.get("config").cloned().unwrap_or(value);
        let cfg: Self = serde_json::from_value(body).map_err(|e| {
            let message = e.to_string();
            Error::config(key_from_message(&message), message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    /// Checks every constraint that can be decided without data.
    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        let nonzero = [
            ("task.k", t.k),
            ("task.n_train", t.n_train),
            ("task.n_valid", t.n_valid),
            ("task.n_test", t.n_test),
            ("inner.tau", self.inner.tau),
            ("outer.iters", self.outer.iters),
            ("metrics.mc_samples", self.metrics.mc_samples),
        ];
        for (key, v) in nonzero {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if t.j > t.k {
            return Err(Error::config("task.j", format!("exceeds task.k = {}", t.k)));
        }
        if t.kind == TaskKind::MeanEstimation && t.k != 2 {
            return Err(Error::config("task.k", "mean estimation needs k = 2"));
        }
        if t.kind == TaskKind::HeteroClassification && t.j == 0 {
            return Err(Error::config("task.j", "classification needs j >= 1"));
        }
        if let Some(r) = t.regularization {
            let ok = if t.kind == TaskKind::HeteroClassification {
                r > 0.0
            } else {
                r >= 0.0
            };
            if !ok || !r.is_finite() {
                return Err(Error::config("task.regularization", "out of range"));
            }
        }
        let inner = &self.inner;
        if !(inner.q > 0.0 && inner.q <= 1.0) {
            return Err(Error::config("inner.q", "must lie in (0, 1]"));
        }
        if inner.tau > 1 && inner.q >= 1.0 {
            return Err(Error::config("inner.q", "must be < 1 when tau > 1"));
        }
        for (key, v) in [
            ("inner.gamma", inner.gamma),
            ("inner.qp_gamma", inner.qp_gamma),
        ] {
            if v.is_some_and(|g| !(g > 0.0 && g.is_finite())) {
                return Err(Error::config(key, "must be > 0"));
            }
        }
        if inner.iters == Some(0) {
            return Err(Error::config("inner.iters", "must be >= 1"));
        }
        if !(inner.epochs > 0.0 && inner.epochs.is_finite()) {
            return Err(Error::config("inner.epochs", "must be > 0"));
        }
        let o = &self.outer;
        if o.eta.is_some_and(|e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::config("outer.eta", "must be > 0"));
        }
        check_cap(t.k, o.cap).map_err(|e| Error::config("outer.cap", e.to_string()))?;
        for (key, v) in [("outer.a1", o.a1), ("outer.a2", o.a2), ("outer.a3", o.a3)] {
            if !(v > 0.0) {
                return Err(Error::config(key, "must be > 0"));
            }
        }
        if o.radius.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::config("outer.radius", "must be > 0"));
        }
        for (key, w) in [
            ("outer.initial_weights", &o.initial_weights),
            ("outer.static_weights", &o.static_weights),
        ] {
            if let Some(w) = w {
                if w.len() != t.k {
                    return Err(Error::config(key, format!("needs {} entries", t.k)));
                }
                WeightVector::new(w.clone(), o.cap)
                    .map_err(|e| Error::config(key, e.to_string()))?;
            }
        }
        if o.solver == SolverKind::StaticW && o.static_weights.is_none() {
            return Err(Error::config(
                "outer.static_weights",
                "required by the static-w solver",
            ));
        }
        if self.metrics.radius.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::config("metrics.radius", "must be > 0"));
        }
        Ok(())
    }
}

/// Per-run options that do not change results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker count; `FEDBL_THREADS` or the machine default when absent.
    pub threads: Option<usize>,
}

fn make_network(seed: u64, opts: &RunOptions) -> Network {
    match opts.threads {
        Some(n) => Network::with_threads(seed, n),
        None => Network::new(seed),
    }
}

/// Loss model implied by a task.
pub fn build_model(spec: &TaskSpec) -> Result<Box<dyn LossModel>> {
    Ok(match spec.kind {
        TaskKind::MeanEstimation | TaskKind::LinearRegression => Box::new(
            QuadraticRegressionLoss::new(spec.regularization.unwrap_or(0.0))?,
        ),
        TaskKind::HeteroClassification => Box::new(RegularizedLogisticLoss::new(
            spec.regularization.unwrap_or(1e-2),
        )?),
    })
}

/// Generates the task data with the experiment seed.
pub fn build_task(cfg: &ExperimentConfig, model: &dyn LossModel) -> Result<Task> {
    let spec = TaskSpec {
        seed: cfg.seed,
        mc_samples: cfg.metrics.mc_samples,
        ..cfg.task.clone()
    };
    match spec.kind {
        TaskKind::MeanEstimation => gen_mean_estimation(spec.a, &spec),
        TaskKind::LinearRegression => gen_linear_regression(&spec),
        TaskKind::HeteroClassification => gen_hetero_classification(&spec, model),
    }
}

/// Outer-solver configuration with the inner schedule resolved against the
/// data.
pub fn resolve_outer_config(
    cfg: &ExperimentConfig,
    model: &dyn LossModel,
    fed: &FederatedDataset,
) -> Result<OuterConfig> {
    let inner = &cfg.inner;
    let schedule = match inner.schedule {
        InnerScheduleKind::ConvexTau1 => Schedule::ConvexTau1,
        InnerScheduleKind::ConvexTauGt1 => Schedule::ConvexTauGt1,
        InnerScheduleKind::NonconvexTau1 => Schedule::NonconvexTau1,
        InnerScheduleKind::NonconvexTauGt1 => Schedule::NonconvexTauGt1,
        InnerScheduleKind::Fixed => {
            let gamma = match inner.gamma {
                Some(g) => g,
                None => {
                    let c = model.constants(fed)?;
                    gamma0(c.l1, c.mu, inner.tau, inner.q)?
                }
            };
            let longest = fed.nodes().iter().map(NodeDataset::len).max().unwrap_or(1);
            let iters = inner
                .iters
                .unwrap_or_else(|| (inner.epochs * longest as f64).ceil().max(1.0) as usize);
            Schedule::Fixed {
                gamma,
                iters,
                qp_gamma: inner.qp_gamma,
            }
        }
    };
    let o = &cfg.outer;
    Ok(OuterConfig {
        iters: o.iters,
        eta: o.eta,
        cap: o.cap,
        tau: inner.tau,
        q: inner.q,
        schedule,
        a1: o.a1,
        a2: o.a2,
        a3: o.a3,
        radius: o.radius,
        warm_start: o.warm_start,
    })
}

/// `(gamma_s, T_s)` of a resolved configuration.
pub fn resolved_schedule(
    outer: &OuterConfig,
    model: &dyn LossModel,
    fed: &FederatedDataset,
    s: usize,
) -> Result<(f64, usize)> {
    let c = model.constants(fed)?;
    let g0 = match outer.schedule {
        Schedule::Fixed { .. } => f64::NAN,
        _ => gamma0(c.l1, c.mu, outer.tau, outer.q)?,
    };
    Ok(inner_schedule(s, outer, g0, c.mu))
}

/// One telemetry row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub run_id: String,
    pub s: usize,
    pub comm_rounds: u64,
    pub scalars_sent: u64,
    pub wall_ops: u64,
    pub f_estimate: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub gen_gap: Option<f64>,
    pub gen_gap_se: Option<f64>,
    pub dist_wstar: Option<f64>,
    pub stationarity: Option<f64>,
    pub gamma: f64,
    pub inner_iters: usize,
    pub w: Vec<f64>,
    /// Seconds since the run started; omitted from `telemetry.csv`.
    pub wall_time: f64,
}

fn opt_float(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

struct Sinks {
    telemetry: Option<csv::Writer<File>>,
    weights: Option<csv::Writer<File>>,
    events: Option<BufWriter<File>>,
}

impl Sinks {
    fn open(dir: &Path, formats: &[OutputFormat], k: usize) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let csv_on = formats.contains(&OutputFormat::Csv);
        let mut sinks = Sinks {
            telemetry: None,
            weights: None,
            events: None,
        };
        if csv_on {
            let mut t = csv::Writer::from_path(dir.join("telemetry.csv"))?;
            let mut header: Vec<String> = TELEMETRY_COLUMNS.iter().map(|c| c.to_string()).collect();
            header.extend((1..=k).map(|i| format!("w_{i}")));
            t.write_record(&header)?;
            t.flush()?;
            let mut w = csv::Writer::from_path(dir.join("weights.csv"))?;
            let mut header = vec!["s".to_string()];
            header.extend((1..=k).map(|i| format!("w_{i}")));
            w.write_record(&header)?;
            w.flush()?;
            sinks.telemetry = Some(t);
            sinks.weights = Some(w);
        }
        if formats.contains(&OutputFormat::Jsonl) {
            sinks.events = Some(BufWriter::new(File::create(dir.join("events.jsonl"))?));
        }
        Ok(sinks)
    }

    fn write(&mut self, r: &TelemetryRecord) -> Result<()> {
        if let Some(t) = &mut self.telemetry {
            let mut row = vec![
                r.run_id.clone(),
                r.s.to_string(),
                r.comm_rounds.to_string(),
                r.scalars_sent.to_string(),
                r.wall_ops.to_string(),
                format_float(r.f_estimate),
                opt_float(r.test_loss),
                opt_float(r.test_accuracy),
                opt_float(r.gen_gap),
                opt_float(r.gen_gap_se),
                opt_float(r.dist_wstar),
                opt_float(r.stationarity),
                format_float(r.gamma),
                r.inner_iters.to_string(),
            ];
            row.extend(r.w.iter().map(|v| format_float(*v)));
            t.write_record(&row)?;
            t.flush()?;
        }
        if let Some(w) = &mut self.weights {
            let mut row = vec![r.s.to_string()];
            row.extend(r.w.iter().map(|v| format_float(*v)));
            w.write_record(&row)?;
            w.flush()?;
        }
        if let Some(e) = &mut self.events {
            serde_json::to_writer(&mut *e, r)?;
            e.write_all(b"\n")?;
            e.flush()?;
        }
        Ok(())
    }
}

/// Evaluates a model state and builds its telemetry record.
struct Recorder<'a> {
    run_id: String,
    model: &'a dyn LossModel,
    task: &'a Task,
    metrics: &'a MetricsSection,
    cap: f64,
    start: Instant,
}

struct State<'a> {
    s: usize,
    w: &'a [f64],
    theta: &'a [f64],
    stationarity: Option<f64>,
    gamma: f64,
    inner_iters: usize,
    ledger: RoundLedger,
}

impl Recorder<'_> {
    fn wants(&self, m: MetricKind) -> bool {
        self.metrics.compute.contains(&m)
    }

    fn record(&self, st: State<'_>) -> Result<TelemetryRecord> {
        let truth = &self.task.truth;
        let f_estimate = empirical_loss(self.model, self.task.fed.validation(), st.theta)?;
        let (test_loss, test_accuracy) = if self.wants(MetricKind::Test) {
            (
                Some(empirical_loss(self.model, &truth.test, st.theta)?),
                self.model.accuracy(st.theta, &truth.test),
            )
        } else {
            (None, None)
        };
        let (gen_gap, gen_gap_se) = if self.wants(MetricKind::Gap) {
            let g = generalization_gap(self.model, truth, st.theta)?;
            (Some(g.gap), Some(g.std_error))
        } else {
            (None, None)
        };
        let dist_wstar = if self.wants(MetricKind::Dist)
            && !truth.identical.is_empty()
            && self.cap * truth.identical.len() as f64 >= 1.0 - 1e-12
        {
            let w = WeightVector::new(st.w.to_vec(), self.cap)?;
            Some(dist_to_wstar(&w, truth, self.cap)?)
        } else {
            None
        };
        Ok(TelemetryRecord {
            run_id: self.run_id.clone(),
            s: st.s,
            comm_rounds: st.ledger.comm_rounds,
            scalars_sent: st.ledger.scalars_sent,
            wall_ops: st.ledger.wall_ops,
            f_estimate,
            test_loss,
            test_accuracy,
            gen_gap,
            gen_gap_se,
            dist_wstar,
            stationarity: st.stationarity,
            gamma: st.gamma,
            inner_iters: st.inner_iters,
            w: st.w.to_vec(),
            wall_time: self.start.elapsed().as_secs_f64(),
        })
    }
}

/// Final results of a run, written to `summary.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub solver: SolverKind,
    pub final_record: TelemetryRecord,
    pub weights: Vec<f64>,
    pub theta: Vec<f64>,
    pub eta: Option<f64>,
    pub selected: Option<usize>,
    /// Communication rounds predicted from the inner budgets.
    pub comm_rounds_formula: u64,
    pub metric_g: Option<f64>,
    pub g_radius: Option<f64>,
    /// A population-optimal weight vector, for closed-form tasks.
    pub population_optimal_weights: Option<Vec<f64>>,
    /// Largest coordinate distance of the final weights to it.
    pub weight_error_inf: Option<f64>,
    pub threads: usize,
    pub wall_time: f64,
    pub config: ExperimentConfig,
}

fn budget_formula(records: &[(usize, usize)], tau: usize) -> u64 {
    records
        .iter()
        .map(|&(_, t)| 2 * t.div_ceil(tau) as u64 + 2 + 4)
        .sum()
}

fn single_node(validation: &NodeDataset) -> Result<FederatedDataset> {
    FederatedDataset::new(
        vec![NodeDataset::new(1, validation.samples().to_vec())?],
        validation.clone(),
    )
}

/// Runs one experiment and writes its artifacts to `cfg.output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let model = build_model(&cfg.task)?;
    let model = model.as_ref();
    let task = build_task(cfg, model)?;
    let fed = &task.fed;
    let k = fed.num_nodes();
    let outer = resolve_outer_config(cfg, model, fed)?;
    let solver = cfg.outer.solver;
    let run_id = format!("{}-{}", solver.name(), cfg.seed);
    let mut net = make_network(cfg.seed, opts);
    let threads = net.threads();
    info!(
        "run {run_id}: K = {k}, d = {}, {threads} worker threads",
        fed.dim()
    );

    let mut sinks = Sinks::open(&cfg.output.dir, &cfg.output.formats, k)?;
    let recorder = Recorder {
        run_id: run_id.clone(),
        model,
        task: &task,
        metrics: &cfg.metrics,
        cap: cfg.outer.cap,
        start,
    };
    let w0 = match &cfg.outer.initial_weights {
        Some(w) => WeightVector::new(w.clone(), cfg.outer.cap)?,
        None => WeightVector::uniform(k, cfg.outer.cap)?,
    };
    let mut budgets = Vec::with_capacity(cfg.outer.iters);
    let mut last_theta = vec![0.0; fed.dim()];

    let (final_w, final_theta, eta, selected, final_gamma, final_iters) = match solver {
        SolverKind::BilevelConvex | SolverKind::BilevelNonconvex => {
            let mut observer = |rec: &OuterRecord| -> Result<()> {
                budgets.push((rec.s, rec.inner_iters));
                if cfg.outer.warm_start {
                    last_theta.clone_from(&rec.theta);
                }
                let row = recorder.record(State {
                    s: rec.s,
                    w: &rec.w_query,
                    theta: &rec.theta,
                    stationarity: Some(rec.stationarity),
                    gamma: rec.gamma,
                    inner_iters: rec.inner_iters,
                    ledger: rec.ledger,
                })?;
                info!(
                    "s = {:>4}  F = {:.6e}  rounds = {}",
                    rec.s, row.f_estimate, row.comm_rounds
                );
                sinks.write(&row)
            };
            let result = if solver == SolverKind::BilevelConvex {
                solve_convex_observed(model, fed, &w0, &outer, &mut net, &mut observer)?
            } else {
                solve_nonconvex_observed(model, fed, &w0, &outer, &mut net, &mut observer)?
            };
            let w = match (solver, cfg.outer.select) {
                (SolverKind::BilevelNonconvex, Selection::Last) => result.last.clone(),
                _ => result.w.clone(),
            };
            let (gamma, iters) = resolved_schedule(&outer, model, fed, cfg.outer.iters)?;
            let inst = inner_instance(model, fed)?;
            let mut eval_net = make_network(cfg.seed ^ 0x6576_616c, opts);
            let svrg = SvrgConfig {
                gamma,
                tau: outer.tau,
                q: outer.q,
                iters,
            };
            let theta = local_svrg_solve(&inst, &w, &last_theta, &svrg, &mut eval_net)?;
            (
                w,
                theta.into_inner(),
                Some(result.eta),
                result.selected,
                gamma,
                iters,
            )
        }
        SolverKind::Fedavg | SolverKind::Local | SolverKind::StaticW => {
            let local_fed;
            let (train_fed, w) = match solver {
                SolverKind::Local => {
                    local_fed = single_node(fed.validation())?;
                    (&local_fed, WeightVector::vertex(1, 0)?)
                }
                SolverKind::StaticW => (
                    fed,
                    WeightVector::new(
                        cfg.outer.static_weights.clone().expect("validated"),
                        cfg.outer.cap,
                    )?,
                ),
                _ => (fed, WeightVector::uniform(k, cfg.outer.cap)?),
            };
            let reported = match solver {
                SolverKind::Local => w0.clone(),
                _ => w.clone(),
            };
            let inst = inner_instance(model, train_fed)?;
            let mut theta = vec![0.0; fed.dim()];
            let (mut gamma, mut iters) = (f64::NAN, 0);
            for s in 0..cfg.outer.iters {
                (gamma, iters) = resolved_schedule(&outer, model, fed, s)?;
                budgets.push((s, iters));
                // Same number of rounds as one bilevel iteration.
                let svrg = SvrgConfig {
                    gamma,
                    tau: outer.tau,
                    q: outer.q,
                    iters: 2 * iters.div_ceil(outer.tau) * outer.tau + 5 * outer.tau,
                };
                theta = local_svrg_solve(&inst, &w, &theta, &svrg, &mut net)?.into_inner();
                let row = recorder.record(State {
                    s,
                    w: reported.values(),
                    theta: &theta,
                    stationarity: None,
                    gamma,
                    inner_iters: iters,
                    ledger: net.ledger(),
                })?;
                sinks.write(&row)?;
            }
            (reported, theta, None, None, gamma, iters)
        }
    };

    let final_record = recorder.record(State {
        s: cfg.outer.iters,
        w: final_w.values(),
        theta: &final_theta,
        stationarity: None,
        gamma: final_gamma,
        inner_iters: final_iters,
        ledger: net.ledger(),
    })?;
    sinks.write(&final_record)?;

    let (metric_g_value, g_radius) = if cfg.metrics.compute.contains(&MetricKind::G) {
        let (family_value, radius) = match &task.truth.population {
            Population::Quadratic(q) => {
                let radius = cfg.metrics.radius.unwrap_or_else(|| {
                    2.0 * q
                        .node_optima
                        .iter()
                        .chain(std::iter::once(&q.validation_optimum))
                        .map(|t| vecops::norm(t))
                        .fold(0.0, f64::max)
                        .max(1e-12)
                });
                (metric_g(q, radius, cfg.metrics.g_starts, cfg.seed)?, radius)
            }
            Population::MonteCarlo(_) => {
                let radius = cfg
                    .metrics
                    .radius
                    .unwrap_or_else(|| 2.0 * vecops::norm(&task.truth.theta_star).max(1e-12));
                let family = EmpiricalFamily { model, fed };
                (
                    metric_g(&family, radius, cfg.metrics.g_starts, cfg.seed)?,
                    radius,
                )
            }
        };
        (Some(family_value), Some(radius))
    } else {
        (None, None)
    };
    let population_optimal_weights = match &task.truth.population {
        Population::Quadratic(q) => Some(q.optimal_weights(cfg.outer.cap)?.values().to_vec()),
        Population::MonteCarlo(_) => None,
    };
    let weight_error_inf = population_optimal_weights
        .as_ref()
        .filter(|_| solver != SolverKind::Local)
        .map(|p| vecops::max_abs_diff(p, final_w.values()));

    let summary = RunSummary {
        run_id,
        seed: cfg.seed,
        solver,
        weights: final_w.values().to_vec(),
        theta: final_theta,
        eta,
        selected,
        comm_rounds_formula: budget_formula(&budgets, outer.tau),
        metric_g: metric_g_value,
        g_radius,
        population_optimal_weights,
        weight_error_inf,
        threads,
        wall_time: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
        final_record,
    };
    if cfg.output.formats.contains(&OutputFormat::Json) {
        let file = File::create(cfg.output.dir.join("summary.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &summary)?;
    }
    Ok(summary)
}

/// Agreement of the approximate hypergradient with the dense oracle and with
/// finite differences at one weight vector.
#[derive(Clone, Debug, Serialize)]
pub struct HypergradPoint {
    pub w: Vec<f64>,
    pub approx: Vec<f64>,
    pub dense: Vec<f64>,
    /// `(i, j, finite difference, dense directional derivative)`
    pub tangents: Vec<(usize, usize, f64, f64)>,
    pub abs_error: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HypergradCheck {
    pub points: Vec<HypergradPoint>,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Below this gradient scale errors are judged in absolute terms.
const ABS_ERROR_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

fn relative(err: f64, scale: f64) -> f64 {
    if err <= ABS_ERROR_FLOOR {
        0.0
    } else {
        err / scale.max(ABS_ERROR_FLOOR)
    }
}

/// Compares the three hypergradient routes at `points` random feasible
/// weights.
pub fn check_hypergrad(
    cfg: &ExperimentConfig,
    points: usize,
    opts: &RunOptions,
) -> Result<HypergradCheck> {
    cfg.validate()?;
    let model = build_model(&cfg.task)?;
    let model = model.as_ref();
    let task = build_task(cfg, model)?;
    let fed = &task.fed;
    if fed.dim() > DENSE_DIM_LIMIT {
        return Err(Error::invalid(format!(
            "dense oracle needs d <= {DENSE_DIM_LIMIT}, got {}",
            fed.dim()
        )));
    }
    let outer = resolve_outer_config(cfg, model, fed)?;
    let (gamma, iters) = resolved_schedule(&outer, model, fed, 0)?;
    let qp_gamma = match outer.schedule {
        Schedule::Fixed {
            qp_gamma: Some(g), ..
        } => g,
        _ => gamma,
    };
    let svrg = |gamma| SvrgConfig {
        gamma,
        tau: outer.tau,
        q: outer.q,
        iters,
    };
    let k = fed.num_nodes();
    let mut net = make_network(cfg.seed, opts);
    let mut rng = NodeRng::new(cfg.seed, 0, 0x0063_6865_636b);
    let mut out = Vec::with_capacity(points);
    for _ in 0..points {
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
        let w = project(&raw, cfg.outer.cap)?.w;
        let approx =
            approx_hypergrad(model, fed, &w, &svrg(gamma), &svrg(qp_gamma), &mut net)?.grad;
        let dense = dense_hypergrad_oracle(model, fed, &w)?;
        let scale = vecops::norm(&dense);
        let mut abs_error = vecops::dist(&approx, &dense);
        let mut rel_error = relative(abs_error, scale);
        let mut tangents = Vec::new();
        for i in 0..k.saturating_sub(1) {
            let j = i + 1;
            let fd = tangent_fd(model, fed, &w, i, j, FD_STEP)?;
            let dir = (dense[i] - dense[j]) / 2f64.sqrt();
            let err = (fd - dir).abs();
            abs_error = abs_error.max(err);
            rel_error = rel_error.max(relative(err, scale));
            let approx_dir = (approx[i] - approx[j]) / 2f64.sqrt();
            let err = (fd - approx_dir).abs();
            abs_error = abs_error.max(err);
            rel_error = rel_error.max(relative(err, scale));
            tangents.push((i, j, fd, dir));
        }
        out.push(HypergradPoint {
            w: w.values().to_vec(),
            approx,
            dense,
            tangents,
            abs_error,
            rel_error,
        });
    }
    let max_abs_error = out.iter().map(|p| p.abs_error).fold(0.0, f64::max);
    let max_rel_error = out.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(HypergradCheck {
        points: out,
        max_abs_error,
        max_rel_error,
        passed: max_rel_error <= HYPERGRAD_TOLERANCE,
    })
}
