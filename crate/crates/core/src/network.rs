//! The simulated federation: per-node random streams, synchronous weighted
//! aggregation, and communication accounting.
//!
//! Every node draws from its own ChaCha stream keyed by
//! `(global_seed, call_index)` with the node id selecting the stream, so the
//! draws a node sees never depend on how node work is scheduled across
//! worker threads.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamVector, WeightVector};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "FEDBL_THREADS";

/// Communication and work counters. All fields only grow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundLedger {
    /// Synchronization events.
    pub comm_rounds: u64,
    /// Real numbers moved across the network.
    pub scalars_sent: u64,
    /// Component-gradient (or Hessian-vector) evaluations.
    pub wall_ops: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream of one node within one solver call.
#[derive(Clone, Debug)]
pub struct NodeRng {
    inner: ChaCha8Rng,
}

impl NodeRng {
    pub fn new(global_seed: u64, node_id: u64, call_index: u64) -> Self {
        let mut state = global_seed ^ call_index.rotate_left(32);
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            let word = splitmix64(&mut state) ^ call_index;
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(node_id);
        Self { inner }
    }

    /// Uniform index in `0..n`.
    pub fn sample_index(&mut self, n: usize) -> usize {
        debug_assert!(n >= 1);
        if n == 1 {
            return 0;
        }
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, q: f64) -> bool {
        self.inner.random_bool(q.clamp(0.0, 1.0))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DrawKind {
    SampleIndex(usize),
    Bernoulli(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Draw {
    Index(usize),
    Flag(bool),
}

/// Local state of one node inside a Local-SVRG call.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub node_id: usize,
    /// Current iterate.
    pub x: Vec<f64>,
    /// Variance-reduction reference point.
    pub y: Vec<f64>,
    pub rng: NodeRng,
}

impl NodeState {
    pub fn new(node_id: usize, x0: &[f64], global_seed: u64, call_index: u64) -> Self {
        Self {
            node_id,
            x: x0.to_vec(),
            y: x0.to_vec(),
            rng: NodeRng::new(global_seed, node_id as u64, call_index),
        }
    }

    pub fn draw(&mut self, kind: DrawKind) -> Draw {
        match kind {
            DrawKind::SampleIndex(n) => Draw::Index(self.rng.sample_index(n)),
            DrawKind::Bernoulli(q) => Draw::Flag(self.rng.bernoulli(q)),
        }
    }
}

/// Handle to the simulated network: seed, call counter, ledger and the
/// worker pool node steps run on.
pub struct Network {
    seed: u64,
    next_call: u64,
    ledger: RoundLedger,
    pool: Arc<rayon::ThreadPool>,
}

impl Network {
    /// Worker count taken from `FEDBL_THREADS` when set, otherwise rayon's
    /// default.
    pub fn new(seed: u64) -> Self {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
        Self::with_threads(seed, threads)
    }

    /// `threads == 0` lets rayon pick.
    pub fn with_threads(seed: u64, threads: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build worker pool");
        Self {
            seed,
            next_call: 0,
            ledger: RoundLedger::default(),
            pool: Arc::new(pool),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn ledger(&self) -> RoundLedger {
        self.ledger
    }

    /// Index used to key the node streams of the next solver call.
    pub fn next_call_index(&mut self) -> u64 {
        let c = self.next_call;
        self.next_call += 1;
        c
    }

    pub fn record_round(&mut self, scalars: u64) {
        self.ledger.comm_rounds += 1;
        self.ledger.scalars_sent += scalars;
    }

    pub fn record_ops(&mut self, ops: u64) {
        self.ledger.wall_ops += ops;
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

/// `sum_k w_k v_k`, charged as one round moving `K * d` scalars.
pub fn weighted_aggregate(
    net: &mut Network,
    states: &[&[f64]],
    w: &WeightVector,
) -> Result<ParamVector> {
    let out = weighted_sum(states, w.values())?;
    net.record_round((states.len() * out.len()) as u64);
    ParamVector::new(out)
}

pub(crate) fn weighted_sum(states: &[&[f64]], w: &[f64]) -> Result<Vec<f64>> {
    if states.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: states.len(),
        });
    }
    let d = states.first().map_or(0, |s| s.len());
    let mut out = vec![0.0; d];
    for (s, wk) in states.iter().zip(w) {
        if s.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.len(),
            });
        }
        for (o, si) in out.iter_mut().zip(s.iter()) {
            *o += wk * si;
        }
    }
    Ok(out)
}
