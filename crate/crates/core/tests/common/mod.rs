//! Reference implementations used as test oracles.

#![allow(dead_code)]

use fedbl::model::{FederatedDataset, NodeDataset, SamplePoint};

/// Projection onto the capped simplex by enumerating every
/// lower/free/upper clip pattern.
pub fn enumerate_projection(v: &[f64], cap: f64) -> Vec<f64> {
    let k = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(k as u32) {
        let mut c = code;
        let state: Vec<usize> = (0..k)
            .map(|_| {
                let s = c % 3;
                c /= 3;
                s
            })
            .collect();
        let free: Vec<usize> = (0..k).filter(|&i| state[i] == 1).collect();
        let n_hi = state.iter().filter(|&&s| s == 2).count() as f64;
        let mut w: Vec<f64> = state
            .iter()
            .map(|&s| if s == 2 { cap } else { 0.0 })
            .collect();
        if free.is_empty() {
            if (n_hi * cap - 1.0).abs() > 1e-12 {
                continue;
            }
        } else {
            let lambda =
                (free.iter().map(|&i| v[i]).sum::<f64>() + n_hi * cap - 1.0) / free.len() as f64;
            for &i in &free {
                w[i] = v[i] - lambda;
            }
        }
        if w.iter().any(|&x| x < -1e-12 || x > cap + 1e-12) {
            continue;
        }
        let d: f64 = w.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, w));
        }
    }
    best.expect("nonempty feasible set").1
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Node with the given `(features, target)` rows.
pub fn node(id: usize, rows: &[(Vec<f64>, f64)]) -> NodeDataset {
    NodeDataset::new(
        id,
        rows.iter()
            .map(|(x, y)| SamplePoint::new(x.clone(), *y))
            .collect(),
    )
    .expect("valid node")
}

pub fn fed(nodes: Vec<NodeDataset>, validation: NodeDataset) -> FederatedDataset {
    FederatedDataset::new(nodes, validation).expect("valid federation")
}

/// Small deterministic generator for test fixtures.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Self(
            seed.wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407),
        )
    }

    pub fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Standard normal by Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
