//! Seeded synthetic tasks with known ground truth.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergrad::solve_inner_dense;
use crate::metrics::{GroundTruth, Population, QuadraticTruth};
use crate::model::{FederatedDataset, LossModel, NodeDataset, SamplePoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MeanEstimation,
    LinearRegression,
    HeteroClassification,
}

/// Description of a synthetic task. Fields that do not apply to `kind` are
/// ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of training nodes.
    pub k: usize,
    /// Number of nodes sharing the validation distribution (the first `j`).
    pub j: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Set from the experiment seed rather than the task section.
    #[serde(skip)]
    pub seed: u64,
    /// Ridge strength for regression tasks, L2 strength for classification.
    pub regularization: Option<f64>,
    /// Separation of the two node means in mean estimation.
    pub a: f64,
    pub dim: usize,
    /// Noise standard deviation in linear regression.
    pub noise: f64,
    /// Scale of the random offsets of heterogeneous node optima.
    pub heterogeneity: f64,
    /// Explicit optimum per training node; random when absent.
    pub node_optima: Option<Vec<Vec<f64>>>,
    pub validation_optimum: Option<Vec<f64>>,
    /// Feature covariance (row-major rows); identity when absent.
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Class probabilities `[P(y=-1), P(y=+1)]` of the validation group.
    pub minority_class_probs: Vec<f64>,
    /// Class probabilities of the remaining nodes.
    pub majority_class_probs: Vec<f64>,
    /// Negate labels outside the validation group.
    pub flip: bool,
    /// Rotate features outside the validation group by 90 degrees.
    pub rotate: bool,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    /// Size of the held-out sample backing population estimates.
    pub mc_samples: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::LinearRegression,
            k: 15,
            j: 5,
            n_train: 500,
            n_valid: 200,
            n_test: 2000,
            seed: 0,
            regularization: None,
            a: 1.0,
            dim: 3,
            noise: 1.0,
            heterogeneity: 1.0,
            node_optima: None,
            validation_optimum: None,
            covariance: None,
            minority_class_probs: vec![0.5, 0.5],
            majority_class_probs: vec![0.5, 0.5],
            flip: false,
            rotate: false,
            separation: 1.0,
            mc_samples: 100_000,
        }
    }
}

impl TaskSpec {
    pub fn mean_estimation(a: f64, n_train: usize, n_valid: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::MeanEstimation,
            k: 2,
            j: 0,
            n_train,
            n_valid,
            n_test: n_valid,
            seed,
            a,
            dim: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_train == 0 || self.n_valid == 0 || self.n_test == 0 {
            return Err(Error::invalid(
                "k, n_train, n_valid and n_test must be >= 1",
            ));
        }
        if self.j > self.k {
            return Err(Error::invalid(format!(
                "j = {} exceeds the number of nodes {}",
                self.j, self.k
            )));
        }
        Ok(())
    }
}

/// A generated task: data plus what is known about its distribution.
#[derive(Clone, Debug)]
pub struct Task {
    pub fed: FederatedDataset,
    pub truth: GroundTruth,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn scalar_node(id: usize, n: usize, mean: f64, rng: &mut ChaCha8Rng) -> Result<NodeDataset> {
    let samples = (0..n)
        .map(|_| SamplePoint::new(vec![1.0], mean + normal(rng)))
        .collect();
    NodeDataset::new(id, samples)
}

/// Two nodes drawing from `N(a, 1)` and `N(-a, 1)`, validation from `N(0, 1)`.
pub fn gen_mean_estimation(a: f64, spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    if spec.k != 2 {
        return Err(Error::invalid(format!(
            "mean estimation needs exactly 2 nodes, got {}",
            spec.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nodes = vec![
        scalar_node(1, spec.n_train, a, &mut rng)?,
        scalar_node(2, spec.n_train, -a, &mut rng)?,
    ];
    let validation = scalar_node(0, spec.n_valid, 0.0, &mut rng)?;
    let test = scalar_node(0, spec.n_test, 0.0, &mut rng)?;
    let q = QuadraticTruth {
        sigma: DMatrix::identity(1, 1),
        node_optima: vec![vec![a], vec![-a]],
        validation_optimum: vec![0.0],
        node_noise: vec![1.0; 2],
        validation_noise: 1.0,
    };
    Ok(Task {
        fed: FederatedDataset::new(nodes, validation)?,
        truth: GroundTruth {
            identical: if a == 0.0 { vec![0, 1] } else { Vec::new() },
            theta_star: vec![0.0],
            population: Population::Quadratic(q),
            test,
        },
    })
}

fn covariance_factor(spec: &TaskSpec) -> Result<DMatrix<f64>> {
    let d = spec.dim;
    match &spec.covariance {
        None => Ok(DMatrix::identity(d, d)),
        Some(rows) => {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::invalid(format!("covariance must be {d} x {d}")));
            }
            let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
            if (&m - m.transpose()).abs().max() > 1e-12 {
                return Err(Error::invalid("covariance must be symmetric"));
            }
            m.cholesky().map(|c| c.l()).ok_or(Error::Singular {
                condition: f64::INFINITY,
            })
        }
    }
}

fn regression_node(
    id: usize,
    n: usize,
    optimum: &[f64],
    factor: &DMatrix<f64>,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeDataset> {
    let d = optimum.len();
    let samples = (0..n)
        .map(|_| {
            let z = nalgebra::DVector::from_fn(d, |_, _| normal(rng));
            let x: Vec<f64> = (factor * z).iter().copied().collect();
            let y = crate::vecops::dot(&x, optimum) + noise * normal(rng);
            SamplePoint::new(x, y)
        })
        .collect();
    NodeDataset::new(id, samples)
}

/// `y = x'theta_k + eps` with `x ~ N(0, covariance)` shared by all nodes.
/// Missing optima are drawn at random: the validation optimum from
/// `N(0, I)`, the first `j` nodes equal to it, the rest offset by
/// `heterogeneity * N(0, I)`.
pub fn gen_linear_regression(spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    if spec.dim == 0 {
        return Err(Error::invalid("dim must be >= 1"));
    }
    let d = spec.dim;
    let factor = covariance_factor(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let theta0 = match &spec.validation_optimum {
        Some(t) => t.clone(),
        None => (0..d).map(|_| normal(&mut rng)).collect(),
    };
    let optima = match &spec.node_optima {
        Some(t) => t.clone(),
        None => (0..spec.k)
            .map(|k| {
                theta0
                    .iter()
                    .map(|t| {
                        if k < spec.j {
                            *t
                        } else {
                            t + spec.heterogeneity * normal(&mut rng)
                        }
                    })
                    .collect()
            })
            .collect(),
    };
    if theta0.len() != d || optima.len() != spec.k || optima.iter().any(|t| t.len() != d) {
        return Err(Error::invalid(format!(
            "need {} node optima and a validation optimum, each of length {d}",
            spec.k
        )));
    }
    let nodes = optima
        .iter()
        .enumerate()
        .map(|(k, t)| regression_node(k + 1, spec.n_train, t, &factor, spec.noise, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let validation = regression_node(0, spec.n_valid, &theta0, &factor, spec.noise, &mut rng)?;
    let test = regression_node(0, spec.n_test, &theta0, &factor, spec.noise, &mut rng)?;
    let identical = optima
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == theta0)
        .map(|(k, _)| k)
        .collect();
    let noise_var = spec.noise * spec.noise;
    let q = QuadraticTruth {
        sigma: &factor * factor.transpose(),
        node_optima: optima,
        validation_optimum: theta0.clone(),
        node_noise: vec![noise_var; spec.k],
        validation_noise: noise_var,
    };
    Ok(Task {
        fed: FederatedDataset::new(nodes, validation)?,
        truth: GroundTruth {
            identical,
            theta_star: theta0,
            population: Population::Quadratic(q),
            test,
        },
    })
}

fn check_probs(p: &[f64], name: &str) -> Result<()> {
    if p.len() != 2
        || p.iter().any(|x| !(0.0..=1.0).contains(x))
        || (p[0] + p[1] - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(format!(
            "{name} must be two probabilities summing to 1"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct Group<'a> {
    probs: &'a [f64],
    flip: bool,
    rotate: bool,
}

fn classification_node(
    id: usize,
    n: usize,
    group: Group<'_>,
    separation: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeDataset> {
    let offset = separation / 2f64.sqrt();
    let samples = (0..n)
        .map(|_| {
            let y = if rng.random::<f64>() < group.probs[1] {
                1.0
            } else {
                -1.0
            };
            let mut x0 = y * offset + normal(rng);
            let mut x1 = y * offset + normal(rng);
            if group.rotate {
                (x0, x1) = (-x1, x0);
            }
            let label = if group.flip { -y } else { y };
            SamplePoint::new(vec![x0, x1, 1.0], label)
        })
        .collect();
    NodeDataset::new(id, samples)
}

/// Binary classification with Gaussian class conditionals in the plane and
/// a bias feature. The first `j` nodes share the validation distribution;
/// the others differ by class priors, flipped labels, rotated features, or a
/// combination. The model fixes the validation-optimal parameter, found on
/// the held-out sample.
pub fn gen_hetero_classification(spec: &TaskSpec, model: &dyn LossModel) -> Result<Task> {
    spec.validate()?;
    if spec.j == 0 || spec.mc_samples == 0 {
        return Err(Error::invalid("need j >= 1 and mc_samples >= 1"));
    }
    check_probs(&spec.minority_class_probs, "minority_class_probs")?;
    check_probs(&spec.majority_class_probs, "majority_class_probs")?;
    let minority = Group {
        probs: &spec.minority_class_probs,
        flip: false,
        rotate: false,
    };
    let majority = Group {
        probs: &spec.majority_class_probs,
        flip: spec.flip,
        rotate: spec.rotate,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nodes = (0..spec.k)
        .map(|k| {
            let g = if k < spec.j { minority } else { majority };
            classification_node(k + 1, spec.n_train, g, spec.separation, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let validation = classification_node(0, spec.n_valid, minority, spec.separation, &mut rng)?;
    let test = classification_node(0, spec.n_test, minority, spec.separation, &mut rng)?;
    let heldout = classification_node(0, spec.mc_samples, minority, spec.separation, &mut rng)?;
    let homogeneous =
        !spec.flip && !spec.rotate && spec.minority_class_probs == spec.majority_class_probs;
    let identical = if homogeneous {
        (0..spec.k).collect()
    } else {
        (0..spec.j).collect()
    };
    let pop = FederatedDataset::new(
        vec![NodeDataset::new(1, heldout.samples().to_vec())?],
        heldout.clone(),
    )?;
    let theta_star = solve_inner_dense(model, &pop, &[1.0])?.into_inner();
    Ok(Task {
        fed: FederatedDataset::new(nodes, validation)?,
        truth: GroundTruth {
            identical,
            theta_star,
            population: Population::MonteCarlo(heldout),
            test,
        },
    })
}

/// Writes every node (validation as node 0) as
/// `node_id, feature_0, ..., target` rows.
pub fn write_csv<W: Write>(fed: &FederatedDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["node_id".to_string()];
    header.extend((0..fed.dim()).map(|i| format!("feature_{i}")));
    header.push("target".into());
    w.write_record(&header)?;
    let all = std::iter::once(fed.validation()).chain(fed.nodes().iter());
    for node in all {
        write_node_rows(&mut w, node)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a single dataset in the same layout as [`write_csv`].
pub fn write_node_csv<W: Write>(node: &NodeDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["node_id".to_string()];
    header.extend((0..node.dim()).map(|i| format!("feature_{i}")));
    header.push("target".into());
    w.write_record(&header)?;
    write_node_rows(&mut w, node)?;
    w.flush()?;
    Ok(())
}

fn write_node_rows<W: Write>(w: &mut csv::Writer<W>, node: &NodeDataset) -> Result<()> {
    for z in node.samples() {
        let mut row = vec![node.node_id().to_string()];
        row.extend(z.features.iter().map(|v| format_float(*v)));
        row.push(format_float(z.target));
        w.write_record(&row)?;
    }
    Ok(())
}

/// Round-trip exact decimal representation with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{QuadraticRegressionLoss, RegularizedLogisticLoss};
    use crate::model::empirical_loss;

    fn mean(node: &NodeDataset) -> f64 {
        node.samples().iter().map(|z| z.target).sum::<f64>() / node.len() as f64
    }

    #[test]
    fn mean_estimation_concentration() {
        let spec = TaskSpec::mean_estimation(1.0, 10_000, 1000, 4);
        let t = gen_mean_estimation(1.0, &spec).unwrap();
        let m1 = mean(t.fed.node(0));
        assert!((0.96..=1.04).contains(&m1), "{m1}");
        assert!((mean(t.fed.node(1)) + 1.0).abs() < 0.04);
        let model = QuadraticRegressionLoss::new(0.0).unwrap();
        let gap = crate::metrics::generalization_gap(&model, &t.truth, &[1.0]).unwrap();
        assert!((gap.gap - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mean_estimation_degenerate() {
        let n = 2000;
        let spec = TaskSpec::mean_estimation(0.0, n, n, 1);
        let t = gen_mean_estimation(0.0, &spec).unwrap();
        for node in t.fed.nodes() {
            assert!(mean(node).abs() < 4.0 / (n as f64).sqrt());
        }
        assert_eq!(t.truth.identical, vec![0, 1]);
        let bad = TaskSpec { k: 3, ..spec };
        assert!(gen_mean_estimation(0.0, &bad).is_err());
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = TaskSpec {
            k: 4,
            j: 2,
            n_train: 20,
            n_valid: 10,
            n_test: 10,
            seed: 99,
            ..TaskSpec::default()
        };
        let csv_of = |t: &Task| {
            let mut buf = Vec::new();
            write_csv(&t.fed, &mut buf).unwrap();
            buf
        };
        let a = gen_linear_regression(&spec).unwrap();
        let b = gen_linear_regression(&spec).unwrap();
        assert_eq!(csv_of(&a), csv_of(&b));
        let c = gen_linear_regression(&TaskSpec { seed: 100, ..spec }).unwrap();
        assert_ne!(csv_of(&a), csv_of(&c));
    }

    #[test]
    fn regression_closed_form() {
        let spec = TaskSpec {
            k: 2,
            j: 0,
            dim: 2,
            n_train: 10_000,
            n_valid: 10_000,
            node_optima: Some(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]),
            validation_optimum: Some(vec![0.0, 0.0]),
            noise: 0.5,
            seed: 3,
            ..TaskSpec::default()
        };
        let t = gen_linear_regression(&spec).unwrap();
        let Population::Quadratic(q) = &t.truth.population else {
            panic!("closed form expected");
        };
        for w1 in [0.0f64, 0.3, 0.5, 0.9] {
            let w = [w1, 1.0 - w1];
            let expected = 0.5 * (w[0] - w[1]).powi(2) + 0.5 * 0.25;
            assert!((q.outer_value(&w) - expected).abs() < 1e-12);
            let model = QuadraticRegressionLoss::new(0.0).unwrap();
            let emp = empirical_loss(&model, t.fed.validation(), &q.theta_of(&w)).unwrap();
            assert!((emp - expected).abs() < 0.05);
        }
    }

    #[test]
    fn singular_covariance_rejected() {
        let spec = TaskSpec {
            dim: 2,
            covariance: Some(vec![vec![1.0, 1.0], vec![1.0, 1.0]]),
            ..TaskSpec::default()
        };
        assert!(gen_linear_regression(&spec).is_err());
    }

    #[test]
    fn classification_identical_group_matches_validation() {
        let model = RegularizedLogisticLoss::new(0.01).unwrap();
        let spec = TaskSpec {
            kind: TaskKind::HeteroClassification,
            k: 4,
            j: 2,
            n_train: 4000,
            n_valid: 4000,
            flip: true,
            mc_samples: 2000,
            ..TaskSpec::default()
        };
        let t = gen_hetero_classification(&spec, &model).unwrap();
        assert_eq!(t.truth.identical, vec![0, 1]);
        let theta = [0.3, -0.7, 0.2];
        let l0 = empirical_loss(&model, t.fed.validation(), &theta).unwrap();
        let l1 = empirical_loss(&model, t.fed.node(0), &theta).unwrap();
        assert!((l0 - l1).abs() < 5.0 / 4000f64.sqrt());
        let bad = TaskSpec {
            minority_class_probs: vec![0.7, 0.7],
            ..spec
        };
        assert!(gen_hetero_classification(&bad, &model).is_err());
    }

    #[test]
    fn csv_layout() {
        let spec = TaskSpec::mean_estimation(1.0, 2, 1, 0);
        let t = gen_mean_estimation(1.0, &spec).unwrap();
        let mut buf = Vec::new();
        write_csv(&t.fed, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "node_id,feature_0,target");
        assert_eq!(lines.len(), 1 + 1 + 2 + 2);
        assert!(lines[1].starts_with("0,"));
        let v: f64 = lines[2].split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(v, t.fed.node(0).samples()[0].target);
    }
}
