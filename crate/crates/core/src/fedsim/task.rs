//! Synthetic non-IID tasks: a frozen base weight, a shared teacher shift,
//! and per-cluster perturbations.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    RegressionTeacher,
    ClusteredClassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub input_dim: usize,
    /// Output width; the number of classes for classification.
    pub output_dim: usize,
    pub clusters: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub noise_std: f64,
    /// Rank and size of the shift from the frozen base to the shared teacher.
    pub shift_rank: usize,
    pub shift_scale: f64,
    /// Rank and size of each cluster's deviation from the shared teacher.
    pub perturbation_rank: usize,
    pub perturbation_scale: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, input_dim: usize, output_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            output_dim,
            clusters: 2,
            train_samples: 2000,
            test_samples: 500,
            noise_std: 0.0,
            shift_rank: 4,
            shift_scale: 1.0,
            perturbation_rank: 4,
            perturbation_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("input_dim and output_dim must be ≥ 1".into());
        }
        if self.kind == TaskKind::ClusteredClassification && self.output_dim < 2 {
            return bad("classification needs output_dim ≥ 2 classes".into());
        }
        if self.clusters == 0 {
            return bad("clusters must be ≥ 1".into());
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return bad("train_samples and test_samples must be ≥ 1".into());
        }
        let max_rank = self.input_dim.min(self.output_dim);
        if self.shift_rank > max_rank || self.perturbation_rank > max_rank {
            return bad(format!(
                "shift_rank and perturbation_rank must be ≤ {max_rank}"
            ));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("shift_scale", self.shift_scale),
            ("perturbation_scale", self.perturbation_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and ≥ 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub output_dim: usize,
    /// The frozen pretrained weight the student starts from.
    pub base: DenseMatrix,
    pub teacher: DenseMatrix,
    pub perturbations: Vec<DenseMatrix>,
    pub noise_std: f64,
}

impl SyntheticTask {
    pub fn num_classes(&self) -> Option<usize> {
        (self.kind == TaskKind::ClusteredClassification).then_some(self.output_dim)
    }

    /// Teacher of one cluster.
    pub fn cluster_teacher(&self, cluster: usize) -> DenseMatrix {
        self.teacher
            .add(&self.perturbations[cluster])
            .expect("same shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression(DenseMatrix),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n×d` inputs, one sample per row.
    pub x: DenseMatrix,
    pub targets: Targets,
    pub cluster: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: SyntheticTask,
    pub train: Dataset,
    /// Global test set drawn from the full cluster mixture.
    pub test: Dataset,
}

fn gaussian<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

/// `scale·G₁·G₂/√(rank·d)`: each output of `L·x` has variance `scale²` for
/// standard normal `x`.
fn low_rank<R: Rng>(k: usize, d: usize, rank: usize, scale: f64, rng: &mut R) -> DenseMatrix {
    if rank == 0 || scale == 0.0 {
        return DenseMatrix::zeros(k, d);
    }
    let g1 = gaussian(k, rank, 1.0, rng);
    let g2 = gaussian(rank, d, 1.0, rng);
    g1.matmul(&g2)
        .expect("inner dims agree")
        .scaled(scale / ((rank * d) as f64).sqrt())
}

fn sample<R: Rng>(
    task: &SyntheticTask,
    teachers: &[DenseMatrix],
    n: usize,
    rng: &mut R,
) -> Dataset {
    let (k, d) = (task.output_dim, task.input_dim);
    let clusters = teachers.len();
    let cluster: Vec<usize> = (0..n).map(|_| rng.random_range(0..clusters)).collect();
    let x = gaussian(n, d, 1.0, rng);
    let mut out = DenseMatrix::zeros(n, k);
    for i in 0..n {
        let t = &teachers[cluster[i]];
        let xi = x.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = crate::matrix::dot(t.row(j), xi)
                + task.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let targets = match task.kind {
        TaskKind::RegressionTeacher => Targets::Regression(out),
        TaskKind::ClusteredClassification => {
            Targets::Classes((0..n).map(|i| argmax(out.row(i))).collect())
        }
    };
    Dataset {
        x,
        targets,
        cluster,
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Builds the task and draws the training pool and the global test set.
/// Regression targets are `(teacher + P_c)·x + noise`; class labels are the
/// argmax of the same (noisy) logits. With two clusters the perturbations are
/// opposite, `P₁ = −P₀`.
pub fn generate_task(spec: &TaskSpec, seed: u64) -> Result<TaskData> {
    spec.validate()?;
    let (k, d) = (spec.output_dim, spec.input_dim);
    let mut rng = rng::stream(seed, Purpose::Task, &[0]);
    let base = gaussian(k, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let teacher = base
        .add(&low_rank(k, d, spec.shift_rank, spec.shift_scale, &mut rng))
        .expect("same shape");
    let perturbations: Vec<DenseMatrix> = if spec.clusters == 2 {
        let p = low_rank(
            k,
            d,
            spec.perturbation_rank,
            spec.perturbation_scale,
            &mut rng,
        );
        let neg = p.scaled(-1.0);
        vec![p, neg]
    } else {
        (0..spec.clusters)
            .map(|_| {
                low_rank(
                    k,
                    d,
                    spec.perturbation_rank,
                    spec.perturbation_scale,
                    &mut rng,
                )
            })
            .collect()
    };
    let task = SyntheticTask {
        kind: spec.kind,
        input_dim: d,
        output_dim: k,
        base,
        teacher,
        perturbations,
        noise_std: spec.noise_std,
    };
    let teachers: Vec<DenseMatrix> = (0..spec.clusters)
        .map(|c| task.cluster_teacher(c))
        .collect();
    let train = sample(
        &task,
        &teachers,
        spec.train_samples,
        &mut rng::stream(seed, Purpose::Task, &[1]),
    );
    let test = sample(
        &task,
        &teachers,
        spec.test_samples,
        &mut rng::stream(seed, Purpose::Task, &[2]),
    );
    Ok(TaskData { task, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regression(noise: f64, clusters: usize) -> TaskSpec {
        TaskSpec {
            noise_std: noise,
            clusters,
            train_samples: 200,
            test_samples: 50,
            shift_rank: 2,
            perturbation_rank: 2,
            ..TaskSpec::new(TaskKind::RegressionTeacher, 6, 3)
        }
    }

    #[test]
    fn noiseless_single_cluster_is_exactly_linear() {
        let data = generate_task(&regression(0.0, 1), 3).unwrap();
        let Targets::Regression(y) = &data.train.targets else {
            panic!()
        };
        let pred = data
            .train
            .x
            .matmul_nt(&data.task.cluster_teacher(0))
            .unwrap();
        assert!(pred.max_abs_diff(y).unwrap() < 1e-12);
    }

    #[test]
    fn opposite_clusters_disagree() {
        let data = generate_task(&regression(0.0, 2), 4).unwrap();
        let (t0, t1) = (data.task.cluster_teacher(0), data.task.cluster_teacher(1));
        assert!(t0.distance(&t1).unwrap() > 0.1);
        let sum = data.task.perturbations[0]
            .add(&data.task.perturbations[1])
            .unwrap();
        assert!(sum.is_zero());
        assert!(data.train.cluster.contains(&0) && data.train.cluster.contains(&1));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = TaskSpec {
            train_samples: 100,
            test_samples: 20,
            ..TaskSpec::new(TaskKind::ClusteredClassification, 8, 4)
        };
        let a = generate_task(&spec, 9).unwrap();
        let b = generate_task(&spec, 9).unwrap();
        let c = generate_task(&spec, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, c.train);
        let Targets::Classes(labels) = &a.train.targets else {
            panic!()
        };
        assert!(labels.iter().all(|&l| l < 4));
    }

    #[test]
    fn invalid_specs() {
        let mut s = regression(0.0, 2);
        s.input_dim = 0;
        assert!(matches!(generate_task(&s, 1), Err(Error::InvalidSpec(_))));
        let mut s = regression(-1.0, 2);
        s.noise_std = -1.0;
        assert!(generate_task(&s, 1).is_err());
        let s = TaskSpec::new(TaskKind::ClusteredClassification, 4, 1);
        assert!(generate_task(&s, 1).is_err());
    }
}
