//! Local mini-batch SGD on the LoRA factors and model evaluation.
//!
//! A model is an [`AdapterSet`] applied as a chain of linear layers,
//! `y = W_L ⋯ W₁·x` with `W_i = W₀ + residual + s·B·A`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsim::task::{argmax, Dataset, Targets};
use crate::lora::{effective_weight, lora_gradients, AdapterSet};
use crate::matrix::DenseMatrix;
use crate::rng::{self, Purpose};

/// How much local work a client does per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalWork {
    /// Full passes over the client's shuffled training data.
    Epochs(usize),
    /// Mini-batch steps, reshuffling whenever the data runs out.
    Steps(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub work: LocalWork,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    None,
    /// `A` stays at its broadcast value.
    FreezeA,
    /// `B` never leaves the client; training itself is unconstrained.
    KeepLocalB,
}

/// Identifies one client's local run; keys its shuffling stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainJob {
    pub seed: u64,
    pub round: usize,
    pub client: usize,
}

/// Effective weights of every layer.
pub fn effective_weights(model: &AdapterSet) -> Result<Vec<DenseMatrix>> {
    model
        .layers()
        .iter()
        .map(|l| effective_weight(&l.frozen, &l.pair))
        .collect()
}

/// Chain forward pass; returns every layer input followed by the output.
fn forward(weights: &[DenseMatrix], x: DenseMatrix) -> Result<Vec<DenseMatrix>> {
    let mut acts = Vec::with_capacity(weights.len() + 1);
    acts.push(x);
    for w in weights {
        let next = acts.last().expect("non-empty").matmul_nt(w)?;
        acts.push(next);
    }
    Ok(acts)
}

pub fn predict(model: &AdapterSet, x: &DenseMatrix) -> Result<DenseMatrix> {
    let weights = effective_weights(model)?;
    Ok(forward(&weights, x.clone())?.pop().expect("output"))
}

/// Mean loss over the batch and its gradient with respect to the outputs.
/// Regression uses `½‖ŷ − y‖²`, classification softmax cross-entropy.
fn loss_and_grad(out: &DenseMatrix, data: &Dataset, idx: &[usize]) -> (f64, DenseMatrix) {
    let n = idx.len() as f64;
    let mut grad = out.clone();
    let mut loss = 0.0;
    match &data.targets {
        Targets::Regression(y) => {
            for (row, &i) in idx.iter().enumerate() {
                for (g, t) in grad.row_mut(row).iter_mut().zip(y.row(i)) {
                    *g -= t;
                    loss += 0.5 * *g * *g;
                    *g /= n;
                }
            }
        }
        Targets::Classes(labels) => {
            for (row, &i) in idx.iter().enumerate() {
                let g = grad.row_mut(row);
                let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in g.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                let label = labels[i];
                loss += z.ln() - (out.row(row)[label] - max);
                for v in g.iter_mut() {
                    *v /= z * n;
                }
                g[label] -= 1.0 / n;
            }
        }
    }
    (loss / n, grad)
}

fn sgd_step(
    model: &mut AdapterSet,
    data: &Dataset,
    batch: &[usize],
    lr: f64,
    constraint: Constraint,
) -> Result<f64> {
    let weights = effective_weights(model)?;
    let acts = forward(&weights, data.x.select_rows(batch))?;
    let (loss, mut gy) = loss_and_grad(acts.last().expect("output"), data, batch);
    if lr == 0.0 {
        return Ok(loss);
    }
    for (i, layer) in model.layers_mut().iter_mut().enumerate().rev() {
        let (ga, gb) = lora_gradients(&layer.frozen, &layer.pair, &acts[i], &gy)?;
        if i > 0 {
            gy = gy.matmul(&weights[i])?;
        }
        layer.pair.b_mut().axpy(-lr, &gb)?;
        if constraint != Constraint::FreezeA {
            layer.pair.a_mut().axpy(-lr, &ga)?;
        }
    }
    Ok(loss)
}

/// Runs local SGD on `model` over the samples `indices` of `data` and
/// returns the mean training loss over all local steps.
pub fn local_train(
    data: &Dataset,
    indices: &[usize],
    model: &mut AdapterSet,
    config: &LocalTrainConfig,
    constraint: Constraint,
    job: TrainJob,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InsufficientSamples(format!(
            "client {} has no training data",
            job.client
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidSpec("batch_size must be ≥ 1".into()));
    }
    let diverged = Error::DivergenceDetected {
        client: job.client,
        round: job.round,
    };
    let mut rng = rng::stream(
        job.seed,
        Purpose::LocalTrain,
        &[job.round as u64, job.client as u64],
    );
    let mut order = indices.to_vec();
    let batch = config.batch_size.min(order.len());
    let mut losses = Vec::new();
    let mut step = |model: &mut AdapterSet, b: &[usize]| -> Result<()> {
        let loss = sgd_step(model, data, b, config.learning_rate, constraint)?;
        if !loss.is_finite() {
            return Err(Error::DivergenceDetected {
                client: job.client,
                round: job.round,
            });
        }
        losses.push(loss);
        Ok(())
    };
    match config.work {
        LocalWork::Epochs(epochs) => {
            for _ in 0..epochs {
                order.shuffle(&mut rng);
                for b in order.chunks(batch) {
                    step(model, b)?;
                }
            }
        }
        LocalWork::Steps(steps) => {
            let mut pos = order.len();
            for _ in 0..steps {
                if pos + batch > order.len() {
                    order.shuffle(&mut rng);
                    pos = 0;
                }
                step(model, &order[pos..pos + batch])?;
                pos += batch;
            }
        }
    }
    let params_ok = model
        .layers()
        .iter()
        .all(|l| l.pair.a().is_finite() && l.pair.b().is_finite());
    if !params_ok {
        return Err(diverged);
    }
    Ok(if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    })
}

/// Accuracy for classification, negative mean squared error for regression;
/// higher is better for both.
pub fn metric(model: &AdapterSet, data: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyTestSet("no samples to evaluate".into()));
    }
    let out = predict(model, &data.x.select_rows(indices))?;
    let n = indices.len() as f64;
    Ok(match &data.targets {
        Targets::Regression(y) => {
            let mut sq = 0.0;
            for (row, &i) in indices.iter().enumerate() {
                for (a, b) in out.row(row).iter().zip(y.row(i)) {
                    sq += (a - b) * (a - b);
                }
            }
            -sq / (n * out.cols() as f64)
        }
        Targets::Classes(labels) => {
            let hits = indices
                .iter()
                .enumerate()
                .filter(|(row, &i)| argmax(out.row(*row)) == labels[i])
                .count();
            hits as f64 / n
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsim::task::{generate_task, TaskKind, TaskSpec};
    use crate::lora::{init_lora, AdapterLayer, FrozenLayer};

    fn model(base: &DenseMatrix, r: usize, seed: u64) -> AdapterSet {
        let (k, d) = base.shape();
        AdapterSet::new(vec![AdapterLayer {
            id: "linear".into(),
            frozen: FrozenLayer::new(base.clone()),
            pair: init_lora(k, d, r, r as f64, seed).unwrap(),
        }])
        .unwrap()
    }

    fn job() -> TrainJob {
        TrainJob {
            seed: 1,
            round: 0,
            client: 0,
        }
    }

    fn regression(clusters: usize) -> TaskSpec {
        TaskSpec {
            clusters,
            train_samples: 256,
            test_samples: 64,
            shift_rank: 2,
            perturbation_rank: 2,
            ..TaskSpec::new(TaskKind::RegressionTeacher, 8, 6)
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let data = generate_task(&regression(1), 2).unwrap();
        let mut m = model(&data.task.base, 2, 3);
        m.layers_mut()[0].pair.b_mut().as_mut_slice()[0] = 0.3;
        let before = m.clone();
        let cfg = LocalTrainConfig {
            work: LocalWork::Epochs(2),
            batch_size: 16,
            learning_rate: 0.0,
        };
        let idx: Vec<usize> = (0..100).collect();
        local_train(&data.train, &idx, &mut m, &cfg, Constraint::None, job()).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn freeze_a_keeps_a_bitwise() {
        let data = generate_task(&regression(2), 2).unwrap();
        let mut m = model(&data.task.base, 2, 3);
        let a0 = m.layers()[0].pair.a().clone();
        let cfg = LocalTrainConfig {
            work: LocalWork::Steps(20),
            batch_size: 8,
            learning_rate: 0.05,
        };
        let idx: Vec<usize> = (0..256).collect();
        local_train(&data.train, &idx, &mut m, &cfg, Constraint::FreezeA, job()).unwrap();
        assert_eq!(m.layers()[0].pair.a(), &a0);
        assert!(!m.layers()[0].pair.b().is_zero());
    }

    #[test]
    fn realizable_regression_reaches_tiny_loss() {
        let data = generate_task(&regression(1), 5).unwrap();
        // rank-2 shift plus a rank-2 cluster perturbation
        let mut m = model(&data.task.base, 6, 3);
        let cfg = LocalTrainConfig {
            work: LocalWork::Epochs(300),
            batch_size: 32,
            learning_rate: 0.1,
        };
        let idx: Vec<usize> = (0..256).collect();
        local_train(&data.train, &idx, &mut m, &cfg, Constraint::None, job()).unwrap();
        let mse = -metric(&m, &data.train, &idx).unwrap();
        assert!(0.5 * mse * 6.0 <= 1e-4, "loss {}", 0.5 * mse * 6.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for kind in [
            TaskKind::RegressionTeacher,
            TaskKind::ClusteredClassification,
        ] {
            let spec = TaskSpec {
                train_samples: 12,
                test_samples: 4,
                shift_rank: 2,
                perturbation_rank: 2,
                ..TaskSpec::new(kind, 4, 3)
            };
            let data = generate_task(&spec, 8).unwrap();
            let mut m = model(&data.task.base, 2, 3);
            m.layers_mut()[0]
                .pair
                .b_mut()
                .as_mut_slice()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = 0.1 * (i as f64 - 2.0));
            let idx: Vec<usize> = (0..12).collect();
            let loss_at = |m: &AdapterSet| {
                let w = effective_weights(m).unwrap();
                let acts = forward(&w, data.train.x.select_rows(&idx)).unwrap();
                loss_and_grad(acts.last().unwrap(), &data.train, &idx).0
            };
            let w = effective_weights(&m).unwrap();
            let acts = forward(&w, data.train.x.select_rows(&idx)).unwrap();
            let (_, gy) = loss_and_grad(&acts[1], &data.train, &idx);
            let l = &m.layers()[0];
            let (ga, gb) = lora_gradients(&l.frozen, &l.pair, &acts[0], &gy).unwrap();
            let h = 1e-6;
            for j in 0..ga.as_slice().len() {
                let mut p = m.clone();
                p.layers_mut()[0].pair.a_mut().as_mut_slice()[j] += h;
                let mut q = m.clone();
                q.layers_mut()[0].pair.a_mut().as_mut_slice()[j] -= h;
                let fd = (loss_at(&p) - loss_at(&q)) / (2.0 * h);
                assert!((fd - ga.as_slice()[j]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
            for j in 0..gb.as_slice().len() {
                let mut p = m.clone();
                p.layers_mut()[0].pair.b_mut().as_mut_slice()[j] += h;
                let mut q = m.clone();
                q.layers_mut()[0].pair.b_mut().as_mut_slice()[j] -= h;
                let fd = (loss_at(&p) - loss_at(&q)) / (2.0 * h);
                assert!((fd - gb.as_slice()[j]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn exploding_learning_rate_is_detected() {
        let data = generate_task(&regression(2), 2).unwrap();
        let mut m = model(&data.task.base, 2, 3);
        let cfg = LocalTrainConfig {
            work: LocalWork::Steps(200),
            batch_size: 32,
            learning_rate: 1e6,
        };
        let idx: Vec<usize> = (0..256).collect();
        let job = TrainJob {
            seed: 1,
            round: 4,
            client: 7,
        };
        let err = local_train(&data.train, &idx, &mut m, &cfg, Constraint::None, job).unwrap_err();
        assert!(matches!(
            err,
            Error::DivergenceDetected {
                client: 7,
                round: 4
            }
        ));
    }

    #[test]
    fn deterministic_given_job() {
        let data = generate_task(&regression(2), 2).unwrap();
        let cfg = LocalTrainConfig {
            work: LocalWork::Epochs(1),
            batch_size: 10,
            learning_rate: 0.05,
        };
        let idx: Vec<usize> = (0..100).collect();
        let run = || {
            let mut m = model(&data.task.base, 2, 3);
            local_train(&data.train, &idx, &mut m, &cfg, Constraint::None, job()).unwrap();
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn metrics() {
        let data = generate_task(&regression(1), 2).unwrap();
        let mut m = model(&data.task.base, 2, 3);
        m.layers_mut()[0].frozen.residual =
            data.task.cluster_teacher(0).sub(&data.task.base).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        assert!(metric(&m, &data.train, &idx).unwrap().abs() < 1e-20);
        assert!(matches!(
            metric(&m, &data.train, &[]),
            Err(Error::EmptyTestSet(_))
        ));

        let spec = TaskSpec {
            shift_rank: 2,
            perturbation_rank: 2,
            ..TaskSpec::new(TaskKind::ClusteredClassification, 5, 3)
        };
        let data = generate_task(&spec, 1).unwrap();
        let mut m = model(&data.task.base, 2, 3);
        m.layers_mut()[0].frozen.residual =
            data.task.cluster_teacher(0).sub(&data.task.base).unwrap();
        let c0: Vec<usize> = (0..200).filter(|&i| data.train.cluster[i] == 0).collect();
        assert_eq!(metric(&m, &data.train, &c0).unwrap(), 1.0);
    }
}
