//! Mini-batch training with adaptive moments and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::{backward, forward};
use super::{data_loss, Arch, Mode, Network, Sample, TrainConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch} (train {train_loss}, val {val_loss})")]
    NonFiniteLoss {
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
    },
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error(transparent)]
    Neural(#[from] super::NeuralError),
}

/// Train/validation views over prepared samples.
pub struct DatasetView<'a> {
    pub train: &'a [Sample],
    pub validation: &'a [Sample],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// A trained model with its per-epoch loss history. The parameters are
/// the ones from the best validation epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub format_version: u32,
    pub network: Network,
    pub log: Vec<TrainLogEntry>,
    pub best_epoch: usize,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Adaptive-moment estimation over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for j in 0..params.len() {
            self.m[j] = self.beta1 * self.m[j] + (1.0 - self.beta1) * grad[j];
            self.v[j] = self.beta2 * self.v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
            let m_hat = self.m[j] / b1t;
            let v_hat = self.v[j] / b2t;
            params[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Mean data loss over a sample set in eval mode (no penalty term).
pub fn evaluation_loss(net: &Network, samples: &[Sample]) -> Result<f64, TrainError> {
    let mut rng = super::no_dropout_rng();
    let mut total = 0.0;
    for s in samples {
        let cache = forward(net, &s.text, &s.cov, Mode::Eval, 0.0, &mut rng);
        total += data_loss(&cache.output, &s.target, net.arch.head)?;
    }
    Ok(total / samples.len() as f64)
}

/// Trains a freshly initialized model, stopping when the validation loss
/// has not improved for more than `patience` epochs, and returns the
/// best-validation parameters with the full loss log.
pub fn train(arch: &Arch, view: &DatasetView<'_>, cfg: &TrainConfig) -> Result<FittedModel, TrainError> {
    if view.train.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if view.validation.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }

    let mut net = Network::init(arch, cfg.seed);
    let mut adam = Adam::new(net.n_params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));

    let mut best = net.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut log = Vec::new();

    let mut order: Vec<usize> = (0..view.train.len()).collect();
    let mut batch: Vec<Sample> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| view.train[i].clone()));
            let (batch_loss, grads) = backward(
                &net,
                &batch,
                cfg.l2_strength,
                cfg.dropout_rate,
                Mode::Train,
                &mut dropout_rng,
            )?;
            epoch_loss += batch_loss;
            n_batches += 1;
            let mut params = net.flatten();
            adam.step(&mut params, &grads.flatten(), cfg.learning_rate);
            net.assign_flat(&params);
        }
        let train_loss = epoch_loss / n_batches as f64;
        let val_loss = evaluation_loss(&net, view.validation)?;
        log.push(TrainLogEntry {
            epoch,
            train_loss,
            val_loss,
        });
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                train_loss,
                val_loss,
            });
        }
        if val_loss < best_val {
            best_val = val_loss;
            best = net.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }

    Ok(FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        network: best,
        log,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Head, Target, TextInput};
    use ndarray::Array1;
    use rand::Rng;

    fn separable_samples(n: usize, seed: u64) -> Vec<Sample> {
        // Two text features; class is decided by their sum with margin.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let class = rng.gen_range(0..2usize);
                let offset = if class == 1 { 1.5 } else { -1.5 };
                let x0 = offset + rng.gen_range(-0.5..0.5);
                let x1 = offset + rng.gen_range(-0.5..0.5);
                Sample {
                    text: TextInput::Vector(Array1::from(vec![x0, x1])),
                    cov: Array1::from(vec![0.0]),
                    target: Target::Class(class),
                }
            })
            .collect()
    }

    fn small_arch(head: Head) -> Arch {
        Arch {
            encoder_sizes: (8, 8),
            cov_hidden: 2,
            dense_sizes: if head == Head::Propensity {
                vec![8]
            } else {
                vec![8, 8, 4]
            },
            head,
            ..Arch::mlp_propensity(2, 1)
        }
    }

    #[test]
    fn separable_propensity_task_reaches_high_accuracy() {
        let data = separable_samples(200, 3);
        let (train, val) = data.split_at(160);
        let cfg = TrainConfig {
            dropout_rate: 0.0,
            max_epochs: 60,
            patience: 10,
            learning_rate: 5e-3,
            l2_strength: 1e-5,
            ..TrainConfig::default()
        };
        let fitted = train_model(&small_arch(Head::Propensity), train, val, &cfg);
        let correct = val
            .iter()
            .filter(|s| {
                let p = fitted.network.predict(&s.text, &s.cov);
                let pred = usize::from(p[1] > 0.5);
                matches!(s.target, Target::Class(c) if c == pred)
            })
            .count();
        let accuracy = correct as f64 / val.len() as f64;
        assert!(accuracy >= 0.95, "validation accuracy {accuracy}");
    }

    #[test]
    fn relu_function_is_learned_to_low_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Sample> = (0..500)
            .map(|_| {
                let x: f64 = rng.gen_range(-2.0..2.0);
                Sample {
                    text: TextInput::Vector(Array1::from(vec![x, 0.0])),
                    cov: Array1::from(vec![0.0]),
                    target: Target::Value(x.max(0.0)),
                }
            })
            .collect();
        let (train, val) = data.split_at(400);
        let cfg = TrainConfig {
            dropout_rate: 0.0,
            max_epochs: 300,
            patience: 40,
            learning_rate: 5e-3,
            l2_strength: 0.0,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let fitted = train_model(&small_arch(Head::Outcome), train, val, &cfg);
        let mse: f64 = val
            .iter()
            .map(|s| {
                let p = fitted.network.predict(&s.text, &s.cov)[0];
                let Target::Value(y) = s.target else { unreachable!() };
                (p - y).powi(2)
            })
            .sum::<f64>()
            / val.len() as f64;
        assert!(mse.sqrt() < 0.1, "validation rmse {}", mse.sqrt());
    }

    #[test]
    fn patience_zero_runs_one_epoch_past_best() {
        let data = separable_samples(60, 5);
        let (train, val) = data.split_at(40);
        let cfg = TrainConfig {
            dropout_rate: 0.0,
            max_epochs: 100,
            patience: 0,
            ..TrainConfig::default()
        };
        let fitted = train_model(&small_arch(Head::Propensity), train, val, &cfg);
        let last = fitted.log.last().unwrap().epoch;
        if last < cfg.max_epochs - 1 {
            assert_eq!(last, fitted.best_epoch + 1);
        }
    }

    #[test]
    fn training_is_deterministic_without_dropout() {
        let data = separable_samples(80, 11);
        let (train, val) = data.split_at(60);
        let cfg = TrainConfig {
            dropout_rate: 0.0,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let a = train_model(&small_arch(Head::Propensity), train, val, &cfg);
        let b = train_model(&small_arch(Head::Propensity), train, val, &cfg);
        assert_eq!(a.network.flatten(), b.network.flatten());
        assert_eq!(a.log.len(), b.log.len());
    }

    #[test]
    fn loss_decreases_on_toy_problem() {
        let data = separable_samples(120, 21);
        let (train, val) = data.split_at(90);
        let cfg = TrainConfig {
            dropout_rate: 0.0,
            max_epochs: 30,
            patience: 30,
            ..TrainConfig::default()
        };
        let fitted = train_model(&small_arch(Head::Propensity), train, val, &cfg);
        let first = fitted.log.first().unwrap().train_loss;
        let last = fitted.log.last().unwrap().train_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    fn train_model(arch: &Arch, train_set: &[Sample], val: &[Sample], cfg: &TrainConfig) -> FittedModel {
        train(
            arch,
            &DatasetView {
                train: train_set,
                validation: val,
            },
            cfg,
        )
        .unwrap()
    }
}
