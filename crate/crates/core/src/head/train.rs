use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{init_head, loss_and_grad, predict_proba, DropoutMask, Example, HeadParams};
use crate::backbone::FeatureStore;
use crate::dataset::{one_hot, DatasetManifest, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 15,
            dropout_rate: 0.3,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: Optimizer::adam(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if let Optimizer::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) {
                return Err(Error::Config(format!("invalid adam constants {:?}", self.optimizer)));
            }
        }
        Ok(())
    }
}

/// Per-parameter optimizer state.
enum Stepper {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Stepper {
    fn new(optimizer: Optimizer, params: &HeadParams) -> Self {
        match optimizer {
            Optimizer::Sgd => Stepper::Sgd,
            Optimizer::Adam { beta1, beta2, epsilon } => {
                let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
                Stepper::Adam {
                    beta1,
                    beta2,
                    epsilon,
                    step: 0,
                    m: zeros(),
                    v: zeros(),
                }
            }
        }
    }

    fn apply(&mut self, params: &mut HeadParams, grads: &HeadParams, lr: f64) {
        match self {
            Stepper::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (w, dw) in p.iter_mut().zip(g) {
                        *w -= lr * dw;
                    }
                }
            }
            Stepper::Adam {
                beta1,
                beta2,
                epsilon,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (t, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
                    for i in 0..p.len() {
                        m[t][i] = *beta1 * m[t][i] + (1.0 - *beta1) * g[i];
                        v[t][i] = *beta2 * v[t][i] + (1.0 - *beta2) * g[i] * g[i];
                        let m_hat = m[t][i] / c1;
                        let v_hat = v[t][i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + *epsilon);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: HeadParams,
    /// Accuracy over the training samples (dropout off) after each epoch.
    pub epoch_accuracy: Vec<f64>,
}

/// Mini-batch training over labeled feature vectors.
///
/// Sample order is reshuffled every epoch and every sample gets a fresh
/// dropout mask per step. Initialization, shuffling and dropout each draw
/// from their own stream derived from `config.seed`.
pub fn fit(
    samples: &[(&[f32], usize)],
    feature_dim: usize,
    num_classes: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let targets: Vec<Vec<f32>> = (0..num_classes)
        .map(|c| {
            let mut t = vec![0.0; num_classes];
            t[c] = 1.0;
            t
        })
        .collect();
    for &(x, label) in samples {
        if x.len() != feature_dim || label >= num_classes {
            return Err(Error::Shape(format!(
                "sample with {} features and label {label} does not fit a {feature_dim}-dim, {num_classes}-class head",
                x.len()
            )));
        }
    }

    let mut params = init_head(feature_dim, num_classes, seed::derive(config.seed, Stream::Init, 0))?;
    let mut stepper = Stepper::new(config.optimizer, &params);
    let mut shuffle_rng = seed::rng(config.seed, Stream::Shuffle);
    let mut dropout_rng = seed::rng(config.seed, Stream::Dropout);
    let hidden = params.hidden();

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_accuracy = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .map(|&i| (samples[i].0, targets[samples[i].1].as_slice()))
                .collect();
            let masks: Vec<DropoutMask> = chunk
                .iter()
                .map(|_| DropoutMask::sample(hidden, config.dropout_rate, &mut dropout_rng))
                .collect();
            let (_, grads) = loss_and_grad(&params, &batch, Some(&masks))?;
            stepper.apply(&mut params, &grads, config.learning_rate);
        }
        epoch_accuracy.push(sample_accuracy(&params, samples)?);
    }
    Ok(TrainOutcome {
        params,
        epoch_accuracy,
    })
}

fn sample_accuracy(params: &HeadParams, samples: &[(&[f32], usize)]) -> Result<f64> {
    let mut correct = 0usize;
    for &(x, label) in samples {
        if predict_proba(params, x)?.argmax() == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains on every cached patch of the given training images.
pub fn train(
    store: &FeatureStore,
    manifest: &DatasetManifest,
    train_ids: &BTreeSet<String>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut samples = Vec::with_capacity(train_ids.len() * 5);
    for id in train_ids {
        let record = manifest
            .get(id)
            .ok_or_else(|| Error::Data(format!("training image {id} is not in the manifest")))?;
        // validates the label range
        one_hot(record.label, NUM_CLASSES)?;
        for f in store.image_features(id)? {
            samples.push((f.values(), record.label.index()));
        }
    }
    fit(&samples, store.feature_dim(), NUM_CLASSES, config)
}
