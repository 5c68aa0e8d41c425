//! Trainable classifier on pooled backbone features:
//! `Dense(32, relu) -> Dropout -> Dense(K, softmax)`, trained with
//! categorical cross-entropy.
//!
//! Everything is computed in `f64`. Dropout is inverted: kept hidden units
//! are scaled by `1 / (1 - rate)` while training and inference is a plain
//! forward pass.

mod checkpoint;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::HeadCheckpoint;
pub use train::{fit, train, Optimizer, TrainConfig, TrainOutcome};

pub const HIDDEN_UNITS: usize = 32;

/// Weights of the two dense layers. Matrices are row-major:
/// `w1` is `hidden x feature_dim`, `w2` is `num_classes x hidden`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(feature_dim: usize, num_classes: usize) -> Self {
        HeadParams {
            feature_dim,
            num_classes,
            w1: vec![0.0; HIDDEN_UNITS * feature_dim],
            b1: vec![0.0; HIDDEN_UNITS],
            w2: vec![0.0; num_classes * HIDDEN_UNITS],
            b2: vec![0.0; num_classes],
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let shapes_ok = h >= 1
            && self.feature_dim >= 1
            && self.num_classes >= 1
            && self.w1.len() == h * self.feature_dim
            && self.w2.len() == self.num_classes * h
            && self.b2.len() == self.num_classes;
        if !shapes_ok {
            return Err(Error::Shape(format!(
                "inconsistent head shapes: w1 {}, b1 {}, w2 {}, b2 {} for feature_dim {} and {} classes",
                self.w1.len(),
                self.b1.len(),
                self.w2.len(),
                self.b2.len(),
                self.feature_dim,
                self.num_classes
            )));
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Shape("non-finite head parameter".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_head(feature_dim: usize, num_classes: usize, seed: u64) -> Result<HeadParams> {
    if feature_dim == 0 || num_classes == 0 {
        return Err(Error::Shape("head dimensions must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = HeadParams::zeros(feature_dim, num_classes);
    let bound1 = (6.0 / (feature_dim + HIDDEN_UNITS) as f64).sqrt();
    let bound2 = (6.0 / (HIDDEN_UNITS + num_classes) as f64).sqrt();
    params.w1.iter_mut().for_each(|w| *w = rng.random_range(-bound1..bound1));
    params.w2.iter_mut().for_each(|w| *w = rng.random_range(-bound2..bound2));
    Ok(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> ProbVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector(exps.into_iter().map(|e| e / sum).collect())
}

/// Keep-mask over hidden units plus the rate it was drawn at.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub rate: f64,
}

impl DropoutMask {
    pub fn all_kept(len: usize, rate: f64) -> Self {
        DropoutMask {
            keep: vec![true; len],
            rate,
        }
    }

    pub fn sample(len: usize, rate: f64, rng: &mut impl Rng) -> Self {
        DropoutMask {
            keep: (0..len).map(|_| rng.random::<f64>() >= rate).collect(),
            rate,
        }
    }

    /// `value / (1 - rate)` for kept units, zero for dropped ones.
    fn apply(&self, unit: usize, value: f64) -> f64 {
        if self.keep[unit] {
            value / (1.0 - self.rate)
        } else {
            0.0
        }
    }
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    /// Hidden activations after dropout (equal to `hidden` at inference).
    pub dropped: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn forward(
    params: &HeadParams,
    features: &[f32],
    dropout: Option<&DropoutMask>,
) -> Result<(ProbVector, ForwardCache)> {
    let (d, h, k) = (params.feature_dim, params.hidden(), params.num_classes);
    if features.len() != d {
        return Err(Error::Shape(format!(
            "head expects {d} features, got {}",
            features.len()
        )));
    }
    if let Some(mask) = dropout {
        if mask.keep.len() != h || !(0.0..1.0).contains(&mask.rate) {
            return Err(Error::Shape(format!(
                "dropout mask must have {h} units and a rate in [0, 1)"
            )));
        }
    }

    let pre_activation: Vec<f64> = params
        .w1
        .chunks_exact(d)
        .zip(&params.b1)
        .map(|(row, b)| b + row.iter().zip(features).map(|(w, &x)| w * x as f64).sum::<f64>())
        .collect();
    let hidden: Vec<f64> = pre_activation.iter().map(|&z| z.max(0.0)).collect();
    let dropped: Vec<f64> = match dropout {
        Some(mask) => hidden.iter().enumerate().map(|(j, &a)| mask.apply(j, a)).collect(),
        None => hidden.clone(),
    };
    let logits: Vec<f64> = params
        .w2
        .chunks_exact(h)
        .zip(&params.b2)
        .map(|(row, b)| b + row.iter().zip(&dropped).map(|(w, a)| w * a).sum::<f64>())
        .collect();
    debug_assert_eq!(logits.len(), k);
    Ok((
        softmax(&logits),
        ForwardCache {
            pre_activation,
            hidden,
            dropped,
            logits,
        },
    ))
}

pub fn predict_proba(params: &HeadParams, features: &[f32]) -> Result<ProbVector> {
    forward(params, features, None).map(|(p, _)| p)
}

/// One training example: features and a one-hot (or soft) target.
pub type Example<'a> = (&'a [f32], &'a [f32]);

/// Mean cross-entropy over the batch and its exact gradient.
///
/// When `dropout` is given it holds one mask per example and the gradient
/// flows through the same scaling used in the forward pass.
pub fn loss_and_grad(
    params: &HeadParams,
    batch: &[Example<'_>],
    dropout: Option<&[DropoutMask]>,
) -> Result<(f64, HeadParams)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some(masks) = dropout {
        if masks.len() != batch.len() {
            return Err(Error::Shape(format!(
                "{} dropout masks for a batch of {}",
                masks.len(),
                batch.len()
            )));
        }
    }
    let (d, h, k) = (params.feature_dim, params.hidden(), params.num_classes);
    let n = batch.len() as f64;
    let mut grads = HeadParams {
        feature_dim: d,
        num_classes: k,
        w1: vec![0.0; h * d],
        b1: vec![0.0; h],
        w2: vec![0.0; k * h],
        b2: vec![0.0; k],
    };
    let mut loss = 0.0;

    for (i, &(x, y)) in batch.iter().enumerate() {
        if y.len() != k {
            return Err(Error::Shape(format!("target has {} classes, head has {k}", y.len())));
        }
        let mask = dropout.map(|m| &m[i]);
        let (_, cache) = forward(params, x, mask)?;

        // log-softmax via log-sum-exp
        let max = cache.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + cache.logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        let log_p: Vec<f64> = cache.logits.iter().map(|&l| l - lse).collect();
        loss -= y.iter().zip(&log_p).map(|(&t, lp)| t as f64 * lp).sum::<f64>();

        let y_sum: f64 = y.iter().map(|&t| t as f64).sum();
        let d_logits: Vec<f64> = log_p
            .iter()
            .zip(y)
            .map(|(lp, &t)| (y_sum * lp.exp() - t as f64) / n)
            .collect();

        let mut d_dropped = vec![0.0; h];
        for (c, &g) in d_logits.iter().enumerate() {
            grads.b2[c] += g;
            let row = &params.w2[c * h..(c + 1) * h];
            let grow = &mut grads.w2[c * h..(c + 1) * h];
            for j in 0..h {
                grow[j] += g * cache.dropped[j];
                d_dropped[j] += g * row[j];
            }
        }
        for j in 0..h {
            if cache.pre_activation[j] <= 0.0 {
                continue;
            }
            let g = mask.map_or(d_dropped[j], |m| m.apply(j, d_dropped[j]));
            if g == 0.0 {
                continue;
            }
            grads.b1[j] += g;
            let grow = &mut grads.w1[j * d..(j + 1) * d];
            for (gw, &xv) in grow.iter_mut().zip(x) {
                *gw += g * xv as f64;
            }
        }
    }
    Ok((loss / n, grads))
}
