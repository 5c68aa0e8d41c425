//! Sum-and-argmax fusion of the five per-patch predictions of one image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::argmax;
use crate::patching::NUM_PATCHES;

/// What each patch contributes to the sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// The patch's softmax probabilities.
    #[default]
    Soft,
    /// A one-hot vote for the patch's argmax class.
    Hard,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Soft => "soft",
            FusionMode::Hard => "hard",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(FusionMode::Soft),
            "hard" => Ok(FusionMode::Hard),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedScore(Vec<f64>);

impl FusedScore {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Elementwise sum of exactly five equal-length vectors.
///
/// Each class's five contributions are summed in ascending order, so the
/// result is bitwise independent of the order the patches are given in.
pub fn fuse<V: AsRef<[f64]>>(patch_vectors: &[V]) -> Result<FusedScore> {
    if patch_vectors.len() != NUM_PATCHES {
        return Err(Error::Fusion(format!(
            "expected {NUM_PATCHES} patch vectors, got {}",
            patch_vectors.len()
        )));
    }
    let k = patch_vectors[0].as_ref().len();
    if k == 0 || patch_vectors.iter().any(|v| v.as_ref().len() != k) {
        return Err(Error::Fusion("patch vectors must be nonempty and of equal length".into()));
    }
    let sums = (0..k)
        .map(|c| {
            let mut column: Vec<f64> = patch_vectors.iter().map(|v| v.as_ref()[c]).collect();
            column.sort_by(f64::total_cmp);
            column.into_iter().sum()
        })
        .collect();
    Ok(FusedScore(sums))
}

/// Replaces a probability vector by a one-hot vote for its argmax.
pub fn hard_vote(probs: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; probs.len()];
    if !probs.is_empty() {
        v[argmax(probs)] = 1.0;
    }
    v
}

pub fn fuse_with_mode<V: AsRef<[f64]>>(patch_vectors: &[V], mode: FusionMode) -> Result<FusedScore> {
    match mode {
        FusionMode::Soft => fuse(patch_vectors),
        FusionMode::Hard => {
            let votes: Vec<Vec<f64>> = patch_vectors.iter().map(|v| hard_vote(v.as_ref())).collect();
            fuse(&votes)
        }
    }
}

/// Argmax of the fused score; ties go to the lowest class index.
pub fn decide(score: &FusedScore) -> Result<usize> {
    if score.0.is_empty() {
        return Err(Error::Fusion("cannot decide on an empty score".into()));
    }
    if score.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fusion(format!("non-finite fused score {:?}", score.0)));
    }
    Ok(argmax(&score.0))
}
