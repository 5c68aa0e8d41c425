use rand::RngCore;

use super::{FeatureExtractor, FeatureVector};
use crate::error::{Error, Result};
use crate::patching::{PreprocSpec, Tensor, CHANNELS, PATCH_SIZE};
use crate::seed::{self, Stream};

/// Side of the average-pooling grid.
pub const STUB_GRID: usize = 8;
const POOLED_LEN: usize = STUB_GRID * STUB_GRID * CHANNELS;
const CELL: usize = PATCH_SIZE / STUB_GRID;

/// Deterministic stand-in backbone.
///
/// The patch is average-pooled to an 8x8x3 grid (flattened as
/// `(row, col, channel)`), then multiplied by a `feature_dim x 192`
/// projection. Projection entries are `(2u - 1) / 8` where `u` takes the top
/// 53 bits of successive ChaCha8 outputs as a fraction in `[0, 1)`, so each
/// row has unit expected squared norm.
#[derive(Clone, Debug)]
pub struct StubBackbone {
    name: String,
    feature_dim: usize,
    preproc: PreprocSpec,
    projection: Vec<f64>,
}

impl StubBackbone {
    pub fn new(seed: u64, feature_dim: usize) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::Manifest("stub feature_dim must be at least 1".into()));
        }
        let mut rng = seed::rng(seed, Stream::Projection);
        let scale = (3.0 / POOLED_LEN as f64).sqrt();
        let projection = (0..feature_dim * POOLED_LEN)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                (2.0 * u - 1.0) * scale
            })
            .collect();
        Ok(StubBackbone {
            name: format!("stub-{seed}-{feature_dim}"),
            feature_dim,
            preproc: PreprocSpec::identity(),
            projection,
        })
    }

    fn pool(patch: &Tensor) -> [f64; POOLED_LEN] {
        let mut pooled = [0.0f64; POOLED_LEN];
        let data = patch.data();
        for y in 0..PATCH_SIZE {
            let gy = y / CELL;
            for x in 0..PATCH_SIZE {
                let gx = x / CELL;
                let base = (gy * STUB_GRID + gx) * CHANNELS;
                let src = (y * PATCH_SIZE + x) * CHANNELS;
                for c in 0..CHANNELS {
                    pooled[base + c] += data[src + c] as f64;
                }
            }
        }
        let n = (CELL * CELL) as f64;
        pooled.iter_mut().for_each(|v| *v /= n);
        pooled
    }
}

impl FeatureExtractor for StubBackbone {
    fn name(&self) -> &str {
        &self.name
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn preproc(&self) -> &PreprocSpec {
        &self.preproc
    }

    fn extract(&self, patch: &Tensor) -> Result<FeatureVector> {
        let pooled = Self::pool(patch);
        let values = self
            .projection
            .chunks_exact(POOLED_LEN)
            .map(|row| row.iter().zip(&pooled).map(|(w, p)| w * p).sum::<f64>() as f32)
            .collect();
        FeatureVector::new(values)
    }
}
