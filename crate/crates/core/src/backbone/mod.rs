//! Frozen feature extractors.
//!
//! A [`FeatureExtractor`] maps one normalized 256x256x3 patch to a pooled
//! feature vector. Two implementations exist: [`OnnxBackbone`], which runs a
//! truncated pre-trained network from an ONNX file and global-average-pools
//! its final spatial map, and [`StubBackbone`], a seeded pool-and-project
//! extractor used for offline runs and tests.
//!
//! Extractors expose no way to modify their weights.

mod cache;
mod onnx;
mod stub;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{PreprocSpec, Tensor, CHANNELS, PATCH_SIZE};

pub use cache::{extract_dataset_features, ExtractionOutcome, FeatureStore};
pub use onnx::{global_average_pool, OnnxBackbone};
pub use stub::{StubBackbone, STUB_GRID};

pub const INPUT_SIZE: [usize; 3] = [PATCH_SIZE, PATCH_SIZE, CHANNELS];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("feature vectors need at least one value".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Extraction("non-finite feature value".into()));
        }
        Ok(FeatureVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

/// Axis order the network expects for its input and produces for its output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorLayout {
    #[default]
    Nchw,
    Nhwc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneManifest {
    pub name: String,
    pub model_path: PathBuf,
    pub input_size: [usize; 3],
    pub feature_dim: usize,
    pub preproc: PreprocSpec,
    #[serde(default)]
    pub layout: TensorLayout,
}

impl BackboneManifest {
    /// Reads a manifest. A relative `model_path` is resolved against the
    /// manifest's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: BackboneManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if manifest.model_path.is_relative() {
            if let Some(dir) = path.parent() {
                manifest.model_path = dir.join(&manifest.model_path);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Manifest("backbone name is empty".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Manifest("feature_dim must be at least 1".into()));
        }
        if self.input_size != INPUT_SIZE {
            return Err(Error::Manifest(format!(
                "input_size must be {INPUT_SIZE:?}, got {:?}",
                self.input_size
            )));
        }
        self.preproc.validate()
    }
}

pub trait FeatureExtractor: Send + Sync + std::fmt::Debug {
    /// Name used to key cached features.
    fn name(&self) -> &str;
    fn feature_dim(&self) -> usize;
    fn preproc(&self) -> &PreprocSpec;
    /// Runs the network on one validated patch.
    fn extract(&self, patch: &Tensor) -> Result<FeatureVector>;
}

/// Validates the patch shape, runs the extractor and checks the output length.
pub fn extract_features(extractor: &dyn FeatureExtractor, patch: &Tensor) -> Result<FeatureVector> {
    let (h, w, c) = patch.dims();
    if [h, w, c] != INPUT_SIZE {
        return Err(Error::Shape(format!(
            "backbone input must be {INPUT_SIZE:?}, got {:?}",
            [h, w, c]
        )));
    }
    let features = extractor.extract(patch)?;
    if features.dim() != extractor.feature_dim() {
        return Err(Error::Extraction(format!(
            "{} produced {} features, expected {}",
            extractor.name(),
            features.dim(),
            extractor.feature_dim()
        )));
    }
    Ok(features)
}

pub fn load_backbone(manifest: &BackboneManifest) -> Result<OnnxBackbone> {
    OnnxBackbone::load(manifest)
}

pub fn stub_backbone(seed: u64, feature_dim: usize) -> Result<StubBackbone> {
    StubBackbone::new(seed, feature_dim)
}

/// A backbone reference as given on the command line: either
/// `stub:<seed>:<dim>` or a path to a manifest JSON file.
#[derive(Clone, Debug, PartialEq)]
pub enum BackboneSpec {
    Stub { seed: u64, feature_dim: usize },
    Manifest(PathBuf),
}

impl BackboneSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("stub:") {
            let bad = || Error::Config(format!("expected stub:<seed>:<dim>, got {s:?}"));
            let (seed, dim) = rest.split_once(':').ok_or_else(bad)?;
            return Ok(BackboneSpec::Stub {
                seed: seed.parse().map_err(|_| bad())?,
                feature_dim: dim.parse().map_err(|_| bad())?,
            });
        }
        Ok(BackboneSpec::Manifest(PathBuf::from(s)))
    }

    pub fn open(&self) -> Result<Box<dyn FeatureExtractor>> {
        match self {
            BackboneSpec::Stub { seed, feature_dim } => {
                Ok(Box::new(StubBackbone::new(*seed, *feature_dim)?))
            }
            BackboneSpec::Manifest(path) => {
                let manifest = BackboneManifest::load(path).map_err(|e| match e {
                    Error::Io { path, source } => Error::ModelLoad {
                        path,
                        reason: source.to_string(),
                    },
                    Error::Json { path, source } => Error::Manifest(format!(
                        "{}: {source}",
                        path.display()
                    )),
                    other => other,
                })?;
                Ok(Box::new(load_backbone(&manifest)?))
            }
        }
    }
}
