use std::fs;
use std::sync::Arc;

use tract_onnx::prelude::*;

use super::{BackboneManifest, FeatureExtractor, FeatureVector, TensorLayout};
use crate::error::{Error, Result};
use crate::patching::{PreprocSpec, Tensor as Patch, CHANNELS, PATCH_SIZE};

type Plan = Arc<TypedRunnableModel>;

/// A truncated pre-trained network loaded from an ONNX file.
///
/// The network must map a `1x3x256x256` (or `1x256x256x3` with the `nhwc`
/// layout) input to a rank-4 feature map; the map is averaged over its
/// spatial axes here. The optimized plan is immutable and shared across
/// threads.
pub struct OnnxBackbone {
    name: String,
    feature_dim: usize,
    layout: TensorLayout,
    preproc: PreprocSpec,
    plan: Plan,
}

impl std::fmt::Debug for OnnxBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxBackbone")
            .field("name", &self.name)
            .field("feature_dim", &self.feature_dim)
            .field("layout", &self.layout)
            .finish_non_exhaustive()
    }
}

impl OnnxBackbone {
    pub fn load(manifest: &BackboneManifest) -> Result<Self> {
        manifest.validate()?;
        let path = &manifest.model_path;
        let load_err = |reason: String| Error::ModelLoad {
            path: path.clone(),
            reason,
        };
        let bytes = fs::read(path).map_err(|e| load_err(e.to_string()))?;

        let input_shape: [usize; 4] = match manifest.layout {
            TensorLayout::Nchw => [1, CHANNELS, PATCH_SIZE, PATCH_SIZE],
            TensorLayout::Nhwc => [1, PATCH_SIZE, PATCH_SIZE, CHANNELS],
        };
        let model = tract_onnx::onnx()
            .model_for_read(&mut bytes.as_slice())
            .and_then(|m| m.with_input_fact(0, f32::fact(input_shape).into()))
            .and_then(|m| m.into_optimized())
            .map_err(|e| load_err(format!("{e:#}")))?;

        let fact = model.output_fact(0).map_err(|e| load_err(format!("{e:#}")))?;
        let shape = fact
            .shape
            .as_concrete()
            .ok_or_else(|| load_err(format!("output shape {:?} is not concrete", fact.shape)))?
            .to_vec();
        if shape.len() != 4 {
            return Err(load_err(format!(
                "expected a rank-4 feature map output, got shape {shape:?}"
            )));
        }
        let channels = match manifest.layout {
            TensorLayout::Nchw => shape[1],
            TensorLayout::Nhwc => shape[3],
        };
        if channels != manifest.feature_dim {
            return Err(Error::Manifest(format!(
                "{} declares feature_dim {} but the model outputs {channels} channels",
                manifest.name, manifest.feature_dim
            )));
        }

        let plan = model
            .into_runnable()
            .map_err(|e| load_err(format!("{e:#}")))?;
        Ok(OnnxBackbone {
            name: manifest.name.clone(),
            feature_dim: manifest.feature_dim,
            layout: manifest.layout,
            preproc: manifest.preproc.clone(),
            plan,
        })
    }

    fn input_tensor(&self, patch: &Patch) -> tract_onnx::prelude::Tensor {
        let data = patch.data();
        let at = move |y: usize, x: usize, c: usize| data[(y * PATCH_SIZE + x) * CHANNELS + c];
        match self.layout {
            TensorLayout::Nchw => {
                tract_ndarray::Array4::from_shape_fn((1, CHANNELS, PATCH_SIZE, PATCH_SIZE), |(_, c, y, x)| {
                    at(y, x, c)
                })
                .into_tensor()
            }
            TensorLayout::Nhwc => {
                tract_ndarray::Array4::from_shape_vec((1, PATCH_SIZE, PATCH_SIZE, CHANNELS), data.to_vec())
                    .expect("patch tensor is 256x256x3")
                    .into_tensor()
            }
        }
    }
}

impl FeatureExtractor for OnnxBackbone {
    fn name(&self) -> &str {
        &self.name
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn preproc(&self) -> &PreprocSpec {
        &self.preproc
    }

    fn extract(&self, patch: &Patch) -> Result<FeatureVector> {
        let outputs = self
            .plan
            .run(tvec!(self.input_tensor(patch).into()))
            .map_err(|e| Error::Extraction(format!("{}: {e:#}", self.name)))?;
        let map = outputs[0]
            .to_plain_array_view::<f32>()
            .map_err(|e| Error::Extraction(format!("{}: {e:#}", self.name)))?;
        let shape = map.shape().to_vec();
        let values: Vec<f32> = map.iter().copied().collect();
        FeatureVector::new(global_average_pool(&values, &shape, self.layout)?)
    }
}

/// Per-channel mean over the spatial axes of a `1xCxHxW` / `1xHxWxC` map.
pub fn global_average_pool(values: &[f32], shape: &[usize], layout: TensorLayout) -> Result<Vec<f32>> {
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::Extraction(format!(
            "expected a 1xAxBxC feature map, got shape {shape:?}"
        )));
    }
    if values.len() != shape.iter().product::<usize>() {
        return Err(Error::Extraction("feature map length disagrees with shape".into()));
    }
    let (channels, spatial) = match layout {
        TensorLayout::Nchw => (shape[1], shape[2] * shape[3]),
        TensorLayout::Nhwc => (shape[3], shape[1] * shape[2]),
    };
    if spatial == 0 {
        return Err(Error::Extraction("feature map has no spatial extent".into()));
    }
    let mut sums = vec![0.0f64; channels];
    match layout {
        TensorLayout::Nchw => {
            for (c, plane) in values.chunks_exact(spatial).enumerate() {
                sums[c] = plane.iter().map(|&v| v as f64).sum();
            }
        }
        TensorLayout::Nhwc => {
            for px in values.chunks_exact(channels) {
                for (s, &v) in sums.iter_mut().zip(px) {
                    *s += v as f64;
                }
            }
        }
    }
    Ok(sums.into_iter().map(|s| (s / spatial as f64) as f32).collect())
}
