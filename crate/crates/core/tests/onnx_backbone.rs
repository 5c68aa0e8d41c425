//! Runtime adapter checks against hand-built ONNX graphs whose feature maps
//! can be recomputed directly.

use std::fs;
use std::path::Path;

use miniclass::backbone::{extract_features, BackboneManifest, BackboneSpec, FeatureExtractor, TensorLayout};
use miniclass::patching::{PreprocSpec, Tensor, CHANNELS, PATCH_SIZE};
use prost::Message;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tract_onnx::pb;

const OUT_CHANNELS: usize = 4;
const KERNEL: usize = 2;
const STRIDE: usize = 2;
const OUT_SIDE: usize = PATCH_SIZE / STRIDE;

fn value_info(name: &str, dims: &[i64]) -> pb::ValueInfoProto {
    use pb::tensor_shape_proto::{dimension, Dimension};
    pb::ValueInfoProto {
        name: name.into(),
        r#type: Some(pb::TypeProto {
            value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
                elem_type: 1,
                shape: Some(pb::TensorShapeProto {
                    dim: dims
                        .iter()
                        .map(|&d| Dimension {
                            value: Some(dimension::Value::DimValue(d)),
                            ..Default::default()
                        })
                        .collect(),
                }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn ints(name: &str, values: &[i64]) -> pb::AttributeProto {
    pb::AttributeProto {
        name: name.into(),
        ints: values.to_vec(),
        r#type: 7,
        ..Default::default()
    }
}

fn node(op: &str, inputs: &[&str], output: &str, attribute: Vec<pb::AttributeProto>) -> pb::NodeProto {
    pb::NodeProto {
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: vec![output.into()],
        op_type: op.into(),
        name: output.into(),
        attribute,
        ..Default::default()
    }
}

struct ConvWeights {
    /// `[out][in][ky][kx]`
    w: Vec<f32>,
    b: Vec<f32>,
}

fn weights() -> ConvWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    ConvWeights {
        w: (0..OUT_CHANNELS * CHANNELS * KERNEL * KERNEL)
            .map(|_| rng.random_range(-0.5f32..0.5))
            .collect(),
        b: (0..OUT_CHANNELS).map(|_| rng.random_range(-0.1f32..0.1)).collect(),
    }
}

/// Conv(2x2, stride 2) + Relu, optionally wrapped in NHWC transposes.
fn conv_relu_model(cw: &ConvWeights, layout: TensorLayout) -> Vec<u8> {
    let side = PATCH_SIZE as i64;
    let out = OUT_SIDE as i64;
    let k = KERNEL as i64;
    let initializer = vec![
        pb::TensorProto {
            name: "w".into(),
            dims: vec![OUT_CHANNELS as i64, CHANNELS as i64, k, k],
            data_type: 1,
            float_data: cw.w.clone(),
            ..Default::default()
        },
        pb::TensorProto {
            name: "b".into(),
            dims: vec![OUT_CHANNELS as i64],
            data_type: 1,
            float_data: cw.b.clone(),
            ..Default::default()
        },
    ];
    let conv = |input: &str| {
        node("Conv", &[input, "w", "b"], "conv", vec![ints("kernel_shape", &[k, k]), ints("strides", &[STRIDE as i64; 2])])
    };
    let (nodes, input, output) = match layout {
        TensorLayout::Nchw => (
            vec![conv("x"), node("Relu", &["conv"], "y", vec![])],
            value_info("x", &[1, CHANNELS as i64, side, side]),
            value_info("y", &[1, OUT_CHANNELS as i64, out, out]),
        ),
        TensorLayout::Nhwc => (
            vec![
                node("Transpose", &["x"], "xt", vec![ints("perm", &[0, 3, 1, 2])]),
                conv("xt"),
                node("Relu", &["conv"], "r", vec![]),
                node("Transpose", &["r"], "y", vec![ints("perm", &[0, 2, 3, 1])]),
            ],
            value_info("x", &[1, side, side, CHANNELS as i64]),
            value_info("y", &[1, out, out, OUT_CHANNELS as i64]),
        ),
    };
    pb::ModelProto {
        ir_version: 7,
        opset_import: vec![pb::OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        graph: Some(pb::GraphProto {
            name: "tiny".into(),
            node: nodes,
            initializer,
            input: vec![input],
            output: vec![output],
            ..Default::default()
        }),
        ..Default::default()
    }
    .encode_to_vec()
}

fn write_backbone(dir: &Path, name: &str, model: &[u8], feature_dim: usize, layout: TensorLayout) -> std::path::PathBuf {
    let model_file = format!("{name}.onnx");
    fs::write(dir.join(&model_file), model).unwrap();
    let manifest = BackboneManifest {
        name: name.into(),
        model_path: model_file.into(),
        input_size: [PATCH_SIZE, PATCH_SIZE, CHANNELS],
        feature_dim,
        preproc: PreprocSpec::identity(),
        layout,
    };
    let path = dir.join(format!("{name}.manifest.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

fn random_patch(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..PATCH_SIZE * PATCH_SIZE * CHANNELS).map(|_| rng.random::<f32>()).collect();
    Tensor::new((PATCH_SIZE, PATCH_SIZE, CHANNELS), data).unwrap()
}

/// Per-channel spatial mean of relu(conv(patch)), computed directly in f64.
fn pooled_oracle(cw: &ConvWeights, patch: &Tensor) -> Vec<f64> {
    (0..OUT_CHANNELS)
        .map(|o| {
            let mut total = 0.0f64;
            for oy in 0..OUT_SIDE {
                for ox in 0..OUT_SIDE {
                    let mut acc = cw.b[o] as f64;
                    for c in 0..CHANNELS {
                        for ky in 0..KERNEL {
                            for kx in 0..KERNEL {
                                let w = cw.w[((o * CHANNELS + c) * KERNEL + ky) * KERNEL + kx] as f64;
                                acc += w * patch.get(oy * STRIDE + ky, ox * STRIDE + kx, c) as f64;
                            }
                        }
                    }
                    total += acc.max(0.0);
                }
            }
            total / (OUT_SIDE * OUT_SIDE) as f64
        })
        .collect()
}

fn open(path: &Path) -> Box<dyn FeatureExtractor> {
    BackboneSpec::Manifest(path.to_path_buf()).open().unwrap()
}

fn assert_pooled_matches(layout: TensorLayout) {
    let dir = tempfile::tempdir().unwrap();
    let cw = weights();
    let path = write_backbone(dir.path(), "tiny", &conv_relu_model(&cw, layout), OUT_CHANNELS, layout);
    let backbone = open(&path);
    assert_eq!(backbone.name(), "tiny");
    assert_eq!(backbone.feature_dim(), OUT_CHANNELS);
    for seed in 0..3 {
        let patch = random_patch(seed);
        let got = extract_features(backbone.as_ref(), &patch).unwrap();
        let want = pooled_oracle(&cw, &patch);
        for (g, w) in got.values().iter().zip(&want) {
            assert!(*w > 0.0, "degenerate channel mean {w}");
            approx::assert_relative_eq!(*g as f64, *w, max_relative = 1e-6);
        }
    }
}

#[test]
fn pooled_features_match_direct_convolution_nchw() {
    assert_pooled_matches(TensorLayout::Nchw);
}

#[test]
fn pooled_features_match_direct_convolution_nhwc() {
    assert_pooled_matches(TensorLayout::Nhwc);
}

#[test]
fn repeated_extraction_is_bitwise_equal() {
    let dir = tempfile::tempdir().unwrap();
    let cw = weights();
    let path = write_backbone(dir.path(), "tiny", &conv_relu_model(&cw, TensorLayout::Nchw), OUT_CHANNELS, TensorLayout::Nchw);
    let a = open(&path);
    let b = open(&path);
    let patch = random_patch(5);
    let first = extract_features(a.as_ref(), &patch).unwrap();
    for _ in 0..3 {
        assert_eq!(extract_features(a.as_ref(), &patch).unwrap(), first);
    }
    assert_eq!(extract_features(b.as_ref(), &patch).unwrap(), first);
}

#[test]
fn concurrent_extraction_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let cw = weights();
    let path = write_backbone(dir.path(), "tiny", &conv_relu_model(&cw, TensorLayout::Nchw), OUT_CHANNELS, TensorLayout::Nchw);
    let backbone = open(&path);
    let patches: Vec<Tensor> = (0..4).map(random_patch).collect();
    let serial: Vec<_> = patches.iter().map(|p| extract_features(backbone.as_ref(), p).unwrap()).collect();
    let threaded: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = patches
            .iter()
            .map(|p| {
                let b = backbone.as_ref();
                s.spawn(move || extract_features(b, p).unwrap())
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(serial, threaded);
}

#[test]
fn declared_dim_must_match_channels() {
    let dir = tempfile::tempdir().unwrap();
    let model = conv_relu_model(&weights(), TensorLayout::Nchw);
    let path = write_backbone(dir.path(), "wrong", &model, OUT_CHANNELS + 1, TensorLayout::Nchw);
    let err = BackboneSpec::Manifest(path).open().unwrap_err();
    assert_eq!(err.code(), "E_MANIFEST");
}

#[test]
fn truncated_model_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let model = conv_relu_model(&weights(), TensorLayout::Nchw);
    let path = write_backbone(dir.path(), "cut", &model[..model.len() / 2], OUT_CHANNELS, TensorLayout::Nchw);
    let err = BackboneSpec::Manifest(path).open().unwrap_err();
    assert_eq!(err.code(), "E_MODEL_LOAD");
}

#[test]
fn missing_model_or_manifest_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let model = conv_relu_model(&weights(), TensorLayout::Nchw);
    let path = write_backbone(dir.path(), "gone", &model, OUT_CHANNELS, TensorLayout::Nchw);
    fs::remove_file(dir.path().join("gone.onnx")).unwrap();
    assert_eq!(BackboneSpec::Manifest(path).open().unwrap_err().code(), "E_MODEL_LOAD");
    let missing = BackboneSpec::Manifest(dir.path().join("absent.json")).open().unwrap_err();
    assert_eq!(missing.code(), "E_MODEL_LOAD");
}

#[test]
fn malformed_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\"name\": \"x\"}").unwrap();
    assert_eq!(BackboneSpec::Manifest(path.clone()).open().unwrap_err().code(), "E_MANIFEST");

    let model = conv_relu_model(&weights(), TensorLayout::Nchw);
    let good = write_backbone(dir.path(), "sized", &model, OUT_CHANNELS, TensorLayout::Nchw);
    let mut json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&good).unwrap()).unwrap();
    json["input_size"] = serde_json::json!([224, 224, 3]);
    fs::write(&path, json.to_string()).unwrap();
    assert_eq!(BackboneSpec::Manifest(path).open().unwrap_err().code(), "E_MANIFEST");
}

#[test]
fn manifest_without_layout_defaults_to_nchw() {
    let json = r#"{"name":"n","model_path":"m.onnx","input_size":[256,256,3],"feature_dim":8,
        "preproc":{"scale":"unit","mean":[0.485,0.456,0.406],"std":[0.229,0.224,0.225]}}"#;
    let m: BackboneManifest = serde_json::from_str(json).unwrap();
    assert_eq!(m.layout, TensorLayout::Nchw);
    assert_eq!(m.preproc.mean, [0.485, 0.456, 0.406]);
}

#[test]
fn wrong_patch_shape_is_rejected_before_inference() {
    let dir = tempfile::tempdir().unwrap();
    let model = conv_relu_model(&weights(), TensorLayout::Nchw);
    let path = write_backbone(dir.path(), "tiny", &model, OUT_CHANNELS, TensorLayout::Nchw);
    let backbone = open(&path);
    let small = Tensor::filled((128, 128, 3), 0.5);
    assert_eq!(extract_features(backbone.as_ref(), &small).unwrap_err().code(), "E_SHAPE");
}
