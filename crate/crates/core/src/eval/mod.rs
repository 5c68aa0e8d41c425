//! k-fold cross-validation of the full patch pipeline, with patch-level and
//! fused-image accuracies on both the training and the test side.

mod metrics;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureStore;
use crate::dataset::{stratified_kfold, ArtSchool, DatasetManifest, FoldAssignment, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::fusion::{decide, fuse_with_mode, FusionMode};
use crate::head::{predict_proba, train, HeadParams, TrainConfig};

pub use metrics::{
    accuracy, coefficient_of_variation, confusion_matrix, normalize_and_average, ConfusionMatrix,
    ExcludedRow, NormalizedConfusion,
};

pub const REPORT_SCHEMA: &str = "miniclass-eval-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub train_seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub patch_train_acc: f64,
    pub patch_test_acc: f64,
    pub fused_train_acc: f64,
    pub fused_test_acc: f64,
    pub epoch_accuracy: Vec<f64>,
    /// Test-side counts, rows = true class.
    pub patch_confusion: ConfusionMatrix,
    pub fused_confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracies<T> {
    pub patch_train: T,
    pub patch_test: T,
    pub fused_train: T,
    pub fused_test: T,
}

impl<T> Accuracies<T> {
    fn from_fn(mut f: impl FnMut(fn(&FoldResult) -> f64) -> T) -> Self {
        Accuracies {
            patch_train: f(|r| r.patch_train_acc),
            patch_test: f(|r| r.patch_test_acc),
            fused_train: f(|r| r.fused_train_acc),
            fused_test: f(|r| r.fused_test_acc),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub backbone: String,
    pub feature_dim: usize,
    pub folds: usize,
    pub fold_seed: u64,
    pub fusion: FusionMode,
    pub train: TrainConfig,
    pub num_images: usize,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub config: EvalConfig,
    pub folds: Vec<FoldResult>,
    /// Mean accuracy over folds, as fractions.
    pub mean: Accuracies<f64>,
    /// Coefficient of variation over folds in percent; null when undefined
    /// (fewer than two folds or a zero mean).
    pub cv_percent: Accuracies<Option<f64>>,
    pub patch_confusion: NormalizedConfusion,
    pub fused_confusion: NormalizedConfusion,
}

impl EvalReport {
    fn assemble(config: EvalConfig, folds: Vec<FoldResult>) -> Result<Self> {
        let n = folds.len() as f64;
        let mean = Accuracies::from_fn(|get| folds.iter().map(get).sum::<f64>() / n);
        let cv_percent = Accuracies::from_fn(|get| {
            let values: Vec<f64> = folds.iter().map(get).collect();
            coefficient_of_variation(&values).ok()
        });
        let patch: Vec<ConfusionMatrix> = folds.iter().map(|f| f.patch_confusion.clone()).collect();
        let fused: Vec<ConfusionMatrix> = folds.iter().map(|f| f.fused_confusion.clone()).collect();
        Ok(EvalReport {
            schema: REPORT_SCHEMA.into(),
            config,
            patch_confusion: normalize_and_average(&patch)?,
            fused_confusion: normalize_and_average(&fused)?,
            folds,
            mean,
            cv_percent,
        })
    }

    /// Recomputes the aggregates from the per-fold values and checks them
    /// against the stored ones.
    pub fn verify(&self, tolerance: f64) -> Result<()> {
        let recomputed = EvalReport::assemble(self.config.clone(), self.folds.clone())?;
        let close = |a: f64, b: f64| (a - b).abs() <= tolerance;
        let close_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        let m = (&self.mean, &recomputed.mean);
        let c = (&self.cv_percent, &recomputed.cv_percent);
        let ok = close(m.0.patch_train, m.1.patch_train)
            && close(m.0.patch_test, m.1.patch_test)
            && close(m.0.fused_train, m.1.fused_train)
            && close(m.0.fused_test, m.1.fused_test)
            && close_opt(c.0.patch_train, c.1.patch_train)
            && close_opt(c.0.patch_test, c.1.patch_test)
            && close_opt(c.0.fused_train, c.1.fused_train)
            && close_opt(c.0.fused_test, c.1.fused_test);
        if !ok {
            return Err(Error::Metric("report aggregates disagree with its folds".into()));
        }
        for f in &self.folds {
            let checks = [
                (f.patch_confusion.accuracy()?, f.patch_test_acc),
                (f.fused_confusion.accuracy()?, f.fused_test_acc),
            ];
            if checks.iter().any(|(a, b)| !close(*a, *b)) {
                return Err(Error::Metric(format!(
                    "fold {} accuracies disagree with its confusion matrices",
                    f.fold_index
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Plain-text summary: accuracy means, CVs and both mean confusion matrices.
    pub fn summary(&self) -> String {
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        let cv = |v: Option<f64>| v.map_or_else(|| "   n/a".to_string(), |v| format!("{v:6.3}"));
        let mut out = String::new();
        let c = &self.config;
        let _ = writeln!(
            out,
            "backbone {} | {} images | {}-fold | fusion {} | fold seed {} | train seed {}",
            c.backbone,
            c.num_images,
            c.folds,
            c.fusion.as_str(),
            c.fold_seed,
            c.train.seed
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "fold  patch-train  fused-train  patch-test  fused-test");
        for f in &self.folds {
            let _ = writeln!(
                out,
                "{:>4}  {:>11}  {:>11}  {:>10}  {:>10}",
                f.fold_index,
                pct(f.patch_train_acc),
                pct(f.fused_train_acc),
                pct(f.patch_test_acc),
                pct(f.fused_test_acc)
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "E[Patch Train Acc.]       {}", pct(self.mean.patch_train));
        let _ = writeln!(out, "E[Fused Image Train Acc.] {}", pct(self.mean.fused_train));
        let _ = writeln!(out, "E[Patch Test Acc.]        {}", pct(self.mean.patch_test));
        let _ = writeln!(out, "E[Fused Image Test Acc.]  {}", pct(self.mean.fused_test));
        let _ = writeln!(out, "CV[Patch Test Acc.] %     {}", cv(self.cv_percent.patch_test));
        let _ = writeln!(out, "CV[Fused Image Test Acc.] % {}", cv(self.cv_percent.fused_test));
        for (title, m) in [
            ("patch-level", &self.patch_confusion),
            ("fused-image", &self.fused_confusion),
        ] {
            let _ = writeln!(out);
            let _ = writeln!(out, "mean normalized confusion ({title}), rows = true class");
            for (i, row) in m.values.iter().enumerate() {
                let name = self.config.classes.get(i).map(String::as_str).unwrap_or("?");
                let cells: Vec<String> = row.iter().map(|v| format!("{v:5.3}")).collect();
                let _ = writeln!(out, "{name:>16}  {}", cells.join(" "));
            }
        }
        out
    }
}

/// CSV rendering of a mean normalized confusion matrix.
pub fn confusion_csv(matrix: &NormalizedConfusion, classes: &[String]) -> String {
    let mut out = String::from("true\\predicted");
    for c in classes {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, row) in matrix.values.iter().enumerate() {
        out.push_str(classes.get(i).map(String::as_str).unwrap_or(""));
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Patch-level and fused-image predictions for a set of images.
struct Scored {
    patch_pred: Vec<usize>,
    patch_truth: Vec<usize>,
    fused_pred: Vec<usize>,
    fused_truth: Vec<usize>,
}

fn score_images(
    params: &HeadParams,
    store: &FeatureStore,
    manifest: &DatasetManifest,
    ids: &BTreeSet<String>,
    mode: FusionMode,
) -> Result<Scored> {
    let mut s = Scored {
        patch_pred: Vec::with_capacity(ids.len() * 5),
        patch_truth: Vec::with_capacity(ids.len() * 5),
        fused_pred: Vec::with_capacity(ids.len()),
        fused_truth: Vec::with_capacity(ids.len()),
    };
    for id in ids {
        let truth = manifest
            .get(id)
            .ok_or_else(|| Error::Data(format!("image {id} is not in the manifest")))?
            .label
            .index();
        let mut probs = Vec::with_capacity(5);
        for f in store.image_features(id)? {
            let p = predict_proba(params, f.values())?;
            s.patch_pred.push(p.argmax());
            s.patch_truth.push(truth);
            probs.push(p.into_inner());
        }
        s.fused_pred.push(decide(&fuse_with_mode(&probs, mode)?)?);
        s.fused_truth.push(truth);
    }
    Ok(s)
}

fn run_fold(
    fold: &FoldAssignment,
    manifest: &DatasetManifest,
    store: &FeatureStore,
    config: &TrainConfig,
    mode: FusionMode,
) -> Result<FoldResult> {
    let fold_config = TrainConfig {
        seed: config.seed.wrapping_add(fold.fold_index as u64),
        ..config.clone()
    };
    let outcome = train(store, manifest, &fold.train_ids, &fold_config)?;
    let params = &outcome.params;
    let tr = score_images(params, store, manifest, &fold.train_ids, mode)?;
    let te = score_images(params, store, manifest, &fold.test_ids, mode)?;
    let patch_confusion = confusion_matrix(&te.patch_pred, &te.patch_truth, NUM_CLASSES)?;
    let fused_confusion = confusion_matrix(&te.fused_pred, &te.fused_truth, NUM_CLASSES)?;
    Ok(FoldResult {
        fold_index: fold.fold_index,
        train_seed: fold_config.seed,
        train_images: fold.train_ids.len(),
        test_images: fold.test_ids.len(),
        patch_train_acc: accuracy(&tr.patch_pred, &tr.patch_truth)?,
        patch_test_acc: patch_confusion.accuracy()?,
        fused_train_acc: accuracy(&tr.fused_pred, &tr.fused_truth)?,
        fused_test_acc: fused_confusion.accuracy()?,
        epoch_accuracy: outcome.epoch_accuracy,
        patch_confusion,
        fused_confusion,
    })
}

/// Stratified k-fold evaluation. Fold `i` trains with seed
/// `train_config.seed + i`; folds run in parallel and the report does not
/// depend on scheduling.
pub fn run_cross_validation(
    manifest: &DatasetManifest,
    store: &FeatureStore,
    train_config: &TrainConfig,
    fusion: FusionMode,
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    train_config.validate()?;
    let folds = stratified_kfold(manifest, k, seed)?;
    let results: Vec<FoldResult> = folds
        .par_iter()
        .map(|fold| {
            run_fold(fold, manifest, store, train_config, fusion).map_err(|e| Error::Fold {
                fold: fold.fold_index,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let config = EvalConfig {
        backbone: store.backbone_name().to_string(),
        feature_dim: store.feature_dim(),
        folds: k,
        fold_seed: seed,
        fusion,
        train: train_config.clone(),
        num_images: manifest.len(),
        classes: ArtSchool::ALL.iter().map(|s| s.display_name().to_string()).collect(),
    };
    EvalReport::assemble(config, results)
}
