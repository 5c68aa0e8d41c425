use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use miniclass::backbone::{extract_dataset_features, BackboneSpec, ExtractionOutcome, FeatureExtractor};
use miniclass::dataset::{scan_dataset, ArtSchool, DatasetManifest};
use miniclass::eval::{confusion_csv, run_cross_validation, EvalReport};
use miniclass::fusion::{decide, fuse_with_mode, FusionMode};
use miniclass::head::{predict_proba, train, HeadCheckpoint, Optimizer, TrainConfig};
use miniclass::patching::{open_image, patchify, PatchPosition};
use miniclass::seed::{self, Stream};
use miniclass::{Error, Result};
use serde::Serialize;

use crate::{BackboneArgs, Command, FusionArg, OptimizerArg, RunArgs, SourceArgs, TrainArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare { dataset, out } => prepare(&dataset, &out),
        Command::Extract { source, backbone } => extract(&source, &backbone).map(|_| ()),
        Command::Train {
            source,
            backbone,
            train,
            run,
        } => train_head(&source, &backbone, &train, &run),
        Command::Evaluate {
            source,
            backbone,
            train,
            run,
            folds,
            fusion,
        } => evaluate(&source, &backbone, &train, &run, folds, fusion.into()),
        Command::Predict {
            image,
            backbone,
            checkpoint,
            fusion,
        } => predict(&image, &backbone, &checkpoint, fusion.into()),
        Command::Report { report } => report_summary(&report),
    }
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Soft => FusionMode::Soft,
            FusionArg::Hard => FusionMode::Hard,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn load_manifest(source: &SourceArgs) -> Result<DatasetManifest> {
    match (&source.manifest, &source.dataset) {
        (Some(path), _) => DatasetManifest::load(path),
        (None, Some(root)) => scan_dataset(root),
        (None, None) => Err(Error::Config("either --dataset or --manifest is required".into())),
    }
}

fn open_backbone(spec: &str) -> Result<Box<dyn FeatureExtractor>> {
    BackboneSpec::parse(spec)?.open()
}

/// Creates `<out>/run-<UTC timestamp>`, suffixed with `-N` if taken.
fn create_run_dir(out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let stamp = chrono::Utc::now().format("run-%Y%m%dT%H%M%S").to_string();
    for n in 0.. {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!("run directory suffixes exhausted")
}

fn train_config(args: &TrainArgs) -> TrainConfig {
    TrainConfig {
        batch_size: args.batch_size,
        epochs: args.epochs,
        dropout_rate: args.dropout,
        learning_rate: args.lr,
        seed: seed::derive(args.seed, Stream::Train, 0),
        optimizer: match args.optimizer {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::adam(),
        },
    }
}

/// Resolved settings echoed into each run directory.
#[derive(Serialize)]
struct RunConfig<'a> {
    command: &'a str,
    created: String,
    dataset: Option<&'a Path>,
    manifest: Option<&'a Path>,
    backbone: &'a str,
    backbone_name: &'a str,
    feature_dim: usize,
    cache: &'a Path,
    run_dir: &'a Path,
    master_seed: u64,
    fold_seed: Option<u64>,
    folds: Option<usize>,
    fusion: Option<FusionMode>,
    train: &'a TrainConfig,
    images: usize,
}

fn prepare(dataset: &Path, out: &Path) -> Result<()> {
    let manifest = scan_dataset(dataset)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    for school in ArtSchool::ALL {
        println!("{:>16}  {}", school.display_name(), manifest.count(school));
    }
    println!("{:>16}  {}", "total", manifest.len());
    if !manifest.skipped.is_empty() {
        println!("skipped {} unreadable file(s)", manifest.skipped.len());
    }
    println!("manifest: {}", path.display());
    Ok(())
}

struct Extracted {
    manifest: DatasetManifest,
    backbone: Box<dyn FeatureExtractor>,
    outcome: ExtractionOutcome,
}

fn extract(source: &SourceArgs, args: &BackboneArgs) -> Result<Extracted> {
    let manifest = load_manifest(source)?;
    let backbone = open_backbone(&args.backbone)?;
    log::info!(
        "extracting {} features for {} images into {}",
        backbone.name(),
        manifest.len(),
        args.cache.display()
    );
    let outcome = extract_dataset_features(&manifest, backbone.as_ref(), &args.cache)?;
    println!(
        "{}: {} cached feature vectors, {} new inferences, {} corrupted entries replaced, {} images skipped",
        backbone.name(),
        outcome.store.len(),
        outcome.inferences,
        outcome.corrupted,
        outcome.skipped.len()
    );
    Ok(Extracted {
        manifest,
        backbone,
        outcome,
    })
}

/// Drops images whose five patch features are not all cached.
fn covered(ex: &Extracted) -> DatasetManifest {
    let store = &ex.outcome.store;
    let kept = ex.manifest.retain(|r| store.has_image(&r.id));
    let dropped = ex.manifest.len() - kept.len();
    if dropped > 0 {
        log::warn!("{dropped} image(s) without cached features are left out");
    }
    kept
}

fn train_head(source: &SourceArgs, args: &BackboneArgs, targs: &TrainArgs, run: &RunArgs) -> Result<()> {
    let config = train_config(targs);
    config.validate()?;
    let ex = extract(source, args)?;
    let manifest = covered(&ex);
    let ids: BTreeSet<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    let outcome = train(&ex.outcome.store, &manifest, &ids, &config)?;

    let run_dir = create_run_dir(&run.out)?;
    let checkpoint = HeadCheckpoint {
        backbone: ex.backbone.name().to_string(),
        config: config.clone(),
        params: outcome.params,
    };
    let ckpt_path = run_dir.join("head.ckpt");
    checkpoint.save(&ckpt_path)?;
    write_json(
        &run_dir.join("config.json"),
        &RunConfig {
            command: "train",
            created: chrono::Utc::now().to_rfc3339(),
            dataset: source.dataset.as_deref(),
            manifest: source.manifest.as_deref(),
            backbone: &args.backbone,
            backbone_name: ex.backbone.name(),
            feature_dim: ex.backbone.feature_dim(),
            cache: &args.cache,
            run_dir: &run_dir,
            master_seed: targs.seed,
            fold_seed: None,
            folds: None,
            fusion: None,
            train: &config,
            images: manifest.len(),
        },
    )?;
    let final_acc = outcome.epoch_accuracy.last().copied().unwrap_or(0.0);
    println!("final patch training accuracy: {:.2}%", 100.0 * final_acc);
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn evaluate(
    source: &SourceArgs,
    args: &BackboneArgs,
    targs: &TrainArgs,
    run: &RunArgs,
    folds: usize,
    fusion: FusionMode,
) -> Result<()> {
    let config = train_config(targs);
    config.validate()?;
    let ex = extract(source, args)?;
    let manifest = covered(&ex);
    let fold_seed = seed::derive(targs.seed, Stream::Folds, 0);
    let report = run_cross_validation(&manifest, &ex.outcome.store, &config, fusion, folds, fold_seed)?;

    let run_dir = create_run_dir(&run.out)?;
    write_json(
        &run_dir.join("config.json"),
        &RunConfig {
            command: "evaluate",
            created: chrono::Utc::now().to_rfc3339(),
            dataset: source.dataset.as_deref(),
            manifest: source.manifest.as_deref(),
            backbone: &args.backbone,
            backbone_name: ex.backbone.name(),
            feature_dim: ex.backbone.feature_dim(),
            cache: &args.cache,
            run_dir: &run_dir,
            master_seed: targs.seed,
            fold_seed: Some(fold_seed),
            folds: Some(folds),
            fusion: Some(fusion),
            train: &config,
            images: manifest.len(),
        },
    )?;
    let report_path = run_dir.join("report.json");
    report.save(&report_path)?;
    let classes = &report.config.classes;
    write_text(&run_dir.join("confusion_patch.csv"), &confusion_csv(&report.patch_confusion, classes))?;
    write_text(&run_dir.join("confusion_fused.csv"), &confusion_csv(&report.fused_confusion, classes))?;
    print!("{}", report.summary());
    println!();
    println!("report: {}", report_path.display());
    Ok(())
}

#[derive(Serialize)]
struct PatchPrediction {
    position: PatchPosition,
    probabilities: Vec<f64>,
}

#[derive(Serialize)]
struct Prediction<'a> {
    image: &'a Path,
    backbone: &'a str,
    fusion: FusionMode,
    school: &'static str,
    class_index: usize,
    fused_scores: &'a [f64],
    patches: Vec<PatchPrediction>,
}

fn predict(image: &Path, backbone: &str, checkpoint: &Path, fusion: FusionMode) -> Result<()> {
    let ckpt = HeadCheckpoint::load(checkpoint)?;
    let extractor = open_backbone(backbone)?;
    if ckpt.params.feature_dim != extractor.feature_dim() {
        return Err(Error::Manifest(format!(
            "checkpoint expects {} features but backbone {} produces {}",
            ckpt.params.feature_dim,
            extractor.name(),
            extractor.feature_dim()
        )));
    }
    if ckpt.backbone != extractor.name() {
        log::warn!(
            "checkpoint was trained on {} features, predicting with {}",
            ckpt.backbone,
            extractor.name()
        );
    }
    let decoded = open_image(image)?;
    let tensors = patchify(&decoded, extractor.preproc())?;
    let mut patches = Vec::with_capacity(tensors.len());
    for (position, tensor) in PatchPosition::ALL.into_iter().zip(&tensors) {
        let features = miniclass::backbone::extract_features(extractor.as_ref(), tensor)?;
        patches.push(PatchPrediction {
            position,
            probabilities: predict_proba(&ckpt.params, features.values())?.into_inner(),
        });
    }
    let probs: Vec<&[f64]> = patches.iter().map(|p| p.probabilities.as_slice()).collect();
    let fused = fuse_with_mode(&probs, fusion)?;
    let class_index = decide(&fused)?;
    let school = ArtSchool::from_index(class_index)
        .ok_or(Error::Label {
            index: class_index,
            num_classes: ArtSchool::ALL.len(),
        })?
        .display_name();
    let out = Prediction {
        image,
        backbone: extractor.name(),
        fusion,
        school,
        class_index,
        fused_scores: fused.values(),
        patches,
    };
    println!("{}", serde_json::to_string_pretty(&out).map_err(|e| Error::Config(e.to_string()))?);
    Ok(())
}

fn report_summary(path: &Path) -> Result<()> {
    let report = EvalReport::load(path)?;
    report.verify(1e-9)?;
    print!("{}", report.summary());
    Ok(())
}
