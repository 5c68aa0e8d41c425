//! Class-per-folder corpus ingestion and image-level stratified k-fold splits.
//!
//! The expected layout is `<root>/<SchoolName>/<images>`. School folders are
//! matched case-insensitively after stripping spaces, dashes and underscores,
//! so `Shiraz-e Avval`, `shiraz_e_avval` and `ShirazEAvval` all map to the
//! same label. Any other folder is rejected.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

pub const NUM_CLASSES: usize = 5;

/// The five schools, in class-table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ArtSchool {
    Herat,
    Qajar,
    ShirazEAvval,
    TabrizEAvval,
    TabrizEDovvom,
}

impl ArtSchool {
    pub const ALL: [ArtSchool; NUM_CLASSES] = [
        ArtSchool::Herat,
        ArtSchool::Qajar,
        ArtSchool::ShirazEAvval,
        ArtSchool::TabrizEAvval,
        ArtSchool::TabrizEDovvom,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ArtSchool::Herat => "Herat",
            ArtSchool::Qajar => "Qajar",
            ArtSchool::ShirazEAvval => "Shiraz-e Avval",
            ArtSchool::TabrizEAvval => "Tabriz-e Avval",
            ArtSchool::TabrizEDovvom => "Tabriz-e Dovvom",
        }
    }

    fn folder_key(self) -> &'static str {
        match self {
            ArtSchool::Herat => "herat",
            ArtSchool::Qajar => "qajar",
            ArtSchool::ShirazEAvval => "shirazeavval",
            ArtSchool::TabrizEAvval => "tabrizeavval",
            ArtSchool::TabrizEDovvom => "tabrizedovvom",
        }
    }

    /// Maps a dataset folder name onto a school.
    pub fn from_folder_name(name: &str) -> Option<Self> {
        let key: String = name
            .chars()
            .filter(|c| !matches!(c, ' ' | '-' | '_'))
            .flat_map(char::to_lowercase)
            .collect();
        Self::ALL.into_iter().find(|s| s.folder_key() == key)
    }
}

impl fmt::Display for ArtSchool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Path relative to the dataset root, `/`-separated.
    pub id: String,
    pub path: PathBuf,
    pub label: ArtSchool,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub skipped: Vec<SkippedImage>,
    pub records: Vec<ImageRecord>,
    pub counts: BTreeMap<ArtSchool, usize>,
}

impl DatasetManifest {
    /// Builds a manifest from records, sorting them and recomputing counts.
    pub fn from_records(root: impl Into<PathBuf>, mut records: Vec<ImageRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let manifest = DatasetManifest {
            root: root.into(),
            skipped: Vec::new(),
            counts: count_labels(&records),
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn count(&self, label: ArtSchool) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    /// Keeps only the records accepted by `keep`, recomputing counts.
    pub fn retain(&self, mut keep: impl FnMut(&ImageRecord) -> bool) -> DatasetManifest {
        let records: Vec<ImageRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        DatasetManifest {
            root: self.root.clone(),
            skipped: self.skipped.clone(),
            counts: count_labels(&records),
            records,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for pair in self.records.windows(2) {
            if pair[0].id >= pair[1].id {
                return Err(Error::Config(format!(
                    "manifest records not strictly sorted by id at {:?}",
                    pair[1].id
                )));
            }
        }
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Config(format!("duplicate image id {:?}", r.id)));
            }
            if r.width < 2 || r.height < 2 {
                return Err(Error::Config(format!(
                    "image {:?} is {}x{}; both sides must be at least 2",
                    r.id, r.width, r.height
                )));
            }
        }
        if count_labels(&self.records) != self.counts {
            return Err(Error::Config(
                "manifest counts disagree with its records".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn count_labels(records: &[ImageRecord]) -> BTreeMap<ArtSchool, usize> {
    let mut counts: BTreeMap<ArtSchool, usize> = ArtSchool::ALL.iter().map(|&s| (s, 0)).collect();
    for r in records {
        *counts.entry(r.label).or_default() += 1;
    }
    counts
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn relative_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Scans a class-per-folder corpus into a manifest.
///
/// Image dimensions come from file headers only. Files with an image
/// extension whose header cannot be read, or that are smaller than 2x2, are
/// reported in `skipped` instead of failing the scan.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::DatasetRoot(root.to_path_buf()));
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;

    let mut class_dirs = Vec::new();
    let mut offenders = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        match ArtSchool::from_folder_name(&name) {
            Some(label) => class_dirs.push((label, path)),
            None => offenders.push(name),
        }
    }
    if !offenders.is_empty() {
        offenders.sort();
        return Err(Error::Layout(offenders));
    }

    let mut candidates = Vec::new();
    for (label, dir) in &class_dirs {
        for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.clone());
                Error::io(path, e.into())
            })?;
            if entry.file_type().is_file() && is_image_file(entry.path()) {
                candidates.push((*label, entry.into_path()));
            }
        }
    }

    let probed: Vec<std::result::Result<ImageRecord, SkippedImage>> = candidates
        .into_par_iter()
        .map(|(label, path)| {
            let id = relative_id(root, &path);
            let dims = image::ImageReader::open(&path)
                .map_err(|e| e.to_string())
                .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
                .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()));
            match dims {
                Ok((width, height)) if width >= 2 && height >= 2 => Ok(ImageRecord {
                    id,
                    path,
                    label,
                    width,
                    height,
                }),
                Ok((width, height)) => Err(SkippedImage {
                    id,
                    reason: format!("image is {width}x{height}; both sides must be at least 2"),
                }),
                Err(reason) => Err(SkippedImage { id, reason }),
            }
        })
        .collect();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for p in probed {
        match p {
            Ok(r) => records.push(r),
            Err(s) => {
                log::warn!("skipping {}: {}", s.id, s.reason);
                skipped.push(s);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    skipped.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        skipped,
        counts: count_labels(&records),
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_index: usize,
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

/// Image-level stratified k-fold split.
///
/// Each class is shuffled with a generator derived from `seed`, then dealt
/// round-robin onto the folds. The starting fold carries over from one class
/// to the next, so per-class test counts differ by at most one and total test
/// fold sizes also differ by at most one.
pub fn stratified_kfold(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<Vec<FoldAssignment>> {
    if k < 2 {
        return Err(Error::Stratify(format!("k must be at least 2, got {k}")));
    }
    let mut by_class: BTreeMap<ArtSchool, Vec<&str>> =
        ArtSchool::ALL.iter().map(|&s| (s, Vec::new())).collect();
    for r in &manifest.records {
        by_class.entry(r.label).or_default().push(r.id.as_str());
    }
    if let Some((label, ids)) = by_class.iter().find(|(_, ids)| ids.len() < k) {
        return Err(Error::Stratify(format!(
            "class {label} has {} images, fewer than k = {k}",
            ids.len()
        )));
    }

    let mut rng = seed::rng(seed, Stream::Folds);
    let mut test: Vec<BTreeSet<String>> = vec![BTreeSet::new(); k];
    let mut next_fold = 0usize;
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids.iter() {
            test[next_fold].insert((*id).to_string());
            next_fold = (next_fold + 1) % k;
        }
    }

    let all: BTreeSet<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    Ok(test
        .into_iter()
        .enumerate()
        .map(|(fold_index, test_ids)| FoldAssignment {
            fold_index,
            train_ids: all.difference(&test_ids).cloned().collect(),
            test_ids,
        })
        .collect())
}

pub fn one_hot(label: ArtSchool, num_classes: usize) -> Result<Vec<f32>> {
    let index = label.index();
    if index >= num_classes {
        return Err(Error::Label { index, num_classes });
    }
    let mut v = vec![0.0; num_classes];
    v[index] = 1.0;
    Ok(v)
}
