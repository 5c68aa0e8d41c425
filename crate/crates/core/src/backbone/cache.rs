//! On-disk feature cache.
//!
//! Layout: `<cache_dir>/<backbone>/features.bin` holds little-endian `f32`
//! vectors back to back; `index.json` maps each `(image_id, position)` to
//! its byte offset, byte length and CRC-32. Entries that fail their checksum
//! are dropped on load and re-extracted.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{extract_features, FeatureExtractor, FeatureVector};
use crate::dataset::{DatasetManifest, ImageRecord, SkippedImage};
use crate::error::{Error, Result};
use crate::patching::{make_patch_set, open_image, PatchPosition, NUM_PATCHES};

const INDEX_FORMAT: &str = "miniclass-features/1";
const INDEX_FILE: &str = "index.json";
const DATA_FILE: &str = "features.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    backbone: String,
    feature_dim: usize,
    entries: BTreeMap<(String, PatchPosition), FeatureVector>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    format: String,
    backbone: String,
    feature_dim: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    image_id: String,
    position: PatchPosition,
    offset: u64,
    length: u64,
    checksum: u32,
}

/// Directory name for a backbone: anything outside `[A-Za-z0-9._-]` becomes `_`.
fn backbone_dir(cache_dir: &Path, backbone: &str) -> PathBuf {
    let safe: String = backbone
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    cache_dir.join(safe)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl FeatureStore {
    pub fn new(backbone: impl Into<String>, feature_dim: usize) -> Self {
        FeatureStore {
            backbone: backbone.into(),
            feature_dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn backbone_name(&self) -> &str {
        &self.backbone
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, image_id: &str, position: PatchPosition, features: FeatureVector) -> Result<()> {
        if features.dim() != self.feature_dim {
            return Err(Error::Shape(format!(
                "store {} holds {}-dim features, got {}",
                self.backbone,
                self.feature_dim,
                features.dim()
            )));
        }
        self.entries.insert((image_id.to_string(), position), features);
        Ok(())
    }

    pub fn get(&self, image_id: &str, position: PatchPosition) -> Option<&FeatureVector> {
        self.entries.get(&(image_id.to_string(), position))
    }

    pub fn has_image(&self, image_id: &str) -> bool {
        PatchPosition::ALL.iter().all(|&p| self.get(image_id, p).is_some())
    }

    /// All five patch vectors of an image, in position order.
    pub fn image_features(&self, image_id: &str) -> Result<[&FeatureVector; NUM_PATCHES]> {
        let mut out = Vec::with_capacity(NUM_PATCHES);
        for p in PatchPosition::ALL {
            out.push(self.get(image_id, p).ok_or_else(|| {
                Error::Data(format!(
                    "no cached {} features for ({image_id}, {p})",
                    self.backbone
                ))
            })?);
        }
        Ok(out.try_into().expect("five positions"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, PatchPosition, &FeatureVector)> {
        self.entries.iter().map(|((id, p), f)| (id.as_str(), *p, f))
    }

    /// Loads the cache for `backbone`. Returns the store and the number of
    /// entries discarded as corrupt. A missing or unreadable index yields an
    /// empty store.
    pub fn load(cache_dir: &Path, backbone: &str, feature_dim: usize) -> Result<(Self, usize)> {
        let mut store = FeatureStore::new(backbone, feature_dim);
        let dir = backbone_dir(cache_dir, backbone);
        let index_path = dir.join(INDEX_FILE);
        if !index_path.exists() {
            return Ok((store, 0));
        }
        let index: IndexFile = match fs::read_to_string(&index_path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
        {
            Ok(index) => index,
            Err(e) => {
                log::warn!("ignoring unreadable feature index {}: {e}", index_path.display());
                return Ok((store, 0));
            }
        };
        if index.format != INDEX_FORMAT || index.backbone != backbone || index.feature_dim != feature_dim {
            log::warn!(
                "ignoring feature cache {} (format {}, backbone {}, dim {})",
                dir.display(),
                index.format,
                index.backbone,
                index.feature_dim
            );
            return Ok((store, 0));
        }
        let data_path = dir.join(DATA_FILE);
        let data = fs::read(&data_path).unwrap_or_default();

        let mut corrupted = 0;
        for e in index.entries {
            let range = e.offset as usize..(e.offset + e.length) as usize;
            let vector = data
                .get(range)
                .filter(|bytes| bytes.len() == feature_dim * 4 && crc32fast::hash(bytes) == e.checksum)
                .and_then(|bytes| {
                    let values = bytes
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect();
                    FeatureVector::new(values).ok()
                });
            match vector {
                Some(v) => {
                    store.entries.insert((e.image_id, e.position), v);
                }
                None => {
                    log::warn!("discarding corrupt cache entry ({}, {})", e.image_id, e.position);
                    corrupted += 1;
                }
            }
        }
        Ok((store, corrupted))
    }

    pub fn save(&self, cache_dir: &Path) -> Result<()> {
        let dir = backbone_dir(cache_dir, &self.backbone);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut data = Vec::with_capacity(self.entries.len() * self.feature_dim * 4);
        let mut entries = Vec::with_capacity(self.entries.len());
        for ((image_id, position), v) in &self.entries {
            let offset = data.len() as u64;
            for x in v.values() {
                data.extend_from_slice(&x.to_le_bytes());
            }
            let bytes = &data[offset as usize..];
            entries.push(IndexEntry {
                image_id: image_id.clone(),
                position: *position,
                offset,
                length: bytes.len() as u64,
                checksum: crc32fast::hash(bytes),
            });
        }
        let index = IndexFile {
            format: INDEX_FORMAT.into(),
            backbone: self.backbone.clone(),
            feature_dim: self.feature_dim,
            entries,
        };
        let index_path = dir.join(INDEX_FILE);
        let mut json = serde_json::to_vec_pretty(&index).map_err(|e| Error::json(&index_path, e))?;
        json.push(b'\n');
        write_atomic(&dir.join(DATA_FILE), &data)?;
        write_atomic(&index_path, &json)
    }
}

#[derive(Debug)]
pub struct ExtractionOutcome {
    pub store: FeatureStore,
    /// Number of backbone forward passes performed.
    pub inferences: usize,
    /// Images that could not be decoded or patched.
    pub skipped: Vec<SkippedImage>,
    /// Cache entries discarded because their checksum failed.
    pub corrupted: usize,
}

fn resolve_path(manifest: &DatasetManifest, record: &ImageRecord) -> PathBuf {
    if record.path.is_absolute() || record.path.exists() {
        record.path.clone()
    } else {
        manifest.root.join(&record.id)
    }
}

type ImageFeatures = Vec<(PatchPosition, FeatureVector)>;

/// Fills the cache with features for every `(image, position)` in the
/// manifest, running the backbone only for missing entries.
pub fn extract_dataset_features(
    manifest: &DatasetManifest,
    extractor: &dyn FeatureExtractor,
    cache_dir: &Path,
) -> Result<ExtractionOutcome> {
    let (mut store, corrupted) = FeatureStore::load(cache_dir, extractor.name(), extractor.feature_dim())?;
    let inferences = AtomicUsize::new(0);

    let todo: Vec<(&ImageRecord, Vec<PatchPosition>)> = manifest
        .records
        .iter()
        .filter_map(|r| {
            let missing: Vec<PatchPosition> = PatchPosition::ALL
                .into_iter()
                .filter(|&p| store.get(&r.id, p).is_none())
                .collect();
            (!missing.is_empty()).then_some((r, missing))
        })
        .collect();

    let results: Vec<Result<std::result::Result<(String, ImageFeatures), SkippedImage>>> = todo
        .par_iter()
        .map(|(record, missing)| {
            let path = resolve_path(manifest, record);
            let skip = |reason: String| {
                log::warn!("skipping {}: {reason}", record.id);
                Ok(Err(SkippedImage {
                    id: record.id.clone(),
                    reason,
                }))
            };
            let image = match open_image(&path) {
                Ok(image) => image,
                Err(e) => return skip(e.to_string()),
            };
            let patches = match make_patch_set(record, &image, extractor.preproc()) {
                Ok(p) => p,
                Err(e) => return skip(e.to_string()),
            };
            let mut features = Vec::with_capacity(missing.len());
            for &position in missing {
                let f = extract_features(extractor, patches.get(position))?;
                inferences.fetch_add(1, Ordering::Relaxed);
                features.push((position, f));
            }
            Ok(Ok((record.id.clone(), features)))
        })
        .collect();

    let mut skipped = Vec::new();
    for result in results {
        match result? {
            Ok((id, features)) => {
                for (position, f) in features {
                    store.insert(&id, position, f)?;
                }
            }
            Err(s) => skipped.push(s),
        }
    }

    let inferences = inferences.into_inner();
    let index_exists = backbone_dir(cache_dir, extractor.name()).join(INDEX_FILE).exists();
    if inferences > 0 || corrupted > 0 || !index_exists {
        store.save(cache_dir)?;
    }
    Ok(ExtractionOutcome {
        store,
        inferences,
        skipped,
        corrupted,
    })
}
