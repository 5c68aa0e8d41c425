use std::fs;
use std::path::Path;

use miniclass::backbone::{
    extract_dataset_features, extract_features, stub_backbone, FeatureStore, FeatureVector,
};
use miniclass::dataset::scan_dataset;
use miniclass::patching::{PatchPosition, Tensor, PATCH_SIZE};
use miniclass::synth::{write_synthetic_dataset, SynthSpec};
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stub features recomputed from their definition: 32x32 cell means over
/// an 8x8 grid, then a `dim x 192` projection with entries `(2u - 1) / 8`.
fn stub_oracle(seed: u64, dim: usize, patch: &Tensor) -> Vec<f64> {
    let projection_stream = 6u64;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(projection_stream))));
    let mut pooled = Vec::with_capacity(192);
    for gy in 0..8 {
        for gx in 0..8 {
            for c in 0..3 {
                let mut sum = 0.0f64;
                for y in gy * 32..(gy + 1) * 32 {
                    for x in gx * 32..(gx + 1) * 32 {
                        sum += patch.get(y, x, c) as f64;
                    }
                }
                pooled.push(sum / 1024.0);
            }
        }
    }
    (0..dim)
        .map(|_| {
            pooled
                .iter()
                .map(|p| {
                    let u = (rng.next_u64() >> 11) as f64 * 2f64.powi(-53);
                    (2.0 * u - 1.0) / 8.0 * p
                })
                .sum()
        })
        .collect()
}

fn random_patch(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..PATCH_SIZE * PATCH_SIZE * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new((PATCH_SIZE, PATCH_SIZE, 3), data).unwrap()
}

#[test]
fn stub_matches_its_definition() {
    let stub = stub_backbone(7, 64).unwrap();
    for s in 0..3 {
        let patch = random_patch(s);
        let got = extract_features(&stub, &patch).unwrap();
        let want = stub_oracle(7, 64, &patch);
        for (g, w) in got.values().iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= 1e-5 * w.abs().max(1.0), "{g} vs {w}");
        }
    }
}

fn corpus(dir: &Path, per_class: usize) -> std::path::PathBuf {
    let root = dir.join("data");
    let spec = SynthSpec {
        per_class,
        width: 40,
        height: 30,
        ..SynthSpec::default()
    };
    write_synthetic_dataset(&root, &spec).unwrap();
    root
}

#[test]
fn cold_then_warm_extraction() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = scan_dataset(&corpus(dir.path(), 2)).unwrap();
    assert_eq!(manifest.len(), 10);
    let cache = dir.path().join("cache");
    let stub = stub_backbone(7, 16).unwrap();

    let cold = extract_dataset_features(&manifest, &stub, &cache).unwrap();
    assert_eq!(cold.inferences, 50);
    assert_eq!(cold.store.len(), 50);
    assert!(cold.skipped.is_empty());
    let bin = cache.join("stub-7-16/features.bin");
    let index = cache.join("stub-7-16/index.json");
    let (bin_bytes, index_bytes) = (fs::read(&bin).unwrap(), fs::read(&index).unwrap());
    assert_eq!(bin_bytes.len(), 50 * 16 * 4);

    let warm = extract_dataset_features(&manifest, &stub, &cache).unwrap();
    assert_eq!(warm.inferences, 0);
    assert_eq!(warm.store, cold.store);
    assert_eq!(fs::read(&bin).unwrap(), bin_bytes);
    assert_eq!(fs::read(&index).unwrap(), index_bytes);

    let other = stub_backbone(8, 16).unwrap();
    let fresh = extract_dataset_features(&manifest, &other, &cache).unwrap();
    assert_eq!(fresh.inferences, 50);
    assert_ne!(fresh.store, cold.store);
    assert!(cache.join("stub-8-16/index.json").exists());
}

#[test]
fn cached_features_equal_direct_extraction() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = scan_dataset(&corpus(dir.path(), 1)).unwrap();
    let stub = stub_backbone(3, 8).unwrap();
    let out = extract_dataset_features(&manifest, &stub, &dir.path().join("cache")).unwrap();
    for record in &manifest.records {
        let image = image::open(&record.path).unwrap();
        let set = miniclass::patching::make_patch_set(record, &image, &miniclass::patching::PreprocSpec::identity()).unwrap();
        for p in PatchPosition::ALL {
            let direct = extract_features(&stub, set.get(p)).unwrap();
            assert_eq!(out.store.get(&record.id, p), Some(&direct));
        }
    }
}

#[test]
fn corrupted_entry_is_re_extracted() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = scan_dataset(&corpus(dir.path(), 2)).unwrap();
    let cache = dir.path().join("cache");
    let stub = stub_backbone(7, 16).unwrap();
    let cold = extract_dataset_features(&manifest, &stub, &cache).unwrap();

    let bin = cache.join("stub-7-16/features.bin");
    let mut bytes = fs::read(&bin).unwrap();
    bytes[5] ^= 0xFF;
    fs::write(&bin, &bytes).unwrap();

    let repaired = extract_dataset_features(&manifest, &stub, &cache).unwrap();
    assert_eq!(repaired.corrupted, 1);
    assert_eq!(repaired.inferences, 1);
    assert_eq!(repaired.store, cold.store);
    let again = extract_dataset_features(&manifest, &stub, &cache).unwrap();
    assert_eq!((again.corrupted, again.inferences), (0, 0));
}

#[test]
fn undecodable_image_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let root = corpus(dir.path(), 2);
    let manifest = scan_dataset(&root).unwrap();
    let victim = manifest.records[0].clone();
    fs::write(&victim.path, b"not a png any more").unwrap();
    let out = extract_dataset_features(&manifest, &stub_backbone(1, 4).unwrap(), &dir.path().join("c")).unwrap();
    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.skipped[0].id, victim.id);
    assert!(!out.store.has_image(&victim.id));
    assert_eq!(out.store.len(), 45);
}

fn arb_vector(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(
        any::<f32>().prop_filter("finite", |v| v.is_finite()),
        dim,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn store_round_trip_is_lossless(
        vectors in prop::collection::vec(arb_vector(6), 1..12),
        ids in prop::collection::vec("[a-z]{1,6}/[a-z0-9 ]{1,8}\\.png", 1..12),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FeatureStore::new("prop backbone/1", 6);
        for (i, v) in vectors.into_iter().enumerate() {
            let id = &ids[i % ids.len()];
            let pos = PatchPosition::ALL[i % 5];
            store.insert(id, pos, FeatureVector::new(v).unwrap()).unwrap();
        }
        store.save(dir.path()).unwrap();
        let (loaded, corrupted) = FeatureStore::load(dir.path(), "prop backbone/1", 6).unwrap();
        prop_assert_eq!(corrupted, 0);
        prop_assert_eq!(loaded.len(), store.len());
        for (id, pos, v) in store.iter() {
            let back = loaded.get(id, pos).unwrap();
            let same_bits = back.values().iter().zip(v.values()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
        }
    }
}
