//! Synthetic class-per-folder corpus for offline runs: every image is a
//! class-specific dominant color plus seeded uniform pixel noise.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::ArtSchool;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub per_class: usize,
    pub width: u32,
    pub height: u32,
    /// Maximum absolute per-channel noise, in 8-bit levels.
    pub noise: u8,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            per_class: 20,
            width: 64,
            height: 48,
            noise: 60,
            seed: 7,
        }
    }
}

pub fn dominant_color(school: ArtSchool) -> [u8; 3] {
    match school {
        ArtSchool::Herat => [190, 60, 50],
        ArtSchool::Qajar => [60, 160, 70],
        ArtSchool::ShirazEAvval => [60, 80, 190],
        ArtSchool::TabrizEAvval => [200, 180, 60],
        ArtSchool::TabrizEDovvom => [150, 70, 170],
    }
}

/// Writes `<root>/<School>/<school>_<nnn>.png` for every class.
pub fn write_synthetic_dataset(root: &Path, spec: &SynthSpec) -> Result<()> {
    if spec.width < 2 || spec.height < 2 {
        return Err(Error::Config("synthetic images must be at least 2x2".into()));
    }
    for school in ArtSchool::ALL {
        let dir = root.join(school.display_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let base = dominant_color(school);
        for i in 0..spec.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed ^ ((school.index() as u64) << 32) ^ i as u64,
            );
            let noise = spec.noise as i16;
            let img = RgbImage::from_fn(spec.width, spec.height, |_, _| {
                Rgb(base.map(|b| (b as i16 + rng.random_range(-noise..=noise)).clamp(0, 255) as u8))
            });
            let path = dir.join(format!("{}_{i:03}.png", school.display_name().to_lowercase().replace(' ', "_")));
            img.save(&path).map_err(|source| Error::Image { path, source })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::scan_dataset;

    #[test]
    fn writes_a_scannable_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            per_class: 3,
            ..SynthSpec::default()
        };
        write_synthetic_dataset(dir.path(), &spec).unwrap();
        let m = scan_dataset(dir.path()).unwrap();
        assert_eq!(m.len(), 15);
        assert!(m.counts.values().all(|&n| n == 3));
        assert!(m.records.iter().all(|r| (r.width, r.height) == (64, 48)));
    }
}
