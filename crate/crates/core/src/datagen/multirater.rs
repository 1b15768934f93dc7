use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{write_dataset, DatasetManifest};
use super::LabelMap;
use crate::error::{Error, Result};

/// Synthetic conditional task: a smooth blob field is the input image and
/// each rater segments it by thresholding at their own level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiraterConfig {
    pub height: usize,
    pub width: usize,
    pub raters: usize,
    /// Range of the per-image base threshold.
    pub base_threshold: (f64, f64),
    /// Rater offsets are uniform in `[-spread, spread]` around the base.
    pub spread: f64,
    pub max_blobs: usize,
    /// Blob width as a fraction of the shorter image side.
    pub blob_sigma: (f64, f64),
}

impl Default for MultiraterConfig {
    fn default() -> Self {
        MultiraterConfig {
            height: 16,
            width: 16,
            raters: 4,
            base_threshold: (0.3, 0.6),
            spread: 0.15,
            max_blobs: 3,
            blob_sigma: (0.12, 0.25),
        }
    }
}

impl MultiraterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.raters < 2 {
            return Err(Error::invalid(format!("need at least 2 raters, got {}", self.raters)));
        }
        if self.height == 0 || self.width == 0 || self.max_blobs == 0 {
            return Err(Error::invalid("image shape and blob count must be positive"));
        }
        if !(self.base_threshold.0 <= self.base_threshold.1 && self.spread >= 0.0) {
            return Err(Error::invalid("threshold range is empty"));
        }
        if !(self.blob_sigma.0 > 0.0 && self.blob_sigma.0 <= self.blob_sigma.1) {
            return Err(Error::invalid("blob width range is empty"));
        }
        Ok(())
    }
}

/// One generated image with its rater annotations.
#[derive(Clone, Debug)]
pub struct MultiraterSample {
    /// Row-major `(h, w)` field with maximum 1.
    pub field: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub masks: Vec<LabelMap>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Smooth intensity field made of 1..=max_blobs Gaussian bumps, scaled to max 1.
pub fn blob_field<R: Rng + ?Sized>(rng: &mut R, cfg: &MultiraterConfig) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w) as f64;
    let n = rng.random_range(1..=cfg.max_blobs);
    let mut field = vec![0.0; h * w];
    for _ in 0..n {
        let cy = uniform(rng, (0.2, 0.8)) * h as f64;
        let cx = uniform(rng, (0.2, 0.8)) * w as f64;
        let s = uniform(rng, cfg.blob_sigma) * side;
        let amp = uniform(rng, (0.5, 1.0));
        for i in 0..h {
            for j in 0..w {
                let dy = i as f64 + 0.5 - cy;
                let dx = j as f64 + 0.5 - cx;
                field[i * w + j] += amp * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
            }
        }
    }
    let peak = field.iter().cloned().fold(0.0, f64::max);
    field.iter_mut().for_each(|v| *v /= peak);
    field
}

/// Binary masks `field > t` for each threshold.
pub fn threshold_masks(field: &[f64], h: usize, w: usize, thresholds: &[f64]) -> Vec<LabelMap> {
    thresholds
        .iter()
        .map(|&t| {
            let mask: Vec<bool> = field.iter().map(|&v| v > t).collect();
            LabelMap::from_mask(h, w, &mask)
        })
        .collect()
}

pub fn multirater_sample<R: Rng + ?Sized>(rng: &mut R, cfg: &MultiraterConfig) -> MultiraterSample {
    let field = blob_field(rng, cfg);
    let base = uniform(rng, cfg.base_threshold);
    let thresholds: Vec<f64> =
        (0..cfg.raters).map(|_| base + uniform(rng, (-cfg.spread, cfg.spread))).collect();
    let masks = threshold_masks(&field, cfg.height, cfg.width, &thresholds);
    MultiraterSample { field, thresholds, masks }
}

pub fn multirater_generate(dir: &Path, seed: u64, count: usize, cfg: &MultiraterConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut images = Vec::with_capacity(count * h * w);
    let mut labels = Vec::with_capacity(count * cfg.raters * 2 * h * w);
    for _ in 0..count {
        let s = multirater_sample(&mut rng, cfg);
        images.extend(s.field.iter().map(|&v| v as f32));
        for m in &s.masks {
            labels.extend_from_slice(m.values());
        }
    }
    let mut generator = serde_json::to_value(cfg).expect("config serialises");
    generator["generator"] = "multirater".into();
    write_dataset(dir, "multirater", seed, [1, h, w], [2, h, w], cfg.raters, &images, &labels, generator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::dataset_read;

    #[test]
    fn equal_thresholds_give_identical_masks() {
        let cfg = MultiraterConfig { spread: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = multirater_sample(&mut rng, &cfg);
            assert!(s.masks.windows(2).all(|p| p[0] == p[1]));
        }
    }

    #[test]
    fn ordered_thresholds_give_nested_masks() {
        let cfg = MultiraterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let field = blob_field(&mut rng, &cfg);
            let masks = threshold_masks(&field, 16, 16, &[0.2, 0.35, 0.5, 0.65]);
            for p in masks.windows(2) {
                let (lo, hi) = (p[0].foreground(), p[1].foreground());
                assert!(lo.iter().zip(&hi).all(|(&a, &b)| a || !b));
            }
        }
    }

    #[test]
    fn field_peaks_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = blob_field(&mut rng, &MultiraterConfig::default());
        let peak = f.iter().cloned().fold(f64::MIN, f64::max);
        assert!((peak - 1.0).abs() < 1e-12);
        assert!(f.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn generation_is_byte_identical_and_readable() {
        let cfg = MultiraterConfig { raters: 4, ..Default::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        multirater_generate(a.path(), 11, 12, &cfg).unwrap();
        multirater_generate(b.path(), 11, 12, &cfg).unwrap();
        for f in ["manifest.json", "images.bin", "labels.bin"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let ds = dataset_read(a.path()).unwrap();
        assert_eq!(ds.manifest.annotators_per_image, 4);
        assert!(ds.iter().all(|r| r.labels.len() == 4));
    }

    #[test]
    fn rejects_single_rater() {
        let cfg = MultiraterConfig { raters: 1, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        assert!(multirater_generate(dir.path(), 0, 1, &cfg).is_err());
    }
}
