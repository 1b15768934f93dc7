//! Synthetic datasets: MarkovShapes (with its exactly enumerable pixel
//! covariance), a multi-rater thresholding task, and the on-disk format
//! shared by both.

mod dataset;
mod markovshapes;
mod multirater;

pub use dataset::{dataset_read, IMAGES_FILE, LABELS_FILE, MANIFEST_FILE, write_dataset, Dataset, DatasetManifest, FileEntry, Record};
pub use markovshapes::{
    markovshapes_enumerate, markovshapes_exact_covariance, markovshapes_generate, markovshapes_sample,
    markovshapes_sample_states, nearest_template_distance, InitialDistribution, QuadrantState, ShapeAtlas,
    TransitionMatrix,
};
pub use multirater::{blob_field, multirater_generate, multirater_sample, threshold_masks, MultiraterConfig, MultiraterSample};

use crate::error::{Error, Result};

/// One-hot category field over a pixel grid, stored as `(k, h·w)` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    k: usize,
    h: usize,
    w: usize,
    values: Vec<u8>,
}

impl LabelMap {
    /// Validates the one-hot invariant.
    pub fn new(k: usize, h: usize, w: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != k * h * w {
            return Err(Error::ShapeMismatch { expected: vec![k, h, w], actual: vec![values.len()] });
        }
        let d = h * w;
        for j in 0..d {
            let mut s = 0u32;
            for c in 0..k {
                let v = values[c * d + j];
                if v > 1 {
                    return Err(Error::invalid(format!("label entry {v} is not 0/1")));
                }
                s += v as u32;
            }
            if s != 1 {
                return Err(Error::invalid(format!("pixel {j} is not one-hot (sum {s})")));
            }
        }
        Ok(LabelMap { k, h, w, values })
    }

    /// Builds a one-hot map from per-pixel class indices.
    pub fn from_classes(k: usize, h: usize, w: usize, classes: &[usize]) -> Self {
        assert_eq!(classes.len(), h * w);
        let d = h * w;
        let mut values = vec![0u8; k * d];
        for (j, &c) in classes.iter().enumerate() {
            assert!(c < k, "class {c} out of range for k = {k}");
            values[c * d + j] = 1;
        }
        LabelMap { k, h, w, values }
    }

    /// Binary map with foreground as class 1.
    pub fn from_mask(h: usize, w: usize, mask: &[bool]) -> Self {
        let classes: Vec<usize> = mask.iter().map(|&m| m as usize).collect();
        LabelMap::from_classes(2, h, w, &classes)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn classes(&self) -> Vec<usize> {
        let d = self.pixels();
        (0..d).map(|j| (0..self.k).find(|&c| self.values[c * d + j] == 1).unwrap_or(0)).collect()
    }

    /// Mask of pixels belonging to class `c`.
    pub fn class_mask(&self, c: usize) -> Vec<bool> {
        let d = self.pixels();
        self.values[c * d..(c + 1) * d].iter().map(|&v| v == 1).collect()
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.class_mask(1)
    }

    /// One-hot values as `f64`, flattened `(k, d)`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}
