//! Deterministic two-modality phantom datasets.
//!
//! The same label map is rendered under two intensity profiles; the first
//! modality keeps every class annotated, the second exposes only the seen
//! classes to training while the full labels stay available for evaluation.

mod anatomy;
mod augment;
mod bundle;
mod render;

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor3;

pub use anatomy::{generate_anatomy, Layout, Region, StructureTemplate};
pub use augment::{augment, apply_transform, AugmentConfig, GeometricTransform};
pub use bundle::{build_bundle, partition_classes, BundleConfig, DatasetBundle};
pub use render::{normalize, render_modality, ModalityProfile, Transfer};

/// One-hot segmentation map, `C × H × W`, channel 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    onehot: Tensor3,
    class_names: Vec<String>,
}

impl LabelMap {
    /// Builds a map from per-pixel class indices (row-major, `height × width`).
    pub fn from_indices(
        height: usize,
        width: usize,
        indices: &[usize],
        class_names: Vec<String>,
    ) -> Result<Self> {
        if indices.len() != height * width {
            return Err(shape_err("LabelMap::from_indices", height * width, indices.len()));
        }
        let classes = class_names.len();
        if classes < 2 {
            return Err(Error::Invalid("a label map needs background plus one structure".into()));
        }
        let mut onehot = Tensor3::zeros(classes, height, width);
        for (p, &c) in indices.iter().enumerate() {
            if c >= classes {
                return Err(Error::Invalid(alloc::format!("class index {c} out of range")));
            }
            onehot.as_mut_slice()[c * height * width + p] = 1.0;
        }
        Ok(Self { onehot, class_names })
    }

    pub fn from_onehot(onehot: Tensor3, class_names: Vec<String>) -> Result<Self> {
        if onehot.channels() != class_names.len() {
            return Err(shape_err("LabelMap::from_onehot", class_names.len(), onehot.channels()));
        }
        let map = Self { onehot, class_names };
        if !map.is_valid_onehot() {
            return Err(Error::Invalid("label tensor is not one-hot".into()));
        }
        Ok(map)
    }

    pub fn onehot(&self) -> &Tensor3 {
        &self.onehot
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn classes(&self) -> usize {
        self.onehot.channels()
    }

    pub fn height(&self) -> usize {
        self.onehot.height()
    }

    pub fn width(&self) -> usize {
        self.onehot.width()
    }

    /// Per-pixel class index, row-major.
    pub fn indices(&self) -> Vec<usize> {
        let n = self.onehot.plane_len();
        let mut out = alloc::vec![0usize; n];
        for c in 0..self.classes() {
            for (p, &v) in self.onehot.plane(c).iter().enumerate() {
                if v == 1.0 {
                    out[p] = c;
                }
            }
        }
        out
    }

    pub fn class_at(&self, y: usize, x: usize) -> usize {
        (0..self.classes())
            .find(|&c| self.onehot.get(c, y, x) == 1.0)
            .unwrap_or(0)
    }

    /// Pixel count of channel `c`.
    pub fn area(&self, c: usize) -> usize {
        self.onehot.plane(c).iter().filter(|&&v| v == 1.0).count()
    }

    /// Binary mask of channel `c`.
    pub fn mask(&self, c: usize) -> Vec<bool> {
        self.onehot.plane(c).iter().map(|&v| v == 1.0).collect()
    }

    /// Every pixel has entries in {0, 1} summing to exactly one.
    pub fn is_valid_onehot(&self) -> bool {
        let n = self.onehot.plane_len();
        let data = self.onehot.as_slice();
        (0..n).all(|p| {
            let mut sum = 0.0;
            for c in 0..self.classes() {
                let v = data[c * n + p];
                if v != 0.0 && v != 1.0 {
                    return false;
                }
                sum += v;
            }
            sum == 1.0
        })
    }

    /// The restricted view exposing only `seen` structure channels.
    pub fn seen_view(&self, seen: &[usize]) -> SeenLabels {
        let (_, h, w) = self.onehot.shape();
        let mut mask = Tensor3::zeros(seen.len(), h, w);
        for (k, &c) in seen.iter().enumerate() {
            mask.plane_mut(k).copy_from_slice(self.onehot.plane(c));
        }
        SeenLabels {
            channels: seen.to_vec(),
            mask,
        }
    }
}

/// Seen-class annotations of the second modality.
///
/// `mask` holds `C_s` channels; `channels[k]` is the index of channel `k` in
/// the full `C`-class output of a model. Pixels of unseen structures carry no
/// positive entry, exactly like background.
#[derive(Debug, Clone, PartialEq)]
pub struct SeenLabels {
    pub channels: Vec<usize>,
    pub mask: Tensor3,
}

impl SeenLabels {
    pub fn seen_count(&self) -> usize {
        self.channels.len()
    }
}

/// An image with its full label map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `1 × H × W`, standardized.
    pub image: Tensor3,
    pub label: LabelMap,
}
