use alloc::vec::Vec;

use super::{LabelMap, LabeledSample};
use crate::rng::SeededRng;
use crate::tensor::Tensor3;

/// A flip / rotation / isotropic scaling about the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricTransform {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Radians, counter-clockwise.
    pub rotation: f64,
    pub scale: f64,
}

impl GeometricTransform {
    pub const IDENTITY: GeometricTransform = GeometricTransform {
        flip_horizontal: false,
        flip_vertical: false,
        rotation: 0.0,
        scale: 1.0,
    };

    /// Source coordinate sampled for output pixel `(y, x)`.
    fn source(&self, y: f64, x: f64, height: usize, width: usize) -> (f64, f64) {
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        let (mut dy, mut dx) = (y - cy, x - cx);
        if self.rotation != 0.0 || self.scale != 1.0 {
            let (sin, cos) = libm::sincos(-self.rotation);
            let ry = (sin * dx + cos * dy) / self.scale;
            let rx = (cos * dx - sin * dy) / self.scale;
            dy = ry;
            dx = rx;
        }
        if self.flip_vertical {
            dy = -dy;
        }
        if self.flip_horizontal {
            dx = -dx;
        }
        (cy + dy, cx + dx)
    }
}

/// Ranges from which [`augment`] samples a transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            max_rotation: 0.26,
            scale_range: (0.9, 1.1),
        }
    }
}

fn clamp_index(v: f64, n: usize) -> usize {
    if v <= 0.0 {
        0
    } else {
        (v as usize).min(n - 1)
    }
}

fn bilinear(img: &[f64], height: usize, width: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (height - 1) as f64);
    let x = x.clamp(0.0, (width - 1) as f64);
    let (y0, x0) = (libm::floor(y) as usize, libm::floor(x) as usize);
    let (y1, x1) = ((y0 + 1).min(height - 1), (x0 + 1).min(width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| img[yy * width + xx];
    let top = if fx == 0.0 { at(y0, x0) } else { at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 { at(y1, x0) } else { at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx };
    top * (1.0 - fy) + bottom * fy
}

/// Applies `t` to image (bilinear) and label (nearest neighbor); samples
/// outside the grid are clamped to the border.
pub fn apply_transform(sample: &LabeledSample, t: &GeometricTransform) -> LabeledSample {
    let (_, h, w) = sample.image.shape();
    let src_img = sample.image.plane(0);
    let src_idx = sample.label.indices();
    let mut img = Vec::with_capacity(h * w);
    let mut idx = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = t.source(y as f64, x as f64, h, w);
            img.push(bilinear(src_img, h, w, sy, sx));
            let ny = clamp_index(libm::round(sy), h);
            let nx = clamp_index(libm::round(sx), w);
            idx.push(src_idx[ny * w + nx]);
        }
    }
    LabeledSample {
        image: Tensor3::from_vec(1, h, w, img).expect("shape preserved"),
        label: LabelMap::from_indices(h, w, &idx, sample.label.class_names().to_vec())
            .expect("indices come from a valid map"),
    }
}

/// Random flip, rotation and scaling shared by image and label.
pub fn augment(sample: &LabeledSample, seed: u64, config: &AugmentConfig) -> LabeledSample {
    let mut rng = SeededRng::new(seed);
    let t = GeometricTransform {
        flip_horizontal: rng.uniform() < config.flip_probability,
        flip_vertical: false,
        rotation: rng.range(-config.max_rotation, config.max_rotation),
        scale: rng.range(config.scale_range.0, config.scale_range.1),
    };
    apply_transform(sample, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_anatomy, normalize, render_modality, Layout, ModalityProfile};

    fn sample(seed: u64) -> LabeledSample {
        let label = generate_anatomy(seed, &Layout::abdominal()).unwrap();
        let raw = render_modality(&label, &ModalityProfile::modality_a(), seed).unwrap();
        LabeledSample {
            image: normalize(&raw).unwrap(),
            label,
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample(1);
        for t in [
            GeometricTransform { flip_horizontal: true, ..GeometricTransform::IDENTITY },
            GeometricTransform { flip_vertical: true, ..GeometricTransform::IDENTITY },
        ] {
            let once = apply_transform(&s, &t);
            assert_ne!(once, s);
            assert_eq!(apply_transform(&once, &t), s);
        }
    }

    #[test]
    fn zero_rotation_unit_scale_is_identity() {
        let s = sample(2);
        assert_eq!(apply_transform(&s, &GeometricTransform::IDENTITY), s);
    }

    #[test]
    fn hundred_augmentations_stay_one_hot() {
        let s = sample(3);
        let cfg = AugmentConfig {
            max_rotation: 1.0,
            scale_range: (0.7, 1.3),
            ..AugmentConfig::default()
        };
        for seed in 0..100 {
            let a = augment(&s, seed, &cfg);
            assert!(a.label.is_valid_onehot());
            assert!(a.image.is_finite());
        }
    }
}
