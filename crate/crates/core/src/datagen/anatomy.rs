use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::LabelMap;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

const MAX_ATTEMPTS: usize = 100;

/// Axis-aligned placement region in image-relative coordinates (`0..=1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub y: (f64, f64),
    pub x: (f64, f64),
}

/// Blob template: a rotated ellipse with a low-order radial wobble.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureTemplate {
    pub name: String,
    /// Where the blob center may fall.
    pub center: Region,
    /// Semi-axis ranges, relative to image height / width.
    pub radius_y: (f64, f64),
    pub radius_x: (f64, f64),
    /// Max absolute rotation in radians.
    pub max_rotation: f64,
    /// Relative amplitude of the radial wobble.
    pub wobble: f64,
}

/// Image size plus structure templates; later templates overwrite earlier
/// ones where they overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub height: usize,
    pub width: usize,
    pub structures: Vec<StructureTemplate>,
}

impl Layout {
    /// Four abdominal-style structures on a 64×64 grid.
    pub fn abdominal() -> Self {
        Self::abdominal_sized(64, 64)
    }

    pub fn abdominal_sized(height: usize, width: usize) -> Self {
        let t = |name: &str, cy: (f64, f64), cx: (f64, f64), ry: (f64, f64), rx: (f64, f64)| {
            StructureTemplate {
                name: name.to_string(),
                center: Region { y: cy, x: cx },
                radius_y: ry,
                radius_x: rx,
                max_rotation: 0.35,
                wobble: 0.12,
            }
        };
        Self {
            height,
            width,
            structures: vec![
                t("liver", (0.30, 0.40), (0.27, 0.37), (0.15, 0.19), (0.14, 0.18)),
                t("r_kidney", (0.66, 0.74), (0.22, 0.30), (0.08, 0.10), (0.06, 0.08)),
                t("l_kidney", (0.66, 0.74), (0.70, 0.78), (0.08, 0.10), (0.06, 0.08)),
                t("spleen", (0.28, 0.38), (0.68, 0.76), (0.10, 0.13), (0.08, 0.10)),
            ],
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        core::iter::once("background".to_string())
            .chain(self.structures.iter().map(|s| s.name.clone()))
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.structures.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("layout size must be positive".into()));
        }
        if self.structures.is_empty() {
            return Err(Error::Invalid("layout needs at least one structure".into()));
        }
        Ok(())
    }
}

fn rasterize(template: &StructureTemplate, height: usize, width: usize, rng: &mut SeededRng) -> Vec<usize> {
    let cy = rng.range(template.center.y.0, template.center.y.1) * height as f64;
    let cx = rng.range(template.center.x.0, template.center.x.1) * width as f64;
    let ry = rng.range(template.radius_y.0, template.radius_y.1) * height as f64;
    let rx = rng.range(template.radius_x.0, template.radius_x.1) * width as f64;
    let angle = rng.range(-template.max_rotation, template.max_rotation);
    let (a2, a3) = (rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
    let (p2, p3) = (rng.range(0.0, core::f64::consts::TAU), rng.range(0.0, core::f64::consts::TAU));
    let (sin, cos) = libm::sincos(angle);
    let mut pixels = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let u = (cos * dx + sin * dy) / rx;
            let v = (-sin * dx + cos * dy) / ry;
            let theta = libm::atan2(v, u);
            let radius = 1.0
                + template.wobble
                    * 0.5
                    * (a2 * libm::cos(2.0 * theta + p2) + a3 * libm::cos(3.0 * theta + p3));
            if u * u + v * v <= radius * radius {
                pixels.push(y * width + x);
            }
        }
    }
    pixels
}

/// Samples a label map from `layout`. Structures are placed in order; a
/// placement is rejected when it is empty or would fully cover an earlier
/// structure.
pub fn generate_anatomy(seed: u64, layout: &Layout) -> Result<LabelMap> {
    layout.validate()?;
    let (h, w) = (layout.height, layout.width);
    let mut rng = SeededRng::new(seed);
    let mut indices = vec![0usize; h * w];
    for (k, template) in layout.structures.iter().enumerate() {
        let class = k + 1;
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let pixels = rasterize(template, h, w, &mut rng);
            if pixels.is_empty() {
                continue;
            }
            let mut candidate = indices.clone();
            for &p in &pixels {
                candidate[p] = class;
            }
            let survivors_ok = (1..class).all(|c| candidate.contains(&c));
            let background_ok = candidate.contains(&0);
            if survivors_ok && background_ok {
                indices = candidate;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Infeasible(template.name.clone()));
        }
    }
    LabelMap::from_indices(h, w, &indices, layout.class_names())
}
