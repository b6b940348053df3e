//! Dice and average symmetric surface distance against full ground truth.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::datagen::{LabelMap, LabeledSample};
use crate::error::{shape_err, Error, Result};
use crate::nets::{inheritance_guidance, Architecture, SegmentationParams};
use crate::tensor::Tensor3;

/// Binary mask on an `height × width` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(shape_err("mask", height * width, bits.len()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn check(&self, other: &Mask, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(shape_err(op, (self.height, self.width), (other.height, other.width)));
        }
        Ok(())
    }

    /// Pixels of the mask with at least one 4-neighbor outside it; the
    /// image border counts as outside.
    pub fn boundary(&self) -> Mask {
        let (h, w) = (self.height, self.width);
        let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && self.bits[y as usize * w + x as usize];
        let bits = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                self.bits[i] && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
            })
            .collect();
        Mask { height: h, width: w, bits }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverlapCounts {
    pub intersection: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl OverlapCounts {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        pred.check(gt, "dice")?;
        let mut c = Self::default();
        for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
            c.intersection += (p && g) as usize;
            c.predicted += p as usize;
            c.truth += g as usize;
        }
        Ok(c)
    }

    pub fn add(&mut self, o: &OverlapCounts) {
        self.intersection += o.intersection;
        self.predicted += o.predicted;
        self.truth += o.truth;
    }

    /// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
    pub fn dice(&self) -> f64 {
        let denom = self.predicted + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(OverlapCounts::of(pred, gt)?.dice())
}

/// Squared Euclidean distance from each pixel to the nearest set pixel of
/// `sites`, with per-axis spacing `(dy, dx)`; infinite when `sites` is empty.
pub fn squared_distance_transform(sites: &Mask, spacing: (f64, f64)) -> Vec<f64> {
    let (h, w) = (sites.height, sites.width);
    let mut cols = vec![f64::INFINITY; h * w];
    let mut f = vec![0.0; h.max(w)];
    let mut d = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            f[y] = if sites.bits[y * w + x] { 0.0 } else { f64::INFINITY };
        }
        lower_envelope(&f[..h], spacing.0, &mut d[..h]);
        for y in 0..h {
            cols[y * w + x] = d[y];
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        lower_envelope(&cols[y * w..(y + 1) * w], spacing.1, &mut d[..w]);
        out[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    out
}

/// `d(p) = min_q ((p - q)·s)² + f(q)` by the lower envelope of parabolas,
/// skipping infinite samples.
fn lower_envelope(f: &[f64], s: f64, d: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let pos = |q: usize| q as f64 * s;
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        loop {
            let Some(&r) = v.last() else {
                v.push(q);
                z.clear();
                z.push(f64::NEG_INFINITY);
                break;
            };
            let cross = ((f[q] + pos(q) * pos(q)) - (f[r] + pos(r) * pos(r))) / (2.0 * (pos(q) - pos(r)));
            if cross <= *z.last().expect("one entry per parabola") {
                v.pop();
                z.pop();
                if v.is_empty() {
                    continue;
                }
            } else {
                v.push(q);
                z.push(cross);
                break;
            }
        }
    }
    if v.is_empty() {
        d.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, out) in d.iter_mut().enumerate() {
        let x = pos(p);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let dx = x - pos(v[k]);
        *out = dx * dx + f[v[k]];
    }
}

/// Average symmetric surface distance with per-axis spacing `(dy, dx)`;
/// `None` when either boundary is empty.
pub fn assd(pred: &Mask, gt: &Mask, spacing: (f64, f64)) -> Result<Option<f64>> {
    pred.check(gt, "assd")?;
    let (bp, bg) = (pred.boundary(), gt.boundary());
    if bp.count() == 0 || bg.count() == 0 {
        return Ok(None);
    }
    let mean_to = |from: &Mask, to: &Mask| {
        let dt = squared_distance_transform(to, spacing);
        let (sum, n) = from
            .bits
            .iter()
            .zip(&dt)
            .filter(|(&b, _)| b)
            .fold((0.0, 0usize), |(s, n), (_, &d)| (s + libm::sqrt(d), n + 1));
        sum / n as f64
    };
    Ok(Some(0.5 * (mean_to(&bp, &bg) + mean_to(&bg, &bp))))
}

/// Per-pixel arg-max class; ties go to the lowest channel.
pub fn argmax_classes(scores: &Tensor3) -> Vec<usize> {
    let (c, h, w) = scores.shape();
    let n = h * w;
    let s = scores.as_slice();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for ch in 1..c {
                if s[ch * n + p] > s[best * n + p] {
                    best = ch;
                }
            }
            best
        })
        .collect()
}

/// One mask per class from a class-index map.
pub fn class_masks(indices: &[usize], classes: usize, height: usize, width: usize) -> Vec<Mask> {
    (0..classes)
        .map(|c| Mask {
            height,
            width,
            bits: indices.iter().map(|&i| i == c).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiceMode {
    /// Pixel counts pooled over the whole split.
    #[default]
    Pooled,
    /// Mean of per-image scores.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub spacing: (f64, f64),
    pub dice_mode: DiceMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            spacing: (1.0, 1.0),
            dice_mode: DiceMode::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub unseen: bool,
    pub dice: f64,
    /// Mean over images with a defined distance.
    pub assd: Option<f64>,
    /// Images where the distance was undefined.
    pub assd_undefined: usize,
}

/// Structure-class metrics of one experiment; background is excluded
/// from every mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub tag: String,
    pub unseen: Vec<usize>,
    pub classes: Vec<ClassMetrics>,
    pub images: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    pub fn class(&self, c: usize) -> Option<&ClassMetrics> {
        self.classes.iter().find(|m| m.class == c)
    }

    pub fn mean_dice(&self) -> f64 {
        mean(self.classes.iter().map(|m| m.dice)).unwrap_or(0.0)
    }

    pub fn seen_dice(&self) -> Option<f64> {
        mean(self.classes.iter().filter(|m| !m.unseen).map(|m| m.dice))
    }

    pub fn unseen_dice(&self) -> Option<f64> {
        mean(self.classes.iter().filter(|m| m.unseen).map(|m| m.dice))
    }

    pub fn mean_assd(&self) -> Option<f64> {
        mean(self.classes.iter().filter_map(|m| m.assd))
    }

    pub fn seen_assd(&self) -> Option<f64> {
        mean(self.classes.iter().filter(|m| !m.unseen).filter_map(|m| m.assd))
    }

    pub fn unseen_assd(&self) -> Option<f64> {
        mean(self.classes.iter().filter(|m| m.unseen).filter_map(|m| m.assd))
    }

    pub fn fully_supervised(&self) -> bool {
        self.unseen.is_empty()
    }
}

/// Aggregates class-index predictions against full labels.
pub fn evaluate_predictions(
    predictions: &[Vec<usize>],
    labels: &[&LabelMap],
    unseen: &[usize],
    tag: &str,
    options: &EvalOptions,
) -> Result<MetricReport> {
    if labels.is_empty() {
        return Err(Error::EmptySplit);
    }
    if predictions.len() != labels.len() {
        return Err(shape_err("evaluate", labels.len(), predictions.len()));
    }
    let classes = labels[0].classes();
    let names = labels[0].class_names();
    let mut pooled = vec![OverlapCounts::default(); classes];
    let mut per_image = vec![0.0; classes];
    let mut assd_sum = vec![0.0; classes];
    let mut assd_n = vec![0usize; classes];
    for (pred, label) in predictions.iter().zip(labels) {
        let (h, w) = (label.height(), label.width());
        if label.classes() != classes || pred.len() != h * w {
            return Err(shape_err("evaluate", (classes, h * w), (label.classes(), pred.len())));
        }
        let pm = class_masks(pred, classes, h, w);
        let gm = class_masks(&label.indices(), classes, h, w);
        for c in 1..classes {
            let counts = OverlapCounts::of(&pm[c], &gm[c])?;
            pooled[c].add(&counts);
            per_image[c] += counts.dice();
            if let Some(d) = assd(&pm[c], &gm[c], options.spacing)? {
                assd_sum[c] += d;
                assd_n[c] += 1;
            }
        }
    }
    let n = labels.len();
    let metrics = (1..classes)
        .map(|c| ClassMetrics {
            class: c,
            name: names[c].clone(),
            unseen: unseen.contains(&c),
            dice: match options.dice_mode {
                DiceMode::Pooled => pooled[c].dice(),
                DiceMode::PerImage => per_image[c] / n as f64,
            },
            assd: (assd_n[c] > 0).then(|| assd_sum[c] / assd_n[c] as f64),
            assd_undefined: n - assd_n[c],
        })
        .collect();
    let mut unseen_sorted = unseen.to_vec();
    unseen_sorted.sort_unstable();
    Ok(MetricReport {
        tag: tag.into(),
        unseen: unseen_sorted,
        classes: metrics,
        images: n,
    })
}

/// Full-resolution logits of a model; `guide` is the frozen prior when the
/// model uses guided attention.
pub fn predict_logits(
    arch: &Architecture,
    model: &SegmentationParams,
    guide: Option<&SegmentationParams>,
    image: &Tensor3,
) -> Result<Tensor3> {
    let f = arch.backbone_forward(&model.backbone, image)?;
    let logits = match guide {
        Some(prior) => {
            let fp = arch.backbone_forward(&prior.backbone, image)?;
            let mp = arch.segmentor_forward(&prior.head, fp.output())?;
            let att = arch.attention_forward(&model.fusion, f.output(), &inheritance_guidance(&mp.logits)?)?;
            arch.segmentor_forward(&model.head, &att.output)?.logits
        }
        None => arch.segmentor_forward(&model.head, f.output())?.logits,
    };
    Ok(logits)
}

/// Evaluates a model on labeled samples.
pub fn evaluate(
    arch: &Architecture,
    model: &SegmentationParams,
    guide: Option<&SegmentationParams>,
    samples: &[&LabeledSample],
    unseen: &[usize],
    tag: &str,
    options: &EvalOptions,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    let predictions = samples
        .iter()
        .map(|s| predict_logits(arch, model, guide, &s.image).map(|l| argmax_classes(&l)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&LabelMap> = samples.iter().map(|s| &s.label).collect();
    evaluate_predictions(&predictions, &labels, unseen, tag, options)
}
