use alloc::vec::Vec;

use super::LabelMap;
use crate::error::{shape_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor3;

/// Strictly increasing map of `[0, 1]` onto `[0, 1]`: a gamma curve followed
/// by a rescaled logistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transfer {
    pub gamma: f64,
    pub gain: f64,
    pub offset: f64,
}

impl Transfer {
    pub const IDENTITY_LIKE: Transfer = Transfer {
        gamma: 1.0,
        gain: 1e-3,
        offset: 0.5,
    };

    fn logistic(&self, v: f64) -> f64 {
        1.0 / (1.0 + libm::exp(-self.gain * (libm::pow(v, self.gamma) - self.offset)))
    }

    pub fn apply(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, 1.0);
        let lo = self.logistic(0.0);
        let hi = self.logistic(1.0);
        (self.logistic(v) - lo) / (hi - lo)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gain > 0.0 && self.gamma.is_finite() && self.gain.is_finite()) {
            return Err(Error::Invalid("transfer needs positive finite gamma and gain".into()));
        }
        if !self.offset.is_finite() {
            return Err(Error::Invalid("transfer offset must be finite".into()));
        }
        Ok(())
    }
}

/// Appearance of one imaging modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityProfile {
    /// Base intensity per class (index 0 = background), each in `[0, 1]`.
    pub base_intensity: Vec<f64>,
    pub transfer: Transfer,
    /// Per-image uniform jitter added to every class level before transfer.
    pub class_jitter: f64,
    pub bias_field_amplitude: f64,
    pub noise_sigma: f64,
}

impl ModalityProfile {
    /// Default profile of the fully annotated modality.
    pub fn modality_a() -> Self {
        Self {
            base_intensity: alloc::vec![0.15, 0.40, 0.62, 0.78, 0.95],
            transfer: Transfer {
                gamma: 1.0,
                gain: 4.0,
                offset: 0.5,
            },
            class_jitter: 0.03,
            bias_field_amplitude: 0.05,
            noise_sigma: 0.03,
        }
    }

    /// Default profile of the partially annotated modality. The structure
    /// levels are reordered relative to [`ModalityProfile::modality_a`] and
    /// pass through a different nonlinearity.
    pub fn modality_b() -> Self {
        Self {
            base_intensity: alloc::vec![0.15, 0.78, 0.95, 0.40, 0.62],
            transfer: Transfer {
                gamma: 0.7,
                gain: 6.0,
                offset: 0.45,
            },
            class_jitter: 0.03,
            bias_field_amplitude: 0.05,
            noise_sigma: 0.03,
        }
    }

    pub fn classes(&self) -> usize {
        self.base_intensity.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.transfer.validate()?;
        if self.base_intensity.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("base intensities must lie in [0, 1]".into()));
        }
        if !(self.bias_field_amplitude >= 0.0 && self.noise_sigma >= 0.0 && self.class_jitter >= 0.0) {
            return Err(Error::Invalid("bias, noise and jitter must be nonnegative".into()));
        }
        Ok(())
    }

    /// True when some pair of classes is ordered differently by the two
    /// profiles.
    pub fn ordering_differs(&self, other: &ModalityProfile) -> bool {
        let (a, b) = (&self.base_intensity, &other.base_intensity);
        let n = a.len().min(b.len());
        (0..n).any(|i| (i + 1..n).any(|j| (a[i] - a[j]) * (b[i] - b[j]) < 0.0))
    }
}

fn bias_field(height: usize, width: usize, amplitude: f64, rng: &mut SeededRng) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.range(-1.0, 1.0),
                rng.range(0.3, 1.2),
                rng.range(0.3, 1.2),
                rng.range(0.0, core::f64::consts::TAU),
                rng.range(0.0, core::f64::consts::TAU),
            )
        })
        .collect();
    let norm: f64 = terms.iter().map(|t| libm::fabs(t.0)).sum::<f64>().max(1e-12);
    let pi = core::f64::consts::PI;
    let mut field = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let v: f64 = terms
                .iter()
                .map(|&(c, fy, fx, py, px)| {
                    c * libm::cos(pi * fy * y as f64 / height as f64 + py)
                        * libm::cos(pi * fx * x as f64 / width as f64 + px)
                })
                .sum();
            field.push(amplitude * v / norm);
        }
    }
    field
}

/// Renders `label` under `profile`: transferred class level, plus a smooth
/// bias field and Gaussian noise, clipped to `[0, 1]`. Returns `1 × H × W`.
pub fn render_modality(label: &LabelMap, profile: &ModalityProfile, seed: u64) -> Result<Tensor3> {
    profile.validate()?;
    if profile.classes() != label.classes() {
        return Err(shape_err("render_modality", label.classes(), profile.classes()));
    }
    let (h, w) = (label.height(), label.width());
    let mut rng = SeededRng::new(seed);
    let levels: Vec<f64> = profile
        .base_intensity
        .iter()
        .map(|&b| {
            let jitter = if profile.class_jitter > 0.0 {
                rng.range(-profile.class_jitter, profile.class_jitter)
            } else {
                0.0
            };
            profile.transfer.apply(b + jitter)
        })
        .collect();
    let bias = if profile.bias_field_amplitude > 0.0 {
        Some(bias_field(h, w, profile.bias_field_amplitude, &mut rng))
    } else {
        None
    };
    let classes = label.indices();
    let mut data = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let mut v = levels[classes[p]];
        if let Some(b) = &bias {
            v += b[p];
        }
        if profile.noise_sigma > 0.0 {
            v += profile.noise_sigma * rng.normal();
        }
        data.push(v.clamp(0.0, 1.0));
    }
    Tensor3::from_vec(1, h, w, data)
}

/// Per-image standardization to zero mean and unit standard deviation.
pub fn normalize(image: &Tensor3) -> Result<Tensor3> {
    let n = image.as_slice().len() as f64;
    if n == 0.0 || !image.is_finite() {
        return Err(Error::Invalid("normalize needs a finite nonempty image".into()));
    }
    let mean = image.sum() / n;
    let var = image.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    if std <= 1e-12 * (1.0 + libm::fabs(mean)) {
        return Err(Error::ZeroVariance);
    }
    Ok(image.map(|v| (v - mean) / std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_anatomy, Layout};

    fn quiet(profile: &ModalityProfile) -> ModalityProfile {
        ModalityProfile {
            class_jitter: 0.0,
            bias_field_amplitude: 0.0,
            noise_sigma: 0.0,
            ..profile.clone()
        }
    }

    fn mean_std(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn transfer_is_strictly_monotone() {
        for t in [ModalityProfile::modality_a().transfer, ModalityProfile::modality_b().transfer] {
            let mut prev = -1.0;
            for i in 0..=1000 {
                let v = t.apply(i as f64 / 1000.0);
                assert!(v > prev);
                prev = v;
            }
            assert!(t.apply(0.0).abs() < 1e-12 && (t.apply(1.0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_rendering_is_piecewise_constant() {
        let label = generate_anatomy(11, &Layout::abdominal()).unwrap();
        let profile = quiet(&ModalityProfile::modality_a());
        let img = render_modality(&label, &profile, 5).unwrap();
        let idx = label.indices();
        for c in 0..label.classes() {
            let expected = profile.transfer.apply(profile.base_intensity[c]);
            for (p, &k) in idx.iter().enumerate() {
                if k == c {
                    assert_eq!(img.as_slice()[p], expected);
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let label = generate_anatomy(2, &Layout::abdominal()).unwrap();
        let p = ModalityProfile::modality_b();
        assert_eq!(render_modality(&label, &p, 9).unwrap(), render_modality(&label, &p, 9).unwrap());
    }

    #[test]
    fn swapped_intensities_swap_class_means() {
        let label = generate_anatomy(21, &Layout::abdominal()).unwrap();
        let a = ModalityProfile::modality_a();
        let mut b = a.clone();
        b.base_intensity.swap(1, 2);
        let idx = label.indices();
        let class_mean = |img: &Tensor3, c: usize| {
            let vals: Vec<f64> = idx
                .iter()
                .zip(img.as_slice())
                .filter(|(&k, _)| k == c)
                .map(|(_, &v)| v)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let ia = render_modality(&label, &a, 1).unwrap();
        let ib = render_modality(&label, &b, 1).unwrap();
        assert!(class_mean(&ia, 1) < class_mean(&ia, 2));
        assert!(class_mean(&ib, 1) > class_mean(&ib, 2));
    }

    #[test]
    fn default_profiles_differ_in_ordering() {
        assert!(ModalityProfile::modality_a().ordering_differs(&ModalityProfile::modality_b()));
        assert!(!ModalityProfile::modality_a().ordering_differs(&ModalityProfile::modality_a()));
    }

    #[test]
    fn normalize_constant_plus_spike() {
        let mut img = Tensor3::filled(1, 4, 4, 3.0);
        img.set(0, 1, 2, 10.0);
        let out = normalize(&img).unwrap();
        assert!(out.sum().abs() < 1e-12);
    }

    #[test]
    fn normalize_constant_fails() {
        assert_eq!(normalize(&Tensor3::filled(1, 3, 3, 0.7)), Err(Error::ZeroVariance));
    }

    #[test]
    fn normalize_random_and_idempotent() {
        let mut rng = SeededRng::new(4);
        let img = Tensor3::from_fn(1, 8, 8, |_, _, _| rng.range(-3.0, 5.0));
        let out = normalize(&img).unwrap();
        let (m, s) = mean_std(out.as_slice());
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
        let again = normalize(&out).unwrap();
        for (a, b) in out.as_slice().iter().zip(again.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
