//! Training objectives of both stages.
//!
//! Every loss returns its value together with the gradient wrt each of its
//! tensor inputs. Probability inputs are softmax outputs. Logarithms clamp
//! their argument from below at `LOG_EPS`, so a perfect prediction costs
//! exactly zero and the returned gradients are exact wherever the argument
//! exceeds the clamp.

use alloc::vec::Vec;

use crate::datagen::{LabelMap, SeenLabels};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor3;

pub const LOG_EPS: f64 = 1e-8;

#[inline]
fn ln(v: f64) -> f64 {
    libm::log(v.max(LOG_EPS))
}

/// Derivative of [`ln`].
#[inline]
fn dln(v: f64) -> f64 {
    if v > LOG_EPS {
        1.0 / v
    } else {
        0.0
    }
}

/// `lambda` weights the discriminator terms (prior, s→p, p→s, zero-shot);
/// `omega` weights `L_Cross`, `L_Seen`, `L_Bg` and `L_Adv` in `L_Seg`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: [f64; 4],
    pub omega: [f64; 4],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: [3.0, 1.0, 1.0, 1.0],
            omega: [0.5, 1.0, 0.01, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().chain(&self.omega).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Invalid("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Scalar losses of one stage-2 step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub cross: f64,
    pub seen: f64,
    pub bg: f64,
    pub adv: f64,
    pub seg: f64,
    pub disc: f64,
}

impl LossBundle {
    pub const NAMES: [&'static str; 6] = ["L_Cross", "L_Seen", "L_Bg", "L_Adv", "L_Seg", "L_D"];

    pub fn values(&self) -> [f64; 6] {
        [self.cross, self.seen, self.bg, self.adv, self.seg, self.disc]
    }

    /// First non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

/// A scalar loss and its gradient wrt one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor3,
}

/// Cross-entropy over every location and channel of the prior modality.
/// Mean over `H·W·C` terms of `-y·log m`.
pub fn loss_stage1(probs: &Tensor3, labels: &LabelMap) -> Result<LossGrad> {
    let y = labels.onehot();
    if !probs.same_shape(y) {
        return Err(shape_err("loss_stage1", y.shape(), probs.shape()));
    }
    let k = probs.as_slice().len() as f64;
    let mut value = 0.0;
    let mut grad = Tensor3::zeros(probs.channels(), probs.height(), probs.width());
    for ((g, &m), &t) in grad.as_mut_slice().iter_mut().zip(probs.as_slice()).zip(y.as_slice()) {
        if t != 0.0 {
            value -= t * ln(m);
            *g = -t * dln(m) / k;
        }
    }
    Ok(LossGrad { value: value / k, grad })
}

fn check_seen(op: &'static str, probs: &Tensor3, y: &SeenLabels) -> Result<()> {
    if y.channels.is_empty() {
        return Err(Error::NoSeenClasses);
    }
    let (c, h, w) = probs.shape();
    if y.mask.shape() != (y.channels.len(), h, w) {
        return Err(shape_err(op, (y.channels.len(), h, w), y.mask.shape()));
    }
    if let Some(&bad) = y.channels.iter().find(|&&ch| ch >= c) {
        return Err(shape_err(op, c, bad));
    }
    Ok(())
}

/// `Σ y·log m` over seen channels; gradient scaled by `-1/k` written
/// into `grad`.
fn seen_log_sum(probs: &Tensor3, y: &SeenLabels, k: f64, grad: &mut Tensor3) -> f64 {
    let n = probs.plane_len();
    let mut sum = 0.0;
    for (s, &ch) in y.channels.iter().enumerate() {
        let t = y.mask.plane(s);
        let m = probs.plane(ch);
        let g = &mut grad.as_mut_slice()[ch * n..(ch + 1) * n];
        for p in 0..n {
            if t[p] != 0.0 {
                sum += t[p] * ln(m[p]);
                g[p] -= t[p] * dln(m[p]) / k;
            }
        }
    }
    sum
}

/// Supervision of the zero-shot model on the seen classes, normalized by
/// `K_s = H·W·C_s`.
pub fn loss_seen(probs: &Tensor3, y: &SeenLabels) -> Result<LossGrad> {
    check_seen("loss_seen", probs, y)?;
    let k = (probs.plane_len() * y.seen_count()) as f64;
    let mut grad = Tensor3::zeros(probs.channels(), probs.height(), probs.width());
    let sum = seen_log_sum(probs, y, k, &mut grad);
    Ok(LossGrad { value: -sum / k, grad })
}

/// Cross-modality loss on the swapped outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossLoss {
    pub value: f64,
    /// Gradient wrt `m_{p→s}` (zero-shot segmentor on prior features).
    pub grad_prior_to_zero_shot: Tensor3,
    /// Gradient wrt `m_{s→p}` (prior segmentor on zero-shot features).
    pub grad_zero_shot_to_prior: Tensor3,
}

pub fn loss_cross(m_ps: &Tensor3, m_sp: &Tensor3, y: &SeenLabels) -> Result<CrossLoss> {
    check_seen("loss_cross", m_ps, y)?;
    check_seen("loss_cross", m_sp, y)?;
    let k = (m_ps.plane_len() * y.seen_count()) as f64;
    let mut g_ps = Tensor3::zeros(m_ps.channels(), m_ps.height(), m_ps.width());
    let mut g_sp = Tensor3::zeros(m_sp.channels(), m_sp.height(), m_sp.width());
    let sum = seen_log_sum(m_ps, y, k, &mut g_ps) + seen_log_sum(m_sp, y, k, &mut g_sp);
    Ok(CrossLoss {
        value: -sum / k,
        grad_prior_to_zero_shot: g_ps,
        grad_zero_shot_to_prior: g_sp,
    })
}

/// Binary mask (`1 × H × W`) of pixels whose arg-max class is background;
/// ties go to the lowest channel, so a tie with background counts as
/// background.
pub fn pseudo_background(probs: &Tensor3) -> Tensor3 {
    let (c, h, w) = probs.shape();
    let n = h * w;
    let m = probs.as_slice();
    Tensor3::from_fn(1, h, w, |_, y, x| {
        let p = y * w + x;
        let bg = m[p];
        if (1..c).all(|ch| m[ch * n + p] <= bg) {
            1.0
        } else {
            0.0
        }
    })
}

/// Mean squared error between the pseudo background label and the
/// background probability of the zero-shot model, over `K_bg = H·W`.
pub fn loss_bg(pseudo: &Tensor3, background: &Tensor3) -> Result<LossGrad> {
    if !pseudo.same_shape(background) || pseudo.channels() != 1 {
        return Err(shape_err("loss_bg", pseudo.shape(), background.shape()));
    }
    let k = pseudo.as_slice().len() as f64;
    let mut value = 0.0;
    let mut grad = Tensor3::zeros(1, pseudo.height(), pseudo.width());
    for ((g, &t), &m) in grad.as_mut_slice().iter_mut().zip(pseudo.as_slice()).zip(background.as_slice()) {
        let d = t - m;
        value += d * d;
        *g = -2.0 * d / k;
    }
    Ok(LossGrad { value: value / k, grad })
}

fn check_open_unit(op: &'static str, t: &Tensor3) -> Result<()> {
    if t.as_slice().iter().all(|&v| v > 0.0 && v < 1.0) {
        Ok(())
    } else {
        Err(Error::OutOfRange(op))
    }
}

/// Discriminator loss and gradients wrt each patch-score map.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorLoss {
    pub value: f64,
    /// Gradients wrt `D(m_p)`, `D(m_{s→p})`, `D(m_{p→s})`, `D(m_s)`; `None`
    /// for terms that were absent.
    pub grads: [Option<Tensor3>; 4],
}

/// Patch-averaged `-λ0·log D(m_p) - λ1·log(1-D(m_{s→p})) - λ2·log(1-D(m_{p→s})) - λ3·log(1-D(m_s))`.
/// The swapped terms are optional so the loss also covers runs without
/// feature swapping.
pub fn loss_discriminator(
    d_p: &Tensor3,
    d_sp: Option<&Tensor3>,
    d_ps: Option<&Tensor3>,
    d_s: &Tensor3,
    weights: &LossWeights,
) -> Result<DiscriminatorLoss> {
    let inputs = [Some(d_p), d_sp, d_ps, Some(d_s)];
    for t in inputs.iter().flatten() {
        if !t.same_shape(d_p) {
            return Err(shape_err("loss_discriminator", d_p.shape(), t.shape()));
        }
        check_open_unit("loss_discriminator", t)?;
    }
    let n = d_p.as_slice().len() as f64;
    let mut value = 0.0;
    let mut grads: [Option<Tensor3>; 4] = [None, None, None, None];
    for (i, t) in inputs.iter().enumerate() {
        let Some(t) = t else { continue };
        let lambda = weights.lambda[i];
        let positive = i == 0;
        let mut g = Tensor3::zeros(t.channels(), t.height(), t.width());
        for (gi, &d) in g.as_mut_slice().iter_mut().zip(t.as_slice()) {
            if positive {
                value -= lambda * ln(d);
                *gi = -lambda * dln(d) / n;
            } else {
                value -= lambda * ln(1.0 - d);
                *gi = lambda * dln(1.0 - d) / n;
            }
        }
        grads[i] = Some(g);
    }
    Ok(DiscriminatorLoss { value: value / n, grads })
}

/// Adversarial loss and gradients wrt `D(m_{s→p})`, `D(m_{p→s})`, `D(m_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialLoss {
    pub value: f64,
    pub grads: [Option<Tensor3>; 3],
}

/// Patch-averaged `-log D(m_{s→p}) - log D(m_{p→s}) - log D(m_s)`.
pub fn loss_adversarial(d_sp: Option<&Tensor3>, d_ps: Option<&Tensor3>, d_s: &Tensor3) -> Result<AdversarialLoss> {
    let inputs = [d_sp, d_ps, Some(d_s)];
    for t in inputs.iter().flatten() {
        if !t.same_shape(d_s) {
            return Err(shape_err("loss_adversarial", d_s.shape(), t.shape()));
        }
        check_open_unit("loss_adversarial", t)?;
    }
    let n = d_s.as_slice().len() as f64;
    let mut value = 0.0;
    let mut grads: [Option<Tensor3>; 3] = [None, None, None];
    for (i, t) in inputs.iter().enumerate() {
        let Some(t) = t else { continue };
        let g: Vec<f64> = t
            .as_slice()
            .iter()
            .map(|&d| {
                value -= ln(d);
                -dln(d) / n
            })
            .collect();
        grads[i] = Some(Tensor3::from_vec(t.channels(), t.height(), t.width(), g)?);
    }
    Ok(AdversarialLoss { value: value / n, grads })
}

/// `ω0·L_Cross + ω1·L_Seen + ω2·L_Bg + ω3·L_Adv`.
pub fn loss_seg(cross: f64, seen: f64, bg: f64, adv: f64, weights: &LossWeights) -> f64 {
    let w = weights.omega;
    w[0] * cross + w[1] * seen + w[2] * bg + w[3] * adv
}
