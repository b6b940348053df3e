//! Hand-value and invariant checks, returned as named outcomes so they can
//! be asserted one by one or summarized.

#![allow(dead_code)]

use inheritseg_core::datagen::{augment, generate_anatomy, AugmentConfig, LabelMap, Layout, SeenLabels};
use inheritseg_core::losses::{
    loss_adversarial, loss_bg, loss_cross, loss_discriminator, loss_seen, loss_seg, loss_stage1, LossWeights,
};
use inheritseg_core::metrics::{argmax_classes, assd, class_masks, dice, Mask};
use inheritseg_core::nets::{inheritance_guidance, softmax_probs, ParamTensors};
use inheritseg_core::training::{configure_ablation, stage2_step, AblationSetting, OptimizerConfig, TrainState};
use inheritseg_core::{SeededRng, Tensor3};

use super::gradcheck::tiny_arch;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Outcome {
    Outcome {
        name: name.into(),
        passed: (got - want).abs() < tol,
        detail: format!("got {got:.10}, want {want:.10}"),
    }
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("c{i}")).collect()
}

fn t(c: usize, h: usize, w: usize, v: &[f64]) -> Tensor3 {
    Tensor3::from_vec(c, h, w, v.to_vec()).unwrap()
}

/// One pixel, one seen structure (channel 1 of 2) present.
fn single_seen() -> SeenLabels {
    LabelMap::from_indices(1, 1, &[1], names(2)).unwrap().seen_view(&[1])
}

/// Every hand-computed loss value, to 1e-6. The expected values are the
/// closed forms; the rounded figures are checked against them as well.
pub fn hand_values() -> Vec<Outcome> {
    const TOL: f64 = 1e-6;
    let ln = f64::ln;
    let mut out = Vec::new();

    let y = LabelMap::from_indices(1, 1, &[0], names(2)).unwrap();
    let v = loss_stage1(&t(2, 1, 1, &[0.5, 0.5]), &y).unwrap().value;
    out.push(close("stage1 single pixel (0.3466)", v, -0.5 * ln(0.5), TOL));
    out.push(close("stage1 rounded figure", v, 0.3466, 5e-5));
    let v = loss_stage1(y.onehot(), &y).unwrap().value;
    out.push(close("stage1 perfect prediction", v, 0.0, TOL));
    let y3 = LabelMap::from_indices(2, 2, &[0, 1, 2, 1], names(3)).unwrap();
    let v = loss_stage1(&Tensor3::filled(3, 2, 2, 1.0 / 3.0), &y3).unwrap().value;
    out.push(close("stage1 uniform (ln C / C)", v, ln(3.0) / 3.0, TOL));

    let seen = single_seen();
    let half = t(2, 1, 1, &[0.5, 0.5]);
    let v = loss_cross(&half, &half, &seen).unwrap().value;
    out.push(close("cross single pixel (1.3863)", v, -(ln(0.5) + ln(0.5)), TOL));
    out.push(close("cross rounded figure", v, 1.3863, 5e-5));
    let v = loss_seen(&half, &seen).unwrap().value;
    out.push(close("seen single pixel (0.6931)", v, ln(2.0), TOL));
    out.push(close("seen rounded figure", v, 0.6931, 5e-5));
    let perfect = t(2, 1, 1, &[0.0, 1.0]);
    out.push(close("seen perfect prediction", loss_seen(&perfect, &seen).unwrap().value, 0.0, TOL));
    out.push(close("cross perfect prediction", loss_cross(&perfect, &perfect, &seen).unwrap().value, 0.0, TOL));

    let v = loss_bg(&t(1, 1, 2, &[1.0, 0.0]), &t(1, 1, 2, &[0.75, 0.25])).unwrap().value;
    out.push(close("background MSE (0.0625)", v, 0.0625, TOL));
    let same = t(1, 1, 2, &[1.0, 0.0]);
    out.push(close("background perfect", loss_bg(&same, &same).unwrap().value, 0.0, TOL));

    let w = LossWeights::default();
    let cell = |v: f64| t(1, 1, 1, &[v]);
    let v = loss_discriminator(&cell(0.9), Some(&cell(0.2)), Some(&cell(0.3)), &cell(0.1), &w).unwrap().value;
    let want = -3.0 * ln(0.9) - ln(0.8) - ln(0.7) - ln(0.9);
    out.push(close("discriminator (1.0013)", v, want, TOL));
    out.push(close("discriminator rounded figure", v, 1.0013, 5e-5));
    let v = loss_discriminator(&cell(1.0 - 1e-12), Some(&cell(1e-12)), Some(&cell(1e-12)), &cell(1e-12), &w)
        .unwrap()
        .value;
    out.push(close("discriminator perfect limit", v, 0.0, TOL));

    let v = loss_adversarial(Some(&cell(0.5)), Some(&cell(0.5)), &cell(0.5)).unwrap().value;
    out.push(close("adversarial at 0.5 (2.0794)", v, -3.0 * ln(0.5), TOL));
    out.push(close("adversarial rounded figure", v, 2.0794, 5e-5));
    let v = loss_adversarial(Some(&cell(1.0 - 1e-12)), Some(&cell(1.0 - 1e-12)), &cell(1.0 - 1e-12)).unwrap().value;
    out.push(close("adversarial fooled limit", v, 0.0, TOL));

    out.push(close("L_Seg (3.01)", loss_seg(2.0, 1.0, 1.0, 1.0, &w), 3.01, TOL));
    out.push(close("L_Seg all zero", loss_seg(0.0, 0.0, 0.0, 0.0, &w), 0.0, TOL));
    let sel = LossWeights {
        omega: [0.0, 1.0, 0.0, 0.0],
        ..w
    };
    out.push(close("L_Seg selector", loss_seg(2.0, 0.7, 1.0, 1.0, &sel), 0.7, TOL));
    out
}

fn random_logits(rng: &mut SeededRng, c: usize, h: usize, w: usize, scale: f64) -> Tensor3 {
    Tensor3::from_fn(c, h, w, |_, _, _| scale * rng.normal())
}

fn random_mask(rng: &mut SeededRng, h: usize, w: usize, p: f64) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| rng.uniform() < p).collect()).unwrap()
}

/// Boundary pixels by explicit 4-neighbour test; off-grid counts as outside.
fn brute_boundary(m: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height, m.width);
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.bits[y as usize * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// All-pairs average symmetric surface distance.
pub fn brute_assd(a: &Mask, b: &Mask, spacing: (f64, f64)) -> Option<f64> {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let d = |p: (usize, usize), q: (usize, usize)| {
        let dy = (p.0 as f64 - q.0 as f64) * spacing.0;
        let dx = (p.1 as f64 - q.1 as f64) * spacing.1;
        (dy * dy + dx * dx).sqrt()
    };
    let mean_nearest = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter().map(|&p| to.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / from.len() as f64
    };
    Some(0.5 * (mean_nearest(&ba, &bb) + mean_nearest(&bb, &ba)))
}

fn brute_dice(a: &Mask, b: &Mask) -> f64 {
    let inter = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count() as f64;
    let total = (a.count() + b.count()) as f64;
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

/// Structural invariants: labels, probabilities, guidance, attention,
/// prior freezing, prediction partition and metric symmetry.
pub fn invariants() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = SeededRng::new(77);
    let layout = Layout::abdominal();

    let mut bad = 0;
    for seed in 0..100 {
        let map = generate_anatomy(seed, &layout).unwrap();
        let aug = augment(
            &inheritseg_core::datagen::LabeledSample {
                image: Tensor3::zeros(1, map.height(), map.width()),
                label: map.clone(),
            },
            seed ^ 0xa5,
            &AugmentConfig::default(),
        );
        let nonempty = (0..map.classes()).all(|c| map.area(c) > 0);
        if !(map.is_valid_onehot() && aug.label.is_valid_onehot() && nonempty) {
            bad += 1;
        }
    }
    out.push(check("one-hot labels (100 maps + augmentations)", bad == 0, format!("{bad} invalid")));

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = softmax_probs(&random_logits(&mut rng, 5, 8, 8, 10.0));
        for i in 0..64 {
            let s: f64 = (0..5).map(|c| p.plane(c)[i]).sum();
            worst = worst.max((s - 1.0).abs());
            if (0..5).any(|c| !(0.0..=1.0).contains(&p.plane(c)[i])) {
                worst = f64::INFINITY;
            }
        }
    }
    out.push(check("probability maps sum to one (< 1e-5)", worst < 1e-5, format!("max deviation {worst:.2e}")));

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let z = random_logits(&mut rng, 5, 8, 8, 4.0);
        let g = inheritance_guidance(&z).unwrap();
        for i in 0..64 {
            let e: Vec<f64> = (0..5).map(|c| z.plane(c)[i].exp()).collect();
            let total: f64 = e.iter().sum();
            let want = e[1..].iter().map(|v| v / total).fold(0.0, f64::max);
            worst = worst.max((g.as_slice()[i] - want).abs());
        }
    }
    out.push(check("guidance equals brute-force max (< 1e-7)", worst < 1e-7, format!("max deviation {worst:.2e}")));

    let arch = tiny_arch();
    let params = arch.init_segmentation(3);
    let fshape = arch.config().feature_shape();
    let f = random_logits(&mut rng, fshape.0, fshape.1, fshape.2, 1.0);
    let guide = inheritance_guidance(&random_logits(&mut rng, 5, 8, 8, 2.0)).unwrap();
    let att = arch.attention_forward(&params.fusion, &f, &guide).unwrap();
    out.push(check(
        "attention with zeroed fusion output is the identity",
        att.output.as_slice() == f.as_slice(),
        "bitwise comparison",
    ));

    let prior = {
        let mut p = arch.init_segmentation(9);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v *= 1.5;
            }
        }
        p
    };
    let labels: Vec<LabelMap> = (0..3)
        .map(|_| LabelMap::from_indices(8, 8, &(0..64).map(|_| rng.below(5)).collect::<Vec<_>>(), names(5)).unwrap())
        .collect();
    let images: Vec<Tensor3> = (0..3).map(|_| random_logits(&mut rng, 1, 8, 8, 1.0)).collect();
    let seen: Vec<SeenLabels> = labels.iter().map(|l| l.seen_view(&[1, 3, 4])).collect();
    let batch: Vec<(&Tensor3, &SeenLabels)> = images.iter().zip(&seen).collect();
    let ab = configure_ablation(AblationSetting::G, &LossWeights::default());
    let cfg = OptimizerConfig::toy();
    let mut state = TrainState::new(&arch, prior.clone(), &ab.switches, &cfg, 4);
    let (prior_before, disc_before) = (prior.fingerprint(), state.discriminator.fingerprint());
    for _ in 0..3 {
        stage2_step(&arch, &batch, &mut state, &ab, &cfg, 3).unwrap();
    }
    out.push(check(
        "prior parameters unchanged by Stage 2",
        state.prior.fingerprint() == prior_before,
        format!("{prior_before:016x} vs {:016x}", state.prior.fingerprint()),
    ));
    out.push(check(
        "discriminator parameters change in Stage 2",
        state.discriminator.fingerprint() != disc_before,
        "hash comparison",
    ));

    let mut ok = true;
    for _ in 0..20 {
        let idx = argmax_classes(&random_logits(&mut rng, 5, 8, 8, 1.0));
        let masks = class_masks(&idx, 5, 8, 8);
        for i in 0..64 {
            ok &= masks.iter().filter(|m| m.bits[i]).count() == 1;
        }
    }
    out.push(check("argmax masks partition the image", ok, "every pixel in exactly one mask"));

    let mut worst: f64 = 0.0;
    let mut sym = true;
    for k in 0..40 {
        let (h, w) = (6 + k % 3, 7 + k % 2);
        let a = random_mask(&mut rng, h, w, 0.35);
        let b = random_mask(&mut rng, h, w, 0.35);
        let spacing = (1.0 + (k % 3) as f64 * 0.5, 1.0);
        let dab = dice(&a, &b).unwrap();
        sym &= dab == dice(&b, &a).unwrap();
        worst = worst.max((dab - brute_dice(&a, &b)).abs());
        let sab = assd(&a, &b, spacing).unwrap();
        let sba = assd(&b, &a, spacing).unwrap();
        match (sab, sba, brute_assd(&a, &b, spacing)) {
            (Some(x), Some(y), Some(z)) => {
                sym &= (x - y).abs() < 1e-12;
                worst = worst.max((x - z).abs());
            }
            (None, None, None) => {}
            _ => sym = false,
        }
    }
    out.push(check("Dice and ASSD are symmetric", sym, "40 random mask pairs"));
    out.push(check(
        "Dice and ASSD equal brute-force oracles (< 1e-9)",
        worst < 1e-9,
        format!("max deviation {worst:.2e}"),
    ));
    out
}
