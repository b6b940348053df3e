//! Central finite-difference checks (step 1e-4) for every backward pass and
//! loss gradient, on inputs no larger than 8×8.

#![allow(dead_code)]

use inheritseg_core::datagen::{LabelMap, SeenLabels};
use inheritseg_core::losses::{
    loss_adversarial, loss_bg, loss_cross, loss_discriminator, loss_seen, loss_stage1, LossWeights,
};
use inheritseg_core::nets::layers::{
    conv_backward, conv_forward, sigmoid, sigmoid_backward, Activation, BilinearResize, ConvParams, ConvSpec,
};
use inheritseg_core::nets::{
    inheritance_guidance, softmax, softmax_backward, Architecture, NetworkConfig, ParamTensors, SegmentationParams, StackParams,
};
use inheritseg_core::training::{configure_ablation, stage2_gradients, AblationSetting};
use inheritseg_core::{SeededRng, Tensor3};

pub const EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub rel_err: f64,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + EPS;
            let up = f(&xs);
            xs[i] = orig - EPS;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

fn random_tensor(rng: &mut SeededRng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor3 {
    Tensor3::from_fn(c, h, w, |_, _, _| rng.range(lo, hi))
}

fn dot(a: &Tensor3, b: &Tensor3) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

fn with(t: &Tensor3, data: &[f64]) -> Tensor3 {
    Tensor3::from_vec(t.channels(), t.height(), t.width(), data.to_vec()).unwrap()
}

fn names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("c{i}")).collect()
}

fn random_label(rng: &mut SeededRng, c: usize, h: usize, w: usize) -> LabelMap {
    let idx: Vec<usize> = (0..h * w).map(|_| rng.below(c)).collect();
    LabelMap::from_indices(h, w, &idx, names(c)).unwrap()
}

/// Tiny network so every parameter can be perturbed.
pub fn tiny_arch() -> Architecture {
    Architecture::new(NetworkConfig {
        height: 8,
        width: 8,
        classes: 5,
        backbone_widths: [3, 4, 4],
        head_hidden: 4,
        fusion_hidden: 3,
        discriminator_widths: [3, 4],
        ..NetworkConfig::default()
    })
    .unwrap()
}

fn randomize<P: ParamTensors>(p: &mut P, rng: &mut SeededRng, scale: f64) {
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = scale * rng.normal();
        }
    }
}

fn flat<P: ParamTensors>(p: &P) -> Vec<f64> {
    p.tensors().into_iter().flat_map(|(_, t)| t.clone()).collect()
}

fn set_flat<P: ParamTensors>(p: &mut P, x: &[f64]) {
    let mut i = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&x[i..i + n]);
        i += n;
    }
}

fn flat_stack(s: &StackParams) -> Vec<f64> {
    s.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias).copied()).collect()
}

fn set_stack(s: &mut StackParams, x: &[f64]) {
    let mut i = 0;
    for l in &mut s.layers {
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *v = x[i];
            i += 1;
        }
    }
}

fn conv_checks(out: &mut Vec<Check>, rng: &mut SeededRng) {
    let cases = [
        ("conv3x3_s1_relu", ConvSpec::new(3, 4, 3, 1, Activation::Relu)),
        ("conv3x3_s2_leaky", ConvSpec::new(3, 4, 3, 2, Activation::LeakyRelu(0.2))),
        ("conv1x1_identity", ConvSpec::new(3, 4, 1, 1, Activation::Identity)),
        ("conv3x3_s1_nobias", ConvSpec::new(3, 4, 3, 1, Activation::Relu).without_bias()),
        ("conv3x3_s2_identity_nobias", ConvSpec::new(3, 4, 3, 2, Activation::Identity).without_bias()),
    ];
    for (name, spec) in cases {
        let params = ConvParams::init(&spec, rng);
        let mut params = params;
        for b in params.bias.iter_mut() {
            *b = 0.1 * rng.normal();
        }
        let x = random_tensor(rng, 3, 8, 8, -1.0, 1.0);
        let cache = conv_forward(&spec, &params, &x).unwrap();
        let r = random_tensor(rng, 4, cache.output().height(), cache.output().width(), -1.0, 1.0);
        let mut grads = ConvParams::zeros(&spec);
        let gx = conv_backward(&spec, &params, &cache, &r, Some(&mut grads), true).unwrap();
        let nx = numeric_grad(x.as_slice(), |v| dot(conv_forward(&spec, &params, &with(&x, v)).unwrap().output(), &r));
        out.push(Check { name: format!("{name}/input"), rel_err: rel_err(gx.as_slice(), &nx) });
        let nw = numeric_grad(&params.weight, |v| {
            let p = ConvParams { weight: v.to_vec(), bias: params.bias.clone() };
            dot(conv_forward(&spec, &p, &x).unwrap().output(), &r)
        });
        out.push(Check { name: format!("{name}/weight"), rel_err: rel_err(&grads.weight, &nw) });
        if spec.bias {
            let nb = numeric_grad(&params.bias, |v| {
                let p = ConvParams { weight: params.weight.clone(), bias: v.to_vec() };
                dot(conv_forward(&spec, &p, &x).unwrap().output(), &r)
            });
            out.push(Check { name: format!("{name}/bias"), rel_err: rel_err(&grads.bias, &nb) });
        }
    }
}

fn pointwise_checks(out: &mut Vec<Check>, rng: &mut SeededRng) {
    let up = BilinearResize::new(2, 2, 8, 8);
    let x = random_tensor(rng, 3, 2, 2, -1.0, 1.0);
    let r = random_tensor(rng, 3, 8, 8, -1.0, 1.0);
    let g = up.backward(&r);
    let n = numeric_grad(x.as_slice(), |v| dot(&up.forward(&with(&x, v)).unwrap(), &r));
    out.push(Check { name: "bilinear_upsample".into(), rel_err: rel_err(g.as_slice(), &n) });

    let z = random_tensor(rng, 5, 4, 4, -3.0, 3.0);
    let r = random_tensor(rng, 5, 4, 4, -1.0, 1.0);
    let g = softmax_backward(&softmax(&z), &r);
    let n = numeric_grad(z.as_slice(), |v| dot(&softmax(&with(&z, v)), &r));
    out.push(Check { name: "softmax".into(), rel_err: rel_err(g.as_slice(), &n) });

    let z = random_tensor(rng, 1, 4, 4, -4.0, 4.0);
    let r = random_tensor(rng, 1, 4, 4, -1.0, 1.0);
    let g = sigmoid_backward(&z, &sigmoid(&z), &r);
    let n = numeric_grad(z.as_slice(), |v| dot(&sigmoid(&with(&z, v)), &r));
    out.push(Check { name: "sigmoid".into(), rel_err: rel_err(g.as_slice(), &n) });
}

fn network_checks(out: &mut Vec<Check>, rng: &mut SeededRng) {
    let arch = tiny_arch();
    let mut params = arch.init_segmentation(5);
    randomize(&mut params, rng, 0.5);
    let image = random_tensor(rng, 1, 8, 8, -2.0, 2.0);
    let fshape = arch.config().feature_shape();

    // Backbone parameters.
    let trace = arch.backbone_forward(&params.backbone, &image).unwrap();
    let r = random_tensor(rng, fshape.0, fshape.1, fshape.2, -1.0, 1.0);
    let mut grads = arch.zero_segmentation();
    arch.backbone_backward(&params.backbone, &trace, &r, &mut grads.backbone);
    let mut probe = params.backbone.clone();
    let n = numeric_grad(&flat_stack(&params.backbone), |v| {
        set_stack(&mut probe, v);
        dot(arch.backbone_forward(&probe, &image).unwrap().output(), &r)
    });
    out.push(Check { name: "backbone/params".into(), rel_err: rel_err(&flat_stack(&grads.backbone), &n) });

    // Segmentor wrt feature and head parameters.
    let feature = random_tensor(rng, fshape.0, fshape.1, fshape.2, 0.0, 2.0);
    let seg = arch.segmentor_forward(&params.head, &feature).unwrap();
    let r = random_tensor(rng, 5, 8, 8, -1.0, 1.0);
    let mut grads = arch.zero_segmentation();
    let gf = arch.segmentor_backward(&params.head, &seg, &r, Some(&mut grads.head), true).unwrap();
    let n = numeric_grad(feature.as_slice(), |v| dot(&arch.segmentor_forward(&params.head, &with(&feature, v)).unwrap().logits, &r));
    out.push(Check { name: "segmentor/feature".into(), rel_err: rel_err(gf.as_slice(), &n) });
    let mut probe = params.head.clone();
    let n = numeric_grad(&flat_stack(&params.head), |v| {
        set_stack(&mut probe, v);
        dot(&arch.segmentor_forward(&probe, &feature).unwrap().logits, &r)
    });
    out.push(Check { name: "segmentor/params".into(), rel_err: rel_err(&flat_stack(&grads.head), &n) });

    // Attention wrt feature and fusion parameters.
    let guidance = inheritance_guidance(&random_tensor(rng, 5, 8, 8, -2.0, 2.0)).unwrap();
    let att = arch.attention_forward(&params.fusion, &feature, &guidance).unwrap();
    let r = random_tensor(rng, fshape.0, fshape.1, fshape.2, -1.0, 1.0);
    let mut grads = arch.zero_segmentation();
    let gf = arch.attention_backward(&params.fusion, &att, &r, Some(&mut grads.fusion));
    let n = numeric_grad(feature.as_slice(), |v| {
        dot(&arch.attention_forward(&params.fusion, &with(&feature, v), &guidance).unwrap().output, &r)
    });
    out.push(Check { name: "attention/feature".into(), rel_err: rel_err(gf.as_slice(), &n) });
    let mut probe = params.fusion.clone();
    let n = numeric_grad(&flat_stack(&params.fusion), |v| {
        set_stack(&mut probe, v);
        dot(&arch.attention_forward(&probe, &feature, &guidance).unwrap().output, &r)
    });
    out.push(Check { name: "attention/params".into(), rel_err: rel_err(&flat_stack(&grads.fusion), &n) });

    // Discriminator wrt input and parameters.
    let mut disc = arch.init_discriminator(8);
    randomize(&mut disc, rng, 0.5);
    let input = softmax(&random_tensor(rng, 5, 8, 8, -2.0, 2.0));
    let t = arch.discriminator_forward(&disc, &input).unwrap();
    let ps = arch.patch_shape();
    let r = random_tensor(rng, ps.0, ps.1, ps.2, -1.0, 1.0);
    let mut dg = arch.zero_discriminator();
    let gi = arch.discriminator_backward(&disc, &t, &r, Some(&mut dg), true).unwrap();
    let n = numeric_grad(input.as_slice(), |v| dot(&arch.discriminator_forward(&disc, &with(&input, v)).unwrap().scores, &r));
    out.push(Check { name: "discriminator/input".into(), rel_err: rel_err(gi.as_slice(), &n) });
    let mut probe = disc.clone();
    let n = numeric_grad(&flat(&disc), |v| {
        set_flat(&mut probe, v);
        dot(&arch.discriminator_forward(&probe, &input).unwrap().scores, &r)
    });
    out.push(Check { name: "discriminator/params".into(), rel_err: rel_err(&flat(&dg), &n) });
}

fn loss_checks(out: &mut Vec<Check>, rng: &mut SeededRng) {
    let probs = random_tensor(rng, 5, 6, 6, 0.05, 0.95);
    let label = random_label(rng, 5, 6, 6);
    let g = loss_stage1(&probs, &label).unwrap().grad;
    let n = numeric_grad(probs.as_slice(), |v| loss_stage1(&with(&probs, v), &label).unwrap().value);
    out.push(Check { name: "loss_stage1".into(), rel_err: rel_err(g.as_slice(), &n) });

    let seen: SeenLabels = label.seen_view(&[1, 3]);
    let g = loss_seen(&probs, &seen).unwrap().grad;
    let n = numeric_grad(probs.as_slice(), |v| loss_seen(&with(&probs, v), &seen).unwrap().value);
    out.push(Check { name: "loss_seen".into(), rel_err: rel_err(g.as_slice(), &n) });

    let other = random_tensor(rng, 5, 6, 6, 0.05, 0.95);
    let c = loss_cross(&probs, &other, &seen).unwrap();
    let n = numeric_grad(probs.as_slice(), |v| loss_cross(&with(&probs, v), &other, &seen).unwrap().value);
    out.push(Check { name: "loss_cross/prior_to_zero_shot".into(), rel_err: rel_err(c.grad_prior_to_zero_shot.as_slice(), &n) });
    let n = numeric_grad(other.as_slice(), |v| loss_cross(&probs, &with(&other, v), &seen).unwrap().value);
    out.push(Check { name: "loss_cross/zero_shot_to_prior".into(), rel_err: rel_err(c.grad_zero_shot_to_prior.as_slice(), &n) });

    let pseudo = Tensor3::from_fn(1, 6, 6, |_, y, x| ((y + x) % 3 == 0) as u8 as f64);
    let bgc = probs.channel(0);
    let g = loss_bg(&pseudo, &bgc).unwrap().grad;
    let n = numeric_grad(bgc.as_slice(), |v| loss_bg(&pseudo, &with(&bgc, v)).unwrap().value);
    out.push(Check { name: "loss_bg".into(), rel_err: rel_err(g.as_slice(), &n) });

    let w = LossWeights::default();
    let d: Vec<Tensor3> = (0..4).map(|_| random_tensor(rng, 1, 2, 2, 0.05, 0.95)).collect();
    let l = loss_discriminator(&d[0], Some(&d[1]), Some(&d[2]), &d[3], &w).unwrap();
    for k in 0..4 {
        let n = numeric_grad(d[k].as_slice(), |v| {
            let mut dd = d.clone();
            dd[k] = with(&d[k], v);
            loss_discriminator(&dd[0], Some(&dd[1]), Some(&dd[2]), &dd[3], &w).unwrap().value
        });
        out.push(Check { name: format!("loss_discriminator/term{k}"), rel_err: rel_err(l.grads[k].as_ref().unwrap().as_slice(), &n) });
    }
    let l = loss_adversarial(Some(&d[1]), Some(&d[2]), &d[3]).unwrap();
    for k in 0..3 {
        let n = numeric_grad(d[k + 1].as_slice(), |v| {
            let mut dd = d.clone();
            dd[k + 1] = with(&d[k + 1], v);
            loss_adversarial(Some(&dd[1]), Some(&dd[2]), &dd[3]).unwrap().value
        });
        out.push(Check { name: format!("loss_adversarial/term{k}"), rel_err: rel_err(l.grads[k].as_ref().unwrap().as_slice(), &n) });
    }
}

fn stage2_checks(out: &mut Vec<Check>, rng: &mut SeededRng) {
    let arch = tiny_arch();
    let mut prior = arch.init_segmentation(1);
    randomize(&mut prior, rng, 0.6);
    let image = random_tensor(rng, 1, 8, 8, -2.0, 2.0);
    let label = random_label(rng, 5, 8, 8);
    let seen = label.seen_view(&[2, 3, 4]);
    for setting in [AblationSetting::C, AblationSetting::D, AblationSetting::E, AblationSetting::F, AblationSetting::G] {
        let ab = configure_ablation(setting, &LossWeights::default());
        let mut model = arch.init_segmentation(2);
        randomize(&mut model, rng, 0.6);
        let mut disc = arch.init_discriminator(3);
        randomize(&mut disc, rng, 0.6);
        let mut mg = arch.zero_segmentation();
        let mut dg = arch.zero_discriminator();
        let run = |m: &SegmentationParams, d: &inheritseg_core::nets::DiscriminatorParams| {
            let mut a = arch.zero_segmentation();
            let mut b = arch.zero_discriminator();
            stage2_gradients(&arch, &prior, m, d, &image, &seen, &ab.switches, &ab.weights, 1.0, &mut a, &mut b).unwrap()
        };
        stage2_gradients(&arch, &prior, &model, &disc, &image, &seen, &ab.switches, &ab.weights, 1.0, &mut mg, &mut dg).unwrap();
        let mut probe = model.clone();
        let n = numeric_grad(&flat(&model), |v| {
            set_flat(&mut probe, v);
            run(&probe, &disc).seg
        });
        out.push(Check { name: format!("stage2_{setting}/L_Seg_model"), rel_err: rel_err(&flat(&mg), &n) });
        if ab.switches.rpa {
            let mut probe = disc.clone();
            let n = numeric_grad(&flat(&disc), |v| {
                set_flat(&mut probe, v);
                run(&model, &probe).disc
            });
            out.push(Check { name: format!("stage2_{setting}/L_D_disc"), rel_err: rel_err(&flat(&dg), &n) });
        }
    }
}

/// Every check of the suite.
pub fn suite() -> Vec<Check> {
    let mut rng = SeededRng::new(2024);
    let mut out = Vec::new();
    conv_checks(&mut out, &mut rng);
    pointwise_checks(&mut out, &mut rng);
    network_checks(&mut out, &mut rng);
    loss_checks(&mut out, &mut rng);
    stage2_checks(&mut out, &mut rng);
    out
}

