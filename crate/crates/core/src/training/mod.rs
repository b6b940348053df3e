//! Two-stage training: a fully supervised prior model, then a zero-shot
//! model that inherits unseen-class knowledge from it.

mod ablation;

use alloc::vec::Vec;

pub use ablation::{configure_ablation, AblationConfig, AblationSetting, ModuleSwitches};

use crate::datagen::{augment, AugmentConfig, LabelMap, LabeledSample, SeenLabels};
use crate::error::{Error, Result};
use crate::losses::{
    loss_adversarial, loss_bg, loss_cross, loss_discriminator, loss_seen, loss_seg, loss_stage1, pseudo_background, LossBundle,
    LossWeights,
};
use crate::nets::{
    inheritance_guidance, softmax, softmax_backward, Architecture, DiscriminatorInput, DiscriminatorParams, DiscriminatorTrace,
    ParamTensors, SegmentationParams, SegmentorTrace, StackParams,
};
use crate::optim::{poly_learning_rate, Optimizer, OptimizerSettings};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor3;

const STREAM_MODEL_INIT: u64 = 0x10;
const STREAM_DISC_INIT: u64 = 0x11;
const STREAM_SHUFFLE: u64 = 0x12;
const STREAM_AUGMENT: u64 = 0x13;

/// Optimizers and schedule of one training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub model: OptimizerSettings,
    pub discriminator: OptimizerSettings,
    pub epochs: usize,
    pub batch_size: usize,
    /// Polynomial learning-rate decay power; `None` keeps the rate constant.
    pub lr_decay_power: Option<f64>,
    pub augment: Option<AugmentConfig>,
    /// Epoch interval of the checkpoint callback; the final epoch is always reported.
    pub checkpoint_every: usize,
}

impl OptimizerConfig {
    /// Full-scale schedule: SGD 2.5e-4 with weight decay 5e-4, Adam 1e-4 for
    /// the discriminator, 250 epochs of batch 8.
    pub fn paper() -> Self {
        Self {
            model: OptimizerSettings::sgd(2.5e-4, 0.9, 5e-4),
            discriminator: OptimizerSettings::adam(1e-4, 0.9, 0.99),
            epochs: 250,
            batch_size: 8,
            lr_decay_power: None,
            augment: None,
            checkpoint_every: 10,
        }
    }

    /// Schedule used on the synthetic phantoms. A few hundred SGD steps at
    /// 2.5e-4 barely move a freshly initialized network, so the model uses
    /// Adam here.
    pub fn toy() -> Self {
        Self {
            model: OptimizerSettings::adam(1e-3, 0.9, 0.999),
            discriminator: OptimizerSettings::adam(1e-4, 0.9, 0.99),
            epochs: 60,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.discriminator.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Invalid("checkpoint interval must be at least 1".into()));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    fn learning_rate(&self, base: f64, step: u64, total: u64) -> f64 {
        match self.lr_decay_power {
            Some(p) => poly_learning_rate(base, step, total, p),
            None => base,
        }
    }
}

/// Seed-fixed batch order for one epoch.
fn epoch_batches(samples: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples).collect();
    SeededRng::new(derive_seed(seed, STREAM_SHUFFLE ^ ((epoch as u64) << 20))).shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn maybe_augment(sample: &LabeledSample, config: &OptimizerConfig, seed: u64, step: u64, index: usize) -> LabeledSample {
    match &config.augment {
        Some(a) => augment(sample, derive_seed(seed, STREAM_AUGMENT ^ (step << 16) ^ index as u64), a),
        None => sample.clone(),
    }
}

/// One record per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub losses: LossBundle,
}

/// Result of fully supervised training.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedOutcome {
    pub params: SegmentationParams,
    /// Batch-mean cross-entropy of every step.
    pub history: Vec<f64>,
}

/// Cross-entropy loss of one fully labeled sample and, when `grads` is
/// given, accumulation of `scale ×` its parameter gradients.
pub fn supervised_gradients(
    arch: &Architecture,
    params: &SegmentationParams,
    image: &Tensor3,
    label: &LabelMap,
    grads: Option<&mut SegmentationParams>,
    scale: f64,
) -> Result<f64> {
    let f = arch.backbone_forward(&params.backbone, image)?;
    let seg = arch.segmentor_forward(&params.head, f.output())?;
    let probs = softmax(&seg.logits);
    let loss = loss_stage1(&probs, label)?;
    if let Some(grads) = grads {
        let mut g = softmax_backward(&probs, &loss.grad);
        g.scale(scale);
        let gf = arch
            .segmentor_backward(&params.head, &seg, &g, Some(&mut grads.head), true)
            .expect("input gradient requested");
        arch.backbone_backward(&params.backbone, &f, &gf, &mut grads.backbone);
    }
    Ok(loss.value)
}

/// Trains a segmentation model with full labels: the prior on the first
/// modality, or the Oracle on the second.
pub fn train_supervised(
    arch: &Architecture,
    data: &[&LabeledSample],
    init: SegmentationParams,
    config: &OptimizerConfig,
    seed: u64,
) -> Result<SupervisedOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut params = init;
    let mut opt = Optimizer::new(config.model, &params);
    let total = (config.epochs * config.batches_per_epoch(data.len())) as u64;
    let mut history = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        for batch in epoch_batches(data.len(), config.batch_size, seed, epoch) {
            let mut grads = arch.zero_segmentation();
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in &batch {
                let s = maybe_augment(data[i], config, seed, step, i);
                loss += scale * supervised_gradients(arch, &params, &s.image, &s.label, Some(&mut grads), scale)?;
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite { name: "L_Stage1", step });
            }
            let lr = config.learning_rate(config.model.learning_rate, step, total);
            opt.step(&mut params, &grads, lr);
            history.push(loss);
            step += 1;
        }
    }
    Ok(SupervisedOutcome { params, history })
}

/// Stage 1: the prior model, trained with cross-entropy on the fully
/// labeled first modality.
pub fn train_prior(arch: &Architecture, prior_data: &[&LabeledSample], config: &OptimizerConfig, seed: u64) -> Result<SupervisedOutcome> {
    train_supervised(arch, prior_data, arch.init_segmentation(derive_seed(seed, STREAM_MODEL_INIT)), config, seed)
}

/// Swapped segmentation: the zero-shot segmentor on prior features
/// (`m_{p→s}`) and the prior segmentor on zero-shot features (`m_{s→p}`).
pub fn cma_swap(
    arch: &Architecture,
    f_p: &Tensor3,
    f_s: &Tensor3,
    zero_shot_head: &StackParams,
    prior_head: &StackParams,
) -> Result<(SegmentorTrace, SegmentorTrace)> {
    if !f_p.same_shape(f_s) {
        return Err(crate::error::shape_err("cma_swap", f_p.shape(), f_s.shape()));
    }
    Ok((arch.segmentor_forward(zero_shot_head, f_p)?, arch.segmentor_forward(prior_head, f_s)?))
}

/// Everything that changes during stage 2. The prior is carried along but
/// never updated.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub prior: SegmentationParams,
    pub model: SegmentationParams,
    pub discriminator: DiscriminatorParams,
    pub model_opt: Optimizer,
    pub disc_opt: Optimizer,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(arch: &Architecture, prior: SegmentationParams, switches: &ModuleSwitches, config: &OptimizerConfig, seed: u64) -> Self {
        let model = if switches.warm_start {
            prior.clone()
        } else {
            arch.init_segmentation(derive_seed(seed, STREAM_MODEL_INIT))
        };
        let discriminator = arch.init_discriminator(derive_seed(seed, STREAM_DISC_INIT));
        Self {
            model_opt: Optimizer::new(config.model, &model),
            disc_opt: Optimizer::new(config.discriminator, &discriminator),
            prior,
            model,
            discriminator,
            epoch: 0,
            step: 0,
            seed,
        }
    }
}

fn discriminator_input(arch: &Architecture, logits: &Tensor3, probs: &Tensor3) -> Tensor3 {
    match arch.config().discriminator_input {
        DiscriminatorInput::Probabilities => probs.clone(),
        DiscriminatorInput::Logits => logits.clone(),
    }
}

/// Maps a gradient wrt the discriminator input back to the logits.
fn input_grad_to_logits(arch: &Architecture, probs: &Tensor3, grad: &Tensor3) -> Tensor3 {
    match arch.config().discriminator_input {
        DiscriminatorInput::Probabilities => softmax_backward(probs, grad),
        DiscriminatorInput::Logits => grad.clone(),
    }
}

/// Losses of one sample with the stage-2 gradients, accumulated with factor
/// `scale` into `model_grads` (from `L_Seg`, through the current
/// discriminator) and `disc_grads` (from `L_D`). Neither parameter set is
/// modified.
#[allow(clippy::too_many_arguments)]
pub fn stage2_gradients(
    arch: &Architecture,
    prior: &SegmentationParams,
    model: &SegmentationParams,
    disc: &DiscriminatorParams,
    image: &Tensor3,
    seen: &SeenLabels,
    switches: &ModuleSwitches,
    weights: &LossWeights,
    scale: f64,
    model_grads: &mut SegmentationParams,
    disc_grads: &mut DiscriminatorParams,
) -> Result<LossBundle> {
    let w = weights.omega;
    // Prior forward.
    let fp = arch.backbone_forward(&prior.backbone, image)?;
    let f_p = fp.output();
    let sp = arch.segmentor_forward(&prior.head, f_p)?;
    let m_p = softmax(&sp.logits);
    // Zero-shot backbone, attention and segmentor.
    let fz = arch.backbone_forward(&model.backbone, image)?;
    let att = if switches.ia {
        Some(arch.attention_forward(&model.fusion, fz.output(), &inheritance_guidance(&sp.logits)?)?)
    } else {
        None
    };
    let f_s = att.as_ref().map(|a| &a.output).unwrap_or(fz.output());
    let ss = arch.segmentor_forward(&model.head, f_s)?;
    let m_s = softmax(&ss.logits);
    // Feature swap.
    let swap = if switches.cma {
        let (ps, spx) = cma_swap(arch, f_p, f_s, &model.head, &prior.head)?;
        let (m_ps, m_sp) = (softmax(&ps.logits), softmax(&spx.logits));
        Some((ps, m_ps, spx, m_sp))
    } else {
        None
    };
    let pseudo = pseudo_background(&m_p);

    let seen_loss = loss_seen(&m_s, seen)?;
    let bg = loss_bg(&pseudo, &m_s.channel(0))?;
    let mut g_s = seen_loss.grad.clone();
    g_s.scale(w[1]);
    for (o, &g) in g_s.plane_mut(0).iter_mut().zip(bg.grad.as_slice()) {
        *o += w[2] * g;
    }
    let (g_ps, g_sp, cross_value) = match &swap {
        Some((_, m_ps, _, m_sp)) => {
            let c = loss_cross(m_ps, m_sp, seen)?;
            let mut a = c.grad_prior_to_zero_shot;
            let mut b = c.grad_zero_shot_to_prior;
            a.scale(w[0]);
            b.scale(w[0]);
            (Some(a), Some(b), c.value)
        }
        None => (None, None, 0.0),
    };

    let (mut adv_value, mut disc_value) = (0.0, 0.0);
    let mut adv_s: Option<Tensor3> = None;
    let mut adv_swap: Option<(Tensor3, Tensor3)> = None;
    if switches.rpa {
        let d_in_p = discriminator_input(arch, &sp.logits, &m_p);
        let d_in_s = discriminator_input(arch, &ss.logits, &m_s);
        let t_p = arch.discriminator_forward(disc, &d_in_p)?;
        let t_s = arch.discriminator_forward(disc, &d_in_s)?;
        let (t_sp, t_ps): (Option<DiscriminatorTrace>, Option<DiscriminatorTrace>) = match &swap {
            Some((ps, m_ps, spx, m_sp)) => (
                Some(arch.discriminator_forward(disc, &discriminator_input(arch, &spx.logits, m_sp))?),
                Some(arch.discriminator_forward(disc, &discriminator_input(arch, &ps.logits, m_ps))?),
            ),
            None => (None, None),
        };
        let ld = loss_discriminator(
            &t_p.scores,
            t_sp.as_ref().map(|t| &t.scores),
            t_ps.as_ref().map(|t| &t.scores),
            &t_s.scores,
            weights,
        )?;
        let la = loss_adversarial(t_sp.as_ref().map(|t| &t.scores), t_ps.as_ref().map(|t| &t.scores), &t_s.scores)?;
        disc_value = ld.value;
        adv_value = la.value;

        // Discriminator gradients from L_D.
        let traces = [Some(&t_p), t_sp.as_ref(), t_ps.as_ref(), Some(&t_s)];
        for (t, g) in traces.iter().zip(&ld.grads) {
            if let (Some(t), Some(g)) = (t, g) {
                let mut g = g.clone();
                g.scale(scale);
                arch.discriminator_backward(disc, t, &g, Some(disc_grads), false);
            }
        }
        // Model gradients from L_Adv through the frozen discriminator.
        if w[3] != 0.0 {
            let back = |t: &DiscriminatorTrace, g: &Option<Tensor3>, probs: &Tensor3| {
                let g = g.as_ref().expect("term present");
                let gi = arch.discriminator_backward(disc, t, g, None, true).expect("input gradient requested");
                let mut gl = input_grad_to_logits(arch, probs, &gi);
                gl.scale(w[3]);
                gl
            };
            let [ga_sp, ga_ps, ga_s] = &la.grads;
            adv_s = Some(back(&t_s, ga_s, &m_s));
            if let (Some((_, m_ps, _, m_sp)), Some(tsp), Some(tps)) = (&swap, &t_sp, &t_ps) {
                adv_swap = Some((back(tps, ga_ps, m_ps), back(tsp, ga_sp, m_sp)));
            }
        }
    }
    let losses = LossBundle {
        cross: cross_value,
        seen: seen_loss.value,
        bg: bg.value,
        adv: adv_value,
        seg: loss_seg(cross_value, seen_loss.value, bg.value, adv_value, weights),
        disc: disc_value,
    };

    // Back-propagate L_Seg into the zero-shot model.
    let mut gl_s = softmax_backward(&m_s, &g_s);
    if let Some(e) = &adv_s {
        gl_s.add_assign(e);
    }
    gl_s.scale(scale);
    let mut g_fs = arch
        .segmentor_backward(&model.head, &ss, &gl_s, Some(&mut model_grads.head), true)
        .expect("input gradient requested");
    if let (Some((ps, m_ps, spx, m_sp)), Some(g_ps), Some(g_sp)) = (&swap, &g_ps, &g_sp) {
        let mut gl_ps = softmax_backward(m_ps, g_ps);
        let mut gl_sp = softmax_backward(m_sp, g_sp);
        if let Some((a, b)) = &adv_swap {
            gl_ps.add_assign(a);
            gl_sp.add_assign(b);
        }
        gl_ps.scale(scale);
        gl_sp.scale(scale);
        // Prior features are fixed, so only the zero-shot head learns from m_{p→s}.
        arch.segmentor_backward(&model.head, ps, &gl_ps, Some(&mut model_grads.head), false);
        let g = arch
            .segmentor_backward(&prior.head, spx, &gl_sp, None, true)
            .expect("input gradient requested");
        g_fs.add_assign(&g);
    }
    let g_f = match &att {
        Some(a) => arch.attention_backward(&model.fusion, a, &g_fs, Some(&mut model_grads.fusion)),
        None => g_fs,
    };
    arch.backbone_backward(&model.backbone, &fz, &g_f, &mut model_grads.backbone);
    Ok(losses)
}

/// One alternating update on a batch: losses and gradients are computed
/// once, the discriminator is updated from `L_D`, then the zero-shot model
/// from `L_Seg` (whose adversarial gradients went through the
/// discriminator as it was before its update).
pub fn stage2_step(
    arch: &Architecture,
    batch: &[(&Tensor3, &SeenLabels)],
    state: &mut TrainState,
    ablation: &AblationConfig,
    config: &OptimizerConfig,
    total_steps: u64,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut model_grads = arch.zero_segmentation();
    let mut disc_grads = arch.zero_discriminator();
    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossBundle::default();
    for (image, seen) in batch {
        let l = stage2_gradients(
            arch,
            &state.prior,
            &state.model,
            &state.discriminator,
            image,
            seen,
            &ablation.switches,
            &ablation.weights,
            scale,
            &mut model_grads,
            &mut disc_grads,
        )?;
        mean.cross += scale * l.cross;
        mean.seen += scale * l.seen;
        mean.bg += scale * l.bg;
        mean.adv += scale * l.adv;
        mean.seg += scale * l.seg;
        mean.disc += scale * l.disc;
    }
    if let Some(name) = mean.first_non_finite() {
        return Err(Error::NonFinite { name, step: state.step });
    }
    if ablation.switches.rpa {
        let lr = config.learning_rate(config.discriminator.learning_rate, state.step, total_steps);
        state.disc_opt.step(&mut state.discriminator, &disc_grads, lr);
    }
    let lr = config.learning_rate(config.model.learning_rate, state.step, total_steps);
    state.model_opt.step(&mut state.model, &model_grads, lr);
    state.step += 1;
    Ok(mean)
}

/// Result of stage 2.
#[derive(Debug, Clone)]
pub struct ZeroShotOutcome {
    pub state: TrainState,
    pub history: Vec<StepRecord>,
}

/// Stage 2 over the training split. `on_checkpoint` runs every
/// `checkpoint_every` epochs and after the last one.
pub fn train_zeroshot(
    arch: &Architecture,
    train: &[&LabeledSample],
    seen_classes: &[usize],
    prior: SegmentationParams,
    ablation: &AblationConfig,
    config: &OptimizerConfig,
    seed: u64,
    mut on_checkpoint: impl FnMut(&TrainState, &[StepRecord]) -> Result<()>,
) -> Result<ZeroShotOutcome> {
    config.validate()?;
    ablation.weights.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit);
    }
    if seen_classes.is_empty() {
        return Err(Error::NoSeenClasses);
    }
    let prior_hash = prior.fingerprint();
    let mut state = TrainState::new(arch, prior, &ablation.switches, config, seed);
    let total = (config.epochs * config.batches_per_epoch(train.len())) as u64;
    let mut history = Vec::with_capacity(total as usize);
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        for batch in epoch_batches(train.len(), config.batch_size, seed, epoch) {
            let samples: Vec<(Tensor3, SeenLabels)> = batch
                .iter()
                .map(|&i| {
                    let s = maybe_augment(train[i], config, seed, state.step, i);
                    let y = s.label.seen_view(seen_classes);
                    (s.image, y)
                })
                .collect();
            let refs: Vec<(&Tensor3, &SeenLabels)> = samples.iter().map(|(x, y)| (x, y)).collect();
            let losses = stage2_step(arch, &refs, &mut state, ablation, config, total)?;
            history.push(StepRecord {
                step: state.step - 1,
                epoch,
                losses,
            });
        }
        state.epoch = epoch + 1;
        if (epoch + 1) % config.checkpoint_every == 0 || epoch + 1 == config.epochs {
            on_checkpoint(&state, &history)?;
        }
    }
    debug_assert_eq!(state.prior.fingerprint(), prior_hash);
    Ok(ZeroShotOutcome { state, history })
}
