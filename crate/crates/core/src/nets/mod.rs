//! Feature backbone, segmentor head, inheritance-attention fusion and patch
//! discriminator.
//!
//! Every network is a short stack of convolutions with a hand-written
//! backward pass. Forward calls return a trace holding what the backward
//! pass needs; parameters are passed explicitly so the same architecture can
//! evaluate the frozen prior model, the zero-shot model and finite-difference
//! perturbations without copying state around.

pub mod layers;
mod params;

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor3;
use layers::{
    avg_pool, conv_backward, conv_forward, sigmoid, sigmoid_backward, Activation, BilinearResize, ConvCache, ConvSpec,
};

pub use layers::{softmax, softmax_backward};
pub use params::{DiscriminatorParams, ParamTensors, SegmentationParams, StackParams};

/// Spatial reduction between the image and the feature map.
pub const FEATURE_STRIDE: usize = 4;

/// What the discriminator receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscriminatorInput {
    Probabilities,
    Logits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub height: usize,
    pub width: usize,
    /// Class count including background.
    pub classes: usize,
    /// Output widths of the three backbone convolutions; the last is `C_f`.
    pub backbone_widths: [usize; 3],
    pub head_hidden: usize,
    pub fusion_hidden: usize,
    pub discriminator_widths: [usize; 2],
    pub discriminator_slope: f64,
    /// Bias terms in backbone, head and discriminator convolutions. The
    /// fusion block never has biases.
    pub conv_bias: bool,
    pub discriminator_input: DiscriminatorInput,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 5,
            backbone_widths: [16, 32, 32],
            head_hidden: 32,
            fusion_hidden: 16,
            discriminator_widths: [16, 32],
            discriminator_slope: 0.2,
            conv_bias: true,
            discriminator_input: DiscriminatorInput::Probabilities,
        }
    }
}

impl NetworkConfig {
    pub fn feature_channels(&self) -> usize {
        self.backbone_widths[2]
    }

    /// `(C_f, H_f, W_f)`.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        (self.feature_channels(), self.height / FEATURE_STRIDE, self.width / FEATURE_STRIDE)
    }

    pub fn score_shape(&self) -> (usize, usize, usize) {
        (self.classes, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.height,
            self.width,
            self.head_hidden,
            self.fusion_hidden,
            self.discriminator_widths[0],
            self.discriminator_widths[1],
        ];
        if dims.iter().chain(self.backbone_widths.iter()).any(|&d| d == 0) {
            return Err(Error::Invalid("network dimensions must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Invalid("at least two classes are required".into()));
        }
        if self.height % FEATURE_STRIDE != 0 || self.width % FEATURE_STRIDE != 0 {
            return Err(Error::Invalid("image size must be divisible by 4".into()));
        }
        Ok(())
    }
}

/// Caches of a convolution stack.
#[derive(Debug, Clone)]
pub struct StackTrace {
    caches: Vec<ConvCache>,
}

impl StackTrace {
    pub fn output(&self) -> &Tensor3 {
        self.caches.last().expect("stacks are nonempty").output()
    }
}

fn stack_forward(specs: &[ConvSpec], params: &StackParams, x: &Tensor3) -> Result<StackTrace> {
    let mut caches: Vec<ConvCache> = Vec::with_capacity(specs.len());
    for (spec, p) in specs.iter().zip(&params.layers) {
        let input = caches.last().map(|c| c.output()).unwrap_or(x);
        let cache = conv_forward(spec, p, input)?;
        caches.push(cache);
    }
    Ok(StackTrace { caches })
}

fn stack_backward(
    specs: &[ConvSpec],
    params: &StackParams,
    trace: &StackTrace,
    grad: &Tensor3,
    mut grads: Option<&mut StackParams>,
    want_input: bool,
) -> Option<Tensor3> {
    let mut g = grad.clone();
    for i in (0..specs.len()).rev() {
        let layer_grads = grads.as_deref_mut().map(|gp| &mut gp.layers[i]);
        let need = want_input || i > 0;
        match conv_backward(&specs[i], &params.layers[i], &trace.caches[i], &g, layer_grads, need) {
            Some(next) => g = next,
            None => return None,
        }
    }
    Some(g)
}

/// Segmentor trace: head activations plus full-resolution logits.
#[derive(Debug, Clone)]
pub struct SegmentorTrace {
    head: StackTrace,
    pub logits: Tensor3,
}

/// Inheritance-attention trace.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// Guidance resampled to the feature grid (`1 × H_f × W_f`).
    pub pooled_guidance: Tensor3,
    fusion: StackTrace,
    /// `M(g ⊗ f) + f`.
    pub output: Tensor3,
}

/// Discriminator trace.
#[derive(Debug, Clone)]
pub struct DiscriminatorTrace {
    stack: StackTrace,
    /// Patch scores in (0, 1), `1 × h × w`.
    pub scores: Tensor3,
}

/// Layer geometry derived from a [`NetworkConfig`].
#[derive(Debug, Clone)]
pub struct Architecture {
    config: NetworkConfig,
    backbone: Vec<ConvSpec>,
    head: Vec<ConvSpec>,
    fusion: Vec<ConvSpec>,
    discriminator: Vec<ConvSpec>,
    upsample: BilinearResize,
}

impl Architecture {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let [b0, b1, cf] = config.backbone_widths;
        let bias = |s: ConvSpec| if config.conv_bias { s } else { s.without_bias() };
        let backbone = alloc::vec![
            bias(ConvSpec::new(1, b0, 3, 2, Activation::Relu)),
            bias(ConvSpec::new(b0, b1, 3, 2, Activation::Relu)),
            bias(ConvSpec::new(b1, cf, 3, 1, Activation::Relu)),
        ];
        let head = alloc::vec![
            bias(ConvSpec::new(cf, config.head_hidden, 1, 1, Activation::Relu)),
            bias(ConvSpec::new(config.head_hidden, config.classes, 1, 1, Activation::Identity)),
        ];
        let fh = config.fusion_hidden;
        let fusion = alloc::vec![
            ConvSpec::new(cf, fh, 3, 1, Activation::Relu).without_bias(),
            ConvSpec::new(fh, fh, 1, 1, Activation::Relu).without_bias(),
            ConvSpec::new(fh, cf, 1, 1, Activation::Identity).without_bias(),
        ];
        let [d0, d1] = config.discriminator_widths;
        let leaky = Activation::LeakyRelu(config.discriminator_slope);
        let discriminator = alloc::vec![
            bias(ConvSpec::new(config.classes, d0, 3, 2, leaky)),
            bias(ConvSpec::new(d0, d1, 3, 2, leaky)),
            bias(ConvSpec::new(d1, 1, 3, 2, Activation::Identity)),
        ];
        let (_, hf, wf) = config.feature_shape();
        let upsample = BilinearResize::new(hf, wf, config.height, config.width);
        Ok(Self {
            config,
            backbone,
            head,
            fusion,
            discriminator,
            upsample,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Patch grid of the discriminator, `(1, h, w)`.
    pub fn patch_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.config.height, self.config.width);
        for s in &self.discriminator {
            (h, w) = s.output_size(h, w);
        }
        (1, h, w)
    }

    /// Fresh segmentation parameters; the fusion output layer starts at
    /// zero so attention begins as the identity.
    pub fn init_segmentation(&self, seed: u64) -> SegmentationParams {
        let mut rng = SeededRng::new(derive_seed(seed, 0x5e9));
        let backbone = StackParams::init(&self.backbone, &mut rng);
        let head = StackParams::init(&self.head, &mut rng);
        let mut fusion = StackParams::init(&self.fusion, &mut rng);
        fusion.zero_last();
        SegmentationParams { backbone, head, fusion }
    }

    pub fn init_discriminator(&self, seed: u64) -> DiscriminatorParams {
        let mut rng = SeededRng::new(derive_seed(seed, 0xd15c));
        DiscriminatorParams(StackParams::init(&self.discriminator, &mut rng))
    }

    pub fn zero_segmentation(&self) -> SegmentationParams {
        SegmentationParams {
            backbone: StackParams::zeros(&self.backbone),
            head: StackParams::zeros(&self.head),
            fusion: StackParams::zeros(&self.fusion),
        }
    }

    pub fn zero_discriminator(&self) -> DiscriminatorParams {
        DiscriminatorParams(StackParams::zeros(&self.discriminator))
    }

    pub fn backbone_forward(&self, params: &StackParams, image: &Tensor3) -> Result<StackTrace> {
        image.ensure_shape("backbone_forward", (1, self.config.height, self.config.width))?;
        stack_forward(&self.backbone, params, image)
    }

    /// Accumulates backbone parameter gradients for `grad_feature`.
    pub fn backbone_backward(&self, params: &StackParams, trace: &StackTrace, grad_feature: &Tensor3, grads: &mut StackParams) {
        stack_backward(&self.backbone, params, trace, grad_feature, Some(grads), false);
    }

    /// Logits at full resolution (`C × H × W`).
    pub fn segmentor_forward(&self, params: &StackParams, feature: &Tensor3) -> Result<SegmentorTrace> {
        feature.ensure_shape("segmentor_forward", self.config.feature_shape())?;
        let head = stack_forward(&self.head, params, feature)?;
        let logits = self.upsample.forward(head.output())?;
        Ok(SegmentorTrace { head, logits })
    }

    pub fn segmentor_backward(
        &self,
        params: &StackParams,
        trace: &SegmentorTrace,
        grad_logits: &Tensor3,
        grads: Option<&mut StackParams>,
        want_input: bool,
    ) -> Option<Tensor3> {
        let g = self.upsample.backward(grad_logits);
        stack_backward(&self.head, params, &trace.head, &g, grads, want_input)
    }

    /// `M(pool(g) ⊗ f) + f`, where `g` is a full-resolution guidance map.
    pub fn attention_forward(&self, params: &StackParams, feature: &Tensor3, guidance: &Tensor3) -> Result<AttentionTrace> {
        let (cf, hf, wf) = self.config.feature_shape();
        feature.ensure_shape("inheritance_attention", (cf, hf, wf))?;
        guidance.ensure_shape("inheritance_attention", (1, self.config.height, self.config.width))?;
        let pooled_guidance = avg_pool(guidance, FEATURE_STRIDE)?;
        if pooled_guidance.shape() != (1, hf, wf) {
            return Err(shape_err("inheritance_attention", (1, hf, wf), pooled_guidance.shape()));
        }
        let gated = gate(feature, &pooled_guidance);
        let fusion = stack_forward(&self.fusion, params, &gated)?;
        let mut output = fusion.output().clone();
        output.add_assign(feature);
        Ok(AttentionTrace {
            pooled_guidance,
            fusion,
            output,
        })
    }

    /// Returns the gradient wrt the attended feature and accumulates fusion
    /// parameter gradients.
    pub fn attention_backward(
        &self,
        params: &StackParams,
        trace: &AttentionTrace,
        grad_output: &Tensor3,
        grads: Option<&mut StackParams>,
    ) -> Tensor3 {
        let grad_gated = stack_backward(&self.fusion, params, &trace.fusion, grad_output, grads, true)
            .expect("input gradient requested");
        let mut grad = gate(&grad_gated, &trace.pooled_guidance);
        grad.add_assign(grad_output);
        grad
    }

    pub fn discriminator_forward(&self, params: &DiscriminatorParams, input: &Tensor3) -> Result<DiscriminatorTrace> {
        input.ensure_shape("discriminator_forward", self.config.score_shape())?;
        let stack = stack_forward(&self.discriminator, &params.0, input)?;
        let scores = sigmoid(stack.output());
        Ok(DiscriminatorTrace { stack, scores })
    }

    /// Returns the gradient wrt the discriminator input; parameter gradients
    /// are accumulated when `grads` is given.
    pub fn discriminator_backward(
        &self,
        params: &DiscriminatorParams,
        trace: &DiscriminatorTrace,
        grad_scores: &Tensor3,
        grads: Option<&mut DiscriminatorParams>,
        want_input: bool,
    ) -> Option<Tensor3> {
        let g = sigmoid_backward(trace.stack.output(), &trace.scores, grad_scores);
        stack_backward(&self.discriminator, &params.0, &trace.stack, &g, grads.map(|d| &mut d.0), want_input)
    }
}

/// Broadcast product of a `C × h × w` tensor with a `1 × h × w` map.
fn gate(feature: &Tensor3, map: &Tensor3) -> Tensor3 {
    let (c, h, w) = feature.shape();
    let n = h * w;
    let m = map.as_slice();
    let mut out = feature.clone();
    for ch in 0..c {
        for (v, &g) in out.as_mut_slice()[ch * n..(ch + 1) * n].iter_mut().zip(m) {
            *v *= g;
        }
    }
    out
}

/// Per-pixel class probabilities of a score map.
pub fn softmax_probs(scores: &Tensor3) -> Tensor3 {
    softmax(scores)
}

/// Maximum non-background softmax probability per pixel (`1 × H × W`).
pub fn inheritance_guidance(prior_scores: &Tensor3) -> Result<Tensor3> {
    let (c, h, w) = prior_scores.shape();
    if c < 2 {
        return Err(Error::Invalid("guidance needs a background and at least one structure channel".into()));
    }
    let probs = softmax(prior_scores);
    let n = h * w;
    let p = probs.as_slice();
    let mut g = Tensor3::zeros(1, h, w);
    for (i, out) in g.as_mut_slice().iter_mut().enumerate() {
        *out = (1..c).map(|ch| p[ch * n + i]).fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(g)
}
