//! Primitive layers with explicit forward and backward passes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor3;

/// Pointwise nonlinearity applied after a convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(a) => {
                if v > 0.0 {
                    v
                } else {
                    a * v
                }
            }
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn slope_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if out > 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }
}

/// C = A·B + beta·C with optional transposition of the stored operands.
/// `A` is `m × k` (stored `k × m` when `a_t`), `B` is `k × n` (stored
/// `n × k` when `b_t`), `C` is row-major `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above cover every element touched by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution followed by an activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, activation: Activation) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            bias: true,
            activation,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let oh = (height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Weights (`out × in·k·k`, row-major) and optional bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(spec: &ConvSpec) -> Self {
        Self {
            weight: vec![0.0; spec.out_channels * spec.patch_len()],
            bias: if spec.bias { vec![0.0; spec.out_channels] } else { Vec::new() },
        }
    }

    /// Fan-in scaled Gaussian weights, zero bias.
    pub fn init(spec: &ConvSpec, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(spec);
        let gain = match spec.activation {
            Activation::Relu | Activation::LeakyRelu(_) => 2.0,
            Activation::Identity => 1.0,
        };
        let std = libm::sqrt(gain / spec.patch_len() as f64);
        for w in &mut p.weight {
            *w = std * rng.normal();
        }
        p
    }
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    /// im2col matrix (`in·k·k × oh·ow`), or the input itself for 1×1 convs.
    cols: Vec<f64>,
    input_shape: (usize, usize, usize),
    output: Tensor3,
}

impl ConvCache {
    pub fn output(&self) -> &Tensor3 {
        &self.output
    }
}

fn im2col(spec: &ConvSpec, x: &Tensor3, oh: usize, ow: usize) -> Vec<f64> {
    let (c, h, w) = x.shape();
    let k = spec.kernel;
    let n = oh * ow;
    let mut cols = vec![0.0; spec.patch_len() * n];
    let src = x.as_slice();
    for ic in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ic * k + ky) * k + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ic * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * ow + ox] = src[base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(spec: &ConvSpec, cols: &[f64], shape: (usize, usize, usize), oh: usize, ow: usize) -> Tensor3 {
    let (c, h, w) = shape;
    let k = spec.kernel;
    let n = oh * ow;
    let mut out = Tensor3::zeros(c, h, w);
    let dst = out.as_mut_slice();
    for ic in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ic * k + ky) * k + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ic * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_forward(spec: &ConvSpec, params: &ConvParams, x: &Tensor3) -> Result<ConvCache> {
    let (c, h, w) = x.shape();
    if c != spec.in_channels {
        return Err(shape_err("conv_forward", spec.in_channels, c));
    }
    let (oh, ow) = spec.output_size(h, w);
    let n = oh * ow;
    let cols = if spec.is_pointwise() { x.as_slice().to_vec() } else { im2col(spec, x, oh, ow) };
    let mut out = Tensor3::zeros(spec.out_channels, oh, ow);
    let data = out.as_mut_slice();
    if spec.bias {
        for (oc, &b) in params.bias.iter().enumerate() {
            data[oc * n..(oc + 1) * n].fill(b);
        }
    }
    gemm(
        spec.out_channels,
        spec.patch_len(),
        n,
        &params.weight,
        false,
        &cols,
        false,
        data,
        if spec.bias { 1.0 } else { 0.0 },
    );
    if spec.activation != Activation::Identity {
        for v in data.iter_mut() {
            *v = spec.activation.apply(*v);
        }
    }
    Ok(ConvCache {
        cols,
        input_shape: (c, h, w),
        output: out,
    })
}

/// Backpropagates `grad_out` through one convolution. Parameter gradients are
/// accumulated into `grads` when given; the input gradient is returned when
/// `want_input` is set.
pub fn conv_backward(
    spec: &ConvSpec,
    params: &ConvParams,
    cache: &ConvCache,
    grad_out: &Tensor3,
    grads: Option<&mut ConvParams>,
    want_input: bool,
) -> Option<Tensor3> {
    let (_, oh, ow) = cache.output.shape();
    let n = oh * ow;
    let mut delta = grad_out.clone();
    if spec.activation != Activation::Identity {
        for (d, &o) in delta.as_mut_slice().iter_mut().zip(cache.output.as_slice()) {
            *d *= spec.activation.slope_from_output(o);
        }
    }
    let delta = delta.as_slice();
    if let Some(g) = grads {
        gemm(spec.out_channels, n, spec.patch_len(), delta, false, &cache.cols, true, &mut g.weight, 1.0);
        if spec.bias {
            for (oc, b) in g.bias.iter_mut().enumerate() {
                *b += delta[oc * n..(oc + 1) * n].iter().sum::<f64>();
            }
        }
    }
    if !want_input {
        return None;
    }
    let mut dcols = vec![0.0; spec.patch_len() * n];
    gemm(spec.patch_len(), spec.out_channels, n, &params.weight, true, delta, false, &mut dcols, 0.0);
    let (c, h, w) = cache.input_shape;
    if spec.is_pointwise() {
        Some(Tensor3::from_vec(c, h, w, dcols).expect("pointwise conv keeps the input shape"))
    } else {
        Some(col2im(spec, &dcols, cache.input_shape, oh, ow))
    }
}

/// Separable interpolation weights of a bilinear resize (half-pixel centers).
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearResize {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

impl BilinearResize {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: axis_table(in_h, out_h),
            cols: axis_table(in_w, out_w),
        }
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        let (c, h, w) = x.shape();
        if (h, w) != (self.in_h, self.in_w) {
            return Err(shape_err("bilinear_resize", (self.in_h, self.in_w), (h, w)));
        }
        let mut out = Tensor3::zeros(c, self.out_h, self.out_w);
        for ch in 0..c {
            let src = x.plane(ch);
            let dst = out.plane_mut(ch);
            for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * self.out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Tensor3) -> Tensor3 {
        let c = grad_out.channels();
        let w = self.in_w;
        let mut out = Tensor3::zeros(c, self.in_h, self.in_w);
        for ch in 0..c {
            let g = grad_out.plane(ch);
            let dst = out.plane_mut(ch);
            for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let v = g[oy * self.out_w + ox];
                    dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                    dst[y1 * w + x0] += v * fy * (1.0 - fx);
                    dst[y1 * w + x1] += v * fy * fx;
                }
            }
        }
        out
    }
}

/// Non-overlapping `factor × factor` average pooling.
pub fn avg_pool(x: &Tensor3, factor: usize) -> Result<Tensor3> {
    let (c, h, w) = x.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err("avg_pool", factor, (h, w)));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Tensor3::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x.get(ch, y, xx);
                let o = out.get(ch, y / factor, xx / factor);
                out.set(ch, y / factor, xx / factor, o + v * norm);
            }
        }
    }
    Ok(out)
}

/// Per-pixel softmax over channels.
pub fn softmax(logits: &Tensor3) -> Tensor3 {
    let (c, h, w) = logits.shape();
    let n = h * w;
    let src = logits.as_slice();
    let mut out = Tensor3::zeros(c, h, w);
    let dst = out.as_mut_slice();
    for p in 0..n {
        let mut max = f64::NEG_INFINITY;
        for ch in 0..c {
            max = max.max(src[ch * n + p]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = libm::exp(src[ch * n + p] - max);
            dst[ch * n + p] = e;
            sum += e;
        }
        for ch in 0..c {
            dst[ch * n + p] /= sum;
        }
    }
    out
}

/// Maps a gradient wrt softmax probabilities to a gradient wrt logits.
pub fn softmax_backward(probs: &Tensor3, grad_probs: &Tensor3) -> Tensor3 {
    let (c, h, w) = probs.shape();
    let n = h * w;
    let m = probs.as_slice();
    let g = grad_probs.as_slice();
    let mut out = Tensor3::zeros(c, h, w);
    let dst = out.as_mut_slice();
    for p in 0..n {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += m[ch * n + p] * g[ch * n + p];
        }
        for ch in 0..c {
            dst[ch * n + p] = m[ch * n + p] * (g[ch * n + p] - dot);
        }
    }
    out
}

/// Logits are clamped to this magnitude so sigmoid outputs stay strictly
/// inside (0, 1).
pub const SIGMOID_LOGIT_LIMIT: f64 = 30.0;

pub fn sigmoid(x: &Tensor3) -> Tensor3 {
    x.map(|v| {
        let v = v.clamp(-SIGMOID_LOGIT_LIMIT, SIGMOID_LOGIT_LIMIT);
        1.0 / (1.0 + libm::exp(-v))
    })
}

pub fn sigmoid_backward(logits: &Tensor3, out: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
    let mut g = grad_out.clone();
    for ((d, &s), &z) in g.as_mut_slice().iter_mut().zip(out.as_slice()).zip(logits.as_slice()) {
        *d *= if libm::fabs(z) > SIGMOID_LOGIT_LIMIT { 0.0 } else { s * (1.0 - s) };
    }
    g
}
