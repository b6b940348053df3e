use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::layers::{ConvParams, ConvSpec};
use crate::rng::SeededRng;

/// Parameters of a sequential stack of convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct StackParams {
    pub layers: Vec<ConvParams>,
}

impl StackParams {
    pub fn init(specs: &[ConvSpec], rng: &mut SeededRng) -> Self {
        Self {
            layers: specs.iter().map(|s| ConvParams::init(s, rng)).collect(),
        }
    }

    pub fn zeros(specs: &[ConvSpec]) -> Self {
        Self {
            layers: specs.iter().map(ConvParams::zeros).collect(),
        }
    }

    /// Zeroes the weights and bias of the last layer.
    pub fn zero_last(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.fill(0.0);
            last.bias.fill(0.0);
        }
    }
}

/// Backbone, segmentor head and attention fusion of one segmentation model.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationParams {
    pub backbone: StackParams,
    pub head: StackParams,
    pub fusion: StackParams,
}

/// Named access to every parameter tensor, in a fixed order.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<(String, &Vec<f64>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.tensors() {
            for v in t {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn push_stack<'a>(prefix: &str, stack: &'a StackParams, out: &mut Vec<(String, &'a Vec<f64>)>) {
    for (i, layer) in stack.layers.iter().enumerate() {
        out.push((format!("{prefix}.{i}.weight"), &layer.weight));
        if !layer.bias.is_empty() {
            out.push((format!("{prefix}.{i}.bias"), &layer.bias));
        }
    }
}

fn push_stack_mut<'a>(stack: &'a mut StackParams, out: &mut Vec<&'a mut Vec<f64>>) {
    for layer in &mut stack.layers {
        out.push(&mut layer.weight);
        if !layer.bias.is_empty() {
            out.push(&mut layer.bias);
        }
    }
}

/// Patch discriminator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams(pub StackParams);

impl ParamTensors for DiscriminatorParams {
    fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        push_stack("discriminator", &self.0, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        push_stack_mut(&mut self.0, &mut out);
        out
    }
}

impl ParamTensors for SegmentationParams {
    fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        push_stack("backbone", &self.backbone, &mut out);
        push_stack("head", &self.head, &mut out);
        push_stack("fusion", &self.fusion, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        push_stack_mut(&mut self.backbone, &mut out);
        push_stack_mut(&mut self.head, &mut out);
        push_stack_mut(&mut self.fusion, &mut out);
        out
    }
}
