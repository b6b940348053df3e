//! First-order optimizers over [`ParamTensors`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nets::ParamTensors;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Heavy-ball SGD; `momentum = 0` is plain SGD.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl OptimizerSettings {
    pub fn sgd(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum },
            learning_rate,
            weight_decay,
        }
    }

    pub fn adam(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam { beta1, beta2, eps: 1e-8 },
            learning_rate,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid("weight decay must be nonnegative".into()));
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Invalid("momentum must lie in [0, 1)".into()))
            }
            OptimizerKind::Adam { beta1, beta2, .. } if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) => {
                Err(Error::Invalid("Adam betas must lie in [0, 1)".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Optimizer state aligned with the tensor order of one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    settings: OptimizerSettings,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new<P: ParamTensors>(settings: OptimizerSettings, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let second = match settings.kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            settings,
            steps: 0,
            first: zeros(),
            second,
        }
    }

    pub fn settings(&self) -> &OptimizerSettings {
        &self.settings
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with the given learning rate.
    pub fn step<P: ParamTensors>(&mut self, params: &mut P, grads: &P, learning_rate: f64) {
        self.steps += 1;
        let wd = self.settings.weight_decay;
        let grads = grads.tensors();
        let params = params.tensors_mut();
        debug_assert_eq!(grads.len(), params.len());
        match self.settings.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, (_, g)), m) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((pi, &gi), mi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()) {
                        let d = gi + wd * *pi;
                        *mi = momentum * *mi + d;
                        *pi -= learning_rate * *mi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - libm::pow(beta1, t as f64);
                let c2 = 1.0 - libm::pow(beta2, t as f64);
                for (((p, (_, g)), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let d = gi + wd * *pi;
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        *pi -= learning_rate * (*mi / c1) / (libm::sqrt(*vi / c2) + eps);
                    }
                }
            }
        }
    }
}

/// Polynomial decay `lr·(1 - t/T)^power`.
pub fn poly_learning_rate(base: f64, step: u64, total: u64, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = 1.0 - (step as f64 / total as f64).min(1.0);
    base * libm::pow(frac, power)
}
