//! Flat key-value experiment configuration (TOML syntax, no tables).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use inheritseg_core::datagen::{AugmentConfig, BundleConfig, Layout, ModalityProfile, Transfer};
use inheritseg_core::losses::LossWeights;
use inheritseg_core::metrics::{DiceMode, EvalOptions};
use inheritseg_core::nets::{DiscriminatorInput, NetworkConfig};
use inheritseg_core::optim::{OptimizerKind, OptimizerSettings};
use inheritseg_core::training::{AblationSetting, OptimizerConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Which modality plays the fully labeled prior role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Prior on modality A, zero-shot target modality B.
    AToB,
    BToA,
}

impl FromStr for Direction {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a-to-b" | "a2b" | "ab" => Ok(Self::AToB),
            "b-to-a" | "b2a" | "ba" => Ok(Self::BToA),
            other => Err(HarnessError::Config(format!("unknown direction `{other}` (expected a-to-b or b-to-a)"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AToB => "a-to-b",
            Self::BToA => "b-to-a",
        })
    }
}

/// Every knob of one experiment. Serialized as a flat list of `key = value`
/// lines; unknown keys are rejected and missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub output_dir: PathBuf,
    pub direction: Direction,
    pub setting: String,
    /// Unseen structure indices (never 0); empty means fully supervised.
    pub unseen: Vec<usize>,

    pub n_prior: usize,
    pub n_target: usize,
    pub height: usize,
    pub width: usize,
    pub a_base_intensity: Vec<f64>,
    pub a_gamma: f64,
    pub a_gain: f64,
    pub a_offset: f64,
    pub a_class_jitter: f64,
    pub a_bias_field: f64,
    pub a_noise_sigma: f64,
    pub b_base_intensity: Vec<f64>,
    pub b_gamma: f64,
    pub b_gain: f64,
    pub b_offset: f64,
    pub b_class_jitter: f64,
    pub b_bias_field: f64,
    pub b_noise_sigma: f64,

    pub backbone_widths: Vec<usize>,
    pub head_hidden: usize,
    pub fusion_hidden: usize,
    pub discriminator_widths: Vec<usize>,
    pub discriminator_slope: f64,
    pub conv_bias: bool,
    /// `probabilities` or `logits`.
    pub discriminator_input: String,

    /// `sgd` or `adam`.
    pub model_optimizer: String,
    pub model_lr: f64,
    pub model_momentum: f64,
    pub model_beta1: f64,
    pub model_beta2: f64,
    pub model_weight_decay: f64,
    pub disc_lr: f64,
    pub disc_beta1: f64,
    pub disc_beta2: f64,
    pub prior_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Polynomial decay power; 0 keeps the learning rate constant.
    pub lr_decay_power: f64,
    pub augment: bool,
    pub checkpoint_every: usize,

    pub lambda: Vec<f64>,
    pub omega: Vec<f64>,

    /// `pooled` or `per-image`.
    pub dice_mode: String,
    pub spacing: Vec<f64>,
    /// Parallel matrix cells; 0 uses the available cores.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let bundle = BundleConfig::default();
        let net = NetworkConfig::default();
        let opt = OptimizerConfig::toy();
        let weights = LossWeights::default();
        let (a, b) = (&bundle.profile_prior, &bundle.profile_target);
        let (model_momentum, model_beta1, model_beta2) = optimizer_params(&opt.model);
        let (_, disc_beta1, disc_beta2) = optimizer_params(&opt.discriminator);
        Self {
            seed: 0,
            data_seed: bundle.seed,
            output_dir: PathBuf::from("runs"),
            direction: Direction::AToB,
            setting: "g".into(),
            unseen: bundle.unseen.clone(),
            n_prior: bundle.n_prior,
            n_target: bundle.n_target,
            height: bundle.layout.height,
            width: bundle.layout.width,
            a_base_intensity: a.base_intensity.clone(),
            a_gamma: a.transfer.gamma,
            a_gain: a.transfer.gain,
            a_offset: a.transfer.offset,
            a_class_jitter: a.class_jitter,
            a_bias_field: a.bias_field_amplitude,
            a_noise_sigma: a.noise_sigma,
            b_base_intensity: b.base_intensity.clone(),
            b_gamma: b.transfer.gamma,
            b_gain: b.transfer.gain,
            b_offset: b.transfer.offset,
            b_class_jitter: b.class_jitter,
            b_bias_field: b.bias_field_amplitude,
            b_noise_sigma: b.noise_sigma,
            backbone_widths: net.backbone_widths.to_vec(),
            head_hidden: net.head_hidden,
            fusion_hidden: net.fusion_hidden,
            discriminator_widths: net.discriminator_widths.to_vec(),
            discriminator_slope: net.discriminator_slope,
            conv_bias: net.conv_bias,
            discriminator_input: "probabilities".into(),
            model_optimizer: optimizer_name(&opt.model).into(),
            model_lr: opt.model.learning_rate,
            model_momentum,
            model_beta1,
            model_beta2,
            model_weight_decay: opt.model.weight_decay,
            disc_lr: opt.discriminator.learning_rate,
            disc_beta1,
            disc_beta2,
            prior_epochs: opt.epochs,
            epochs: opt.epochs,
            batch_size: opt.batch_size,
            lr_decay_power: opt.lr_decay_power.unwrap_or(0.0),
            augment: opt.augment.is_some(),
            checkpoint_every: opt.checkpoint_every,
            lambda: weights.lambda.to_vec(),
            omega: weights.omega.to_vec(),
            dice_mode: "pooled".into(),
            spacing: vec![1.0, 1.0],
            workers: 1,
        }
    }
}

fn optimizer_name(s: &OptimizerSettings) -> &'static str {
    match s.kind {
        OptimizerKind::Sgd { .. } => "sgd",
        OptimizerKind::Adam { .. } => "adam",
    }
}

/// `(momentum, beta1, beta2)` with defaults for the fields a kind lacks.
fn optimizer_params(s: &OptimizerSettings) -> (f64, f64, f64) {
    match s.kind {
        OptimizerKind::Sgd { momentum } => (momentum, 0.9, 0.999),
        OptimizerKind::Adam { beta1, beta2, .. } => (0.9, beta1, beta2),
    }
}

fn array<const N: usize, T: Copy>(name: &str, v: &[T]) -> Result<[T; N]> {
    v.try_into()
        .map_err(|_| HarnessError::Config(format!("`{name}` needs exactly {N} entries, got {}", v.len())))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| HarnessError::io(path, e))
    }

    /// Checks everything the conversions below would reject.
    pub fn validate(&self) -> Result<()> {
        self.ablation_setting()?;
        self.network_config()?;
        self.bundle_config()?;
        let prior = self.prior_optimizer()?;
        prior.validate()?;
        self.stage2_optimizer()?.validate()?;
        self.loss_weights()?.validate()?;
        self.eval_options()?;
        Ok(())
    }

    pub fn ablation_setting(&self) -> Result<AblationSetting> {
        Ok(AblationSetting::parse(&self.setting)?)
    }

    fn profile(&self, modality_b: bool) -> ModalityProfile {
        let p = |base: &Vec<f64>, gamma, gain, offset, jitter, bias, noise| ModalityProfile {
            base_intensity: base.clone(),
            transfer: Transfer { gamma, gain, offset },
            class_jitter: jitter,
            bias_field_amplitude: bias,
            noise_sigma: noise,
        };
        if modality_b {
            p(&self.b_base_intensity, self.b_gamma, self.b_gain, self.b_offset, self.b_class_jitter, self.b_bias_field, self.b_noise_sigma)
        } else {
            p(&self.a_base_intensity, self.a_gamma, self.a_gain, self.a_offset, self.a_class_jitter, self.a_bias_field, self.a_noise_sigma)
        }
    }

    /// Dataset parameters; the direction decides which profile is the prior.
    pub fn bundle_config(&self) -> Result<BundleConfig> {
        let (a, b) = (self.profile(false), self.profile(true));
        a.validate()?;
        b.validate()?;
        let (profile_prior, profile_target) = match self.direction {
            Direction::AToB => (a, b),
            Direction::BToA => (b, a),
        };
        let layout = Layout::abdominal_sized(self.height, self.width);
        layout.validate()?;
        Ok(BundleConfig {
            n_prior: self.n_prior,
            n_target: self.n_target,
            layout,
            profile_prior,
            profile_target,
            unseen: self.unseen.clone(),
            seed: self.data_seed,
        })
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let discriminator_input = match self.discriminator_input.as_str() {
            "probabilities" => DiscriminatorInput::Probabilities,
            "logits" => DiscriminatorInput::Logits,
            other => return Err(HarnessError::Config(format!("unknown discriminator_input `{other}`"))),
        };
        let c = NetworkConfig {
            height: self.height,
            width: self.width,
            classes: Layout::abdominal_sized(self.height, self.width).classes(),
            backbone_widths: array("backbone_widths", &self.backbone_widths)?,
            head_hidden: self.head_hidden,
            fusion_hidden: self.fusion_hidden,
            discriminator_widths: array("discriminator_widths", &self.discriminator_widths)?,
            discriminator_slope: self.discriminator_slope,
            conv_bias: self.conv_bias,
            discriminator_input,
        };
        c.validate()?;
        Ok(c)
    }

    fn model_settings(&self) -> Result<OptimizerSettings> {
        let mut s = match self.model_optimizer.as_str() {
            "sgd" => OptimizerSettings::sgd(self.model_lr, self.model_momentum, self.model_weight_decay),
            "adam" => OptimizerSettings::adam(self.model_lr, self.model_beta1, self.model_beta2),
            other => return Err(HarnessError::Config(format!("unknown model_optimizer `{other}`"))),
        };
        s.weight_decay = self.model_weight_decay;
        Ok(s)
    }

    fn schedule(&self, epochs: usize) -> Result<OptimizerConfig> {
        Ok(OptimizerConfig {
            model: self.model_settings()?,
            discriminator: OptimizerSettings::adam(self.disc_lr, self.disc_beta1, self.disc_beta2),
            epochs,
            batch_size: self.batch_size,
            lr_decay_power: (self.lr_decay_power > 0.0).then_some(self.lr_decay_power),
            augment: self.augment.then(AugmentConfig::default),
            checkpoint_every: self.checkpoint_every,
        })
    }

    /// Schedule of the fully supervised runs (prior and Oracle).
    pub fn prior_optimizer(&self) -> Result<OptimizerConfig> {
        self.schedule(self.prior_epochs)
    }

    pub fn stage2_optimizer(&self) -> Result<OptimizerConfig> {
        self.schedule(self.epochs)
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        Ok(LossWeights {
            lambda: array("lambda", &self.lambda)?,
            omega: array("omega", &self.omega)?,
        })
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        let dice_mode = match self.dice_mode.as_str() {
            "pooled" => DiceMode::Pooled,
            "per-image" => DiceMode::PerImage,
            other => return Err(HarnessError::Config(format!("unknown dice_mode `{other}`"))),
        };
        let [dy, dx] = array("spacing", &self.spacing)?;
        if !(dy > 0.0 && dx > 0.0) {
            return Err(HarnessError::Config("spacing must be positive".into()));
        }
        Ok(EvalOptions { spacing: (dy, dx), dice_mode })
    }
}

/// Parses a comma-separated class list such as `1,3`; empty input means none.
pub fn parse_class_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| HarnessError::Config(format!("bad class index `{t}`"))))
        .collect()
}
