use core::fmt;

use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Rows of the module ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationSetting {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 7] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::F, Self::G];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            "e" => Ok(Self::E),
            "f" => Ok(Self::F),
            "g" => Ok(Self::G),
            other => Err(Error::Invalid(alloc::format!("unknown ablation setting `{other}`"))),
        }
    }

    pub fn letter(self) -> char {
        match self {
            Self::A => 'a',
            Self::B => 'b',
            Self::C => 'c',
            Self::D => 'd',
            Self::E => 'e',
            Self::F => 'f',
            Self::G => 'g',
        }
    }
}

impl fmt::Display for AblationSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Which parts of the framework are active in a stage-2 run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleSwitches {
    /// Feature swapping between the two segmentors.
    pub cma: bool,
    /// Adversarial alignment against the prior's outputs.
    pub rpa: bool,
    /// Guidance-gated feature recalibration.
    pub ia: bool,
    /// Pseudo-background supervision.
    pub background: bool,
    /// Start the zero-shot model from the prior's weights.
    pub warm_start: bool,
}

impl ModuleSwitches {
    pub const FULL: ModuleSwitches = ModuleSwitches {
        cma: true,
        rpa: true,
        ia: true,
        background: true,
        warm_start: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationConfig {
    pub setting: AblationSetting,
    pub switches: ModuleSwitches,
    pub weights: LossWeights,
}

/// Switches and loss weights of one ablation row, derived from `base`
/// by zeroing the weights of disabled terms.
pub fn configure_ablation(setting: AblationSetting, base: &LossWeights) -> AblationConfig {
    use AblationSetting::*;
    let (cma, rpa, ia, background) = match setting {
        A | B => (false, false, false, false),
        C => (false, false, false, true),
        D => (true, true, false, true),
        E => (false, true, true, true),
        F => (true, false, true, true),
        G => (true, true, true, true),
    };
    let mut weights = *base;
    if !cma {
        weights.omega[0] = 0.0;
    }
    if !background {
        weights.omega[2] = 0.0;
    }
    if !rpa {
        weights.omega[3] = 0.0;
    }
    AblationConfig {
        setting,
        switches: ModuleSwitches {
            cma,
            rpa,
            ia,
            background,
            warm_start: setting == A,
        },
        weights,
    }
}
