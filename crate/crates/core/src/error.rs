use alloc::string::String;

/// Errors raised by the core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("layout infeasible: structure `{0}` could not be placed after 100 attempts")]
    Infeasible(String),
    #[error("constant image has zero standard deviation")]
    ZeroVariance,
    #[error("value outside the open interval (0, 1) passed to {0}")]
    OutOfRange(&'static str),
    #[error("no seen classes: at least one structure must stay annotated")]
    NoSeenClasses,
    #[error("loss `{name}` is not finite at step {step}")]
    NonFinite { name: &'static str, step: u64 },
    #[error("empty evaluation split")]
    EmptySplit,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl core::fmt::Debug, got: impl core::fmt::Debug) -> Error {
    Error::Shape {
        op,
        expected: alloc::format!("{expected:?}"),
        got: alloc::format!("{got:?}"),
    }
}
