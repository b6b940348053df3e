//! Cross-modal zero-shot segmentation core.
//!
//! A prior segmentation model is trained on a fully labeled modality, frozen,
//! and then used to guide a zero-shot model that only sees a subset of the
//! classes annotated in a second modality. Everything here is pure
//! computation over `alloc` containers: phantom generation, the small
//! convolutional networks with hand-written backward passes, the loss
//! functions, optimizers, the two-stage training procedure and the
//! evaluation metrics. File formats, configuration and the CLI live in the
//! `inheritseg` crate.

#![no_std]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod datagen;
mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::{derive_seed, SeededRng};
pub use tensor::Tensor3;
