pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod harness;
mod error;
pub mod history;
pub mod plots;
pub mod report;
pub mod tensors;

pub use error::{HarnessError, Result};
