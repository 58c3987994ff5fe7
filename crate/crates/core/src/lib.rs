//! Parameter-efficient fine-tuning in weight space (full fine-tuning,
//! linear probe, LoRA) and feature space (LoRFA, VeFA, learned input
//! shift), on a small reverse-mode autodiff core, with robustness metrics
//! and synthetic lurking-variable datasets.

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod datasets;
pub mod eem;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
