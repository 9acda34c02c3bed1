//! Speaker-adaptive multimodal emotion recognition at desk scale.
//!
//! The stack: a minimal autodiff tensor core, FiLM input calibration and
//! identity-gated fusion conditioned on speaker embeddings, joint
//! emotion/speaker training, a synthetic speaker-heterogeneous benchmark
//! with a Bayes oracle, and the ablation / lambda-sweep experiment
//! protocol around it.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Ablation, ModelConfig, ModelParameters};
pub use tensor::Tensor;
