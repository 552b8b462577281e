//! Multi-stage pre-training for a compact cross-modality encoder.
//!
//! Text is presented at three granularities (tokens, noun phrases, full
//! sentences) and each stage trains the encoder on the proxy tasks suited to
//! that granularity. The crate covers corpus handling, input corruptions,
//! the encoder with its heads, losses, the stage scheduler and downstream
//! fine-tuning and evaluation.

pub mod ablation;
pub mod autograd;
pub mod corpus;
pub mod curriculum;
pub mod error;
pub mod finetune;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod transforms;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;
