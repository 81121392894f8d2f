//! LFormer pan-sharpening: a small tensor library with reverse-mode autodiff,
//! the linearly-evolved attention network, image-quality metrics, synthetic
//! Wald-protocol data and analytic profiling.

pub mod attention;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod profiler;
pub mod tensor;
pub mod train;

pub use autograd::{FlopTally, Tape, Var};
pub use config::RunConfig;
pub use data::Sample;
pub use error::{Error, Result};
pub use model::{ForwardTrace, LFormerConfig, LFormerModel, Variant};
pub use tensor::{DType, Scalar, Tensor};
pub use train::{AdamW, TrainConfig, TrainState};
