//! Rectified-flow multimodal transformer stack at configurable scale.
//!
//! The crate covers the objective math, a double-/single-stream transformer
//! with 3-axis rotary embeddings, the Euler sampling pipeline with stub
//! encoders and decoder, and a toy 2D trainer with hand-written gradients.

pub mod blocks;
pub mod cli;
pub mod embeddings;
pub mod error;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod rf_math;
pub mod rng;
pub mod tensor;
pub mod toy_train;
pub mod transformer;
pub mod weights;

pub use error::{FluxError, Result};
pub use tensor::Tensor;
