//! Audio-driven mouth inpainting: procedural audio-visual data, a
//! style-modulated generator fed by a masked encoder feature pyramid, a
//! synchrony scorer, generalized adversarial training, few-shot
//! personalization and the evaluation metrics used to check all of it.

pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod gradcheck;
pub mod nn;
pub mod personalization;
pub mod pipeline;
pub mod syncnet;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
