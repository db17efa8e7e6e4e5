//! Concept erasure for a toy conditional diffusion model.
//!
//! A small fully-connected denoiser over labelled 2-D points is trained
//! with condition dropout, a rank-1 LoRA adapter is trained to repel one
//! concept toward a mapping concept, and at inference the base and adapted
//! guided predictions are blended with a weight chosen per prompt from the
//! divergence between the two models on partially denoised latents.

pub mod autodiff;
pub mod base_train;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod plot;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod unguidance;
pub mod unlearn;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
