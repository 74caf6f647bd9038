//! Next-scale autoregressive monocular depth estimation at desk scale.
//!
//! The pipeline has three learned parts that share one multi-scale residual
//! vector-quantized latent space:
//!
//! * [`tokenizer`] turns images into `K` token maps, coarse to fine, and back.
//! * [`prior`] is a transformer that predicts each token map from the coarser
//!   ones and an RGB condition.
//! * [`upsampler`] is a conv encoder–decoder that predicts the final depth
//!   latent from a partial one.
//!
//! [`sampler`] runs the `K` stages, mixing the two predictors with per-scale
//! guidance weights; [`eval`] scores the result with affine-invariant metrics.

pub mod error;
pub mod tensor;
pub mod nn;
pub mod synth;
pub mod tokenizer;
pub mod prior;
pub mod upsampler;
pub mod sampler;
pub mod eval;
pub mod config;
pub mod recipe;
pub mod io;
pub mod cli;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, Tensor, Var};
