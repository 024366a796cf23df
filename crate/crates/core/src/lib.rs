//! Concept unlearning for a toy conditional diffusion model with
//! saliency-masked sparse low-rank adapters and self-distillation.

// NaN must fail the positivity checks, hence `!(x > 0.0)` over `x <= 0.0`
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod adapter;
pub mod cli;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod optim;
pub mod probe;
pub mod saliency;
pub mod substrate;
pub mod unlearn;

pub use error::{FadeError, Result};
