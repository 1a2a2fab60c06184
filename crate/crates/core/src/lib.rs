//! Contrastive-learning laboratory for L2,1-sparse projection heads.
//!
//! The crate bundles a small reverse-mode autodiff engine, MLP encoders with
//! identity/linear/nonlinear projection heads, the InfoNCE objective with a
//! column-wise L2,1 head regularizer, Adam with an optional block
//! soft-threshold step, synthetic worlds with known ground-truth latents, and
//! spectral/identifiability diagnostics.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Tape arithmetic is fallible, so it cannot implement the operator traits.
#![allow(clippy::should_implement_trait)]

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod models;
pub mod objectives;
pub mod optimizer;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
