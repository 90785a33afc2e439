//! Desk-scale attack-and-defense laboratory for multimodal fact deletion.
//!
//! The crate trains a tiny projector + decoder transformer on a synthetic
//! multimodal world, deletes individual facts with rank-1 low-rank edits
//! driven by six defense objectives, then tries to recover the deleted
//! answers with whitebox lens attacks, post-edit finetuning, and blackbox
//! rephrase queries. Everything is deterministic given a seed.

pub mod attacks;
pub mod backprop;
pub mod editor;
pub mod error;
pub mod harness;
pub mod lens;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod vocab;
pub mod worldgen;

pub use error::{Error, Result};
pub use model::{Fact, ModelConfig, ModelState, Token};
pub use tensor::{GradientSet, Tensor};
