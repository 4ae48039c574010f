//! Spatio-temporal divided attention (STDA) Swin encoder for 4D fMRI volumes.
//!
//! The crate covers the full desk-scale pipeline: NIfTI-1 ingestion and
//! synthetic data ([`volume`]), fMRI augmentations ([`augment`]), the Swin
//! mechanics ([`patching`], [`attention`]), the encoder with projector and
//! classification head ([`encoder`]), contrastive pretraining and fine-tuning
//! ([`train`]) and an analytic attention cost model ([`cost`]).

// `!(x > 0.0)` is the NaN-rejecting form; index loops walk several arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod augment;
pub mod config;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod patching;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Tensor, Var};

#[cfg(test)]
pub(crate) mod testutil;
