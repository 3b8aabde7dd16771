//! Partner-assisted learning for few-shot image classification, on a
//! synthetic embedding-level benchmark.
//!
//! A contrastively trained Partner encoder is frozen and then guides a Main
//! encoder trained with cross-entropy, through feature-level soft anchors
//! and logit-level soft labels. Evaluation classifies novel-class episodes
//! by cosine similarity to support prototypes.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablate;
pub mod autodiff;
pub mod batching;
pub(crate) mod binio;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod numeric;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{PalError, Result};
