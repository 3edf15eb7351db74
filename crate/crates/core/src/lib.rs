//! Adapter-based unsupervised domain adaptation on a from-scratch
//! transformer encoder.
//!
//! A small post-norm encoder is initialized from a seeded distribution and
//! kept frozen, while residual bottleneck adapters and task/MLM heads are
//! trained in two steps: masked-language-model training on a shuffled mix of
//! source and target corpora, then classification fine-tuning on labeled
//! source data only. Full-parameter and single-step arms are provided for
//! comparison, together with vocabulary-overlap domain similarity, Welch
//! t-tests, hidden-state export, and adapter-only checkpoints.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod persistence;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
