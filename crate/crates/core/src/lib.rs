//! Probing and regularizing source-target attention of a joint
//! CTC/attention sequence model with its own CTC classifier.
//!
//! The crate carries a small reverse-mode autodiff engine ([`graph`]), a
//! transformer encoder-decoder ([`model`]), CTC loss ([`ctc`]), the
//! attention probe ([`probe`]) and the CTC-guided regularizer
//! ([`regularizer`]), plus a training harness and CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod io;
pub mod model;
pub mod param;
pub mod probe;
pub mod regularizer;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
