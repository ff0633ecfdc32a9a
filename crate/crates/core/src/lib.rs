//! Multi-behavior sequential recommender core.
//!
//! Encodes behavior-aware item sequences with a multi-scale low-rank
//! Transformer, models long-range multi-behavior item dependencies with
//! per-user hypergraph convolution, fuses the two views attentively, and
//! trains with a masked-item objective evaluated by leave-one-out ranking.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod hypergraph;
pub mod inspect;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};
