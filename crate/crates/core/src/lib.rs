//! Conformer-Kernel ranking with query term independence: a small tensor
//! and autodiff engine, the encoder and scorer, pairwise training, an impact
//! index with top-k retrieval, metrics and a memory benchmark.

#![allow(clippy::needless_range_loop)]

pub mod api;
pub mod bench;
pub(crate) mod binio;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod index;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod probe;
pub mod scorer;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;
pub mod trec;

pub use config::{AttentionConfig, Config};
pub use error::{Error, Result};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
