//! Context-aware multi-head factorized attentive pooling.
//!
//! A frame-level feature stack is collapsed into a fixed-size speaker
//! embedding by grouped attention heads whose scores pool a sliding window
//! of context frames. The crate covers the whole desk-scale pipeline:
//! [`tensor`] is an f64 autodiff core with a finite-difference oracle,
//! [`pooling`] the embedding extractor, [`loss`] the margin softmax
//! objectives, [`synth`] a deterministic synthetic-speaker corpus,
//! [`train`] an AdamW loop over the full graph, and [`eval`] cosine
//! scoring, adaptive score normalization and equal-error-rate computation.
//! [`config`] parses the key=value run files shared by the [`cli`]
//! subcommands.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod loss;
pub mod pooling;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
