//! Chunk-aware cross-modal encoding, attention-based relation inference and
//! lexically constrained explanation generation, trainable from scratch at
//! desk scale.

pub mod error;
pub mod numerics;
pub mod parallel;

pub mod chunker;
pub mod config;
pub mod text;

pub mod csi;
pub mod decoding;
pub mod encoder;
pub mod inferrer;
mod layers;
pub mod lecg;
pub mod model;

pub mod bleu;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod eval;
pub mod train;

pub use error::{CalecError, Result};
