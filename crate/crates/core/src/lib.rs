//! Dual-stream tokenized video codec.

pub mod bitstream;
pub mod ccm;
pub mod clip;
pub mod config;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod fsq;
pub mod fusion;
pub mod likelihood;
pub mod masking;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod synth;
pub mod tokenizer;
pub mod training;
pub mod wavelet;

pub use error::{CodecError, Result};
