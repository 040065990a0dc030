//! Merge-architecture image captioning.
//!
//! A 1D convolutional language encoder (embedding, convolution, global max
//! pooling) is fused by concatenation with a precomputed image feature
//! vector, passed through a ReLU dense layer and a softmax over the
//! vocabulary. Captions are produced greedily or by beam search and scored
//! with corpus BLEU, ROUGE-L and CIDEr.

pub mod cli;
pub mod data_io;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use par::Exec;
