//! Machine-comprehension knowledge transfer for attentional
//! sequence-to-sequence models.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape (f32 training, f64 checks)
//! - [`layers`]: LSTM, embeddings, character CNN, linear maps
//! - [`mc`]: the span-extraction comprehension model with bidirectional attention
//! - [`seq2seq`]: the attentional encoder-decoder with optional transplanted layers
//! - [`transfer`]: checkpoints, transfer bundles, adapters and freeze policy
//! - [`data`], [`metrics`], [`cli`]: synthetic tasks, scoring, command line

pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod mc;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod seq2seq;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
