//! Keyword spotting with a multi-layer attention recurrent network.
//!
//! The crate covers the whole path from WAV files to per-keyword accuracy
//! reports:
//!
//! - [`audio_io`]: WAV decoding, dataset indexing, stratified splits, synthetic tones
//! - [`dsp`]: MFCC / log-mel front end
//! - [`autodiff`]: reverse-mode differentiation over dense tensors
//! - [`layers`]: convolution, pooling, batch norm, dropout, dense, LSTM, attention
//! - [`models`]: CNN, CNN+BiLSTM, attention RNN and multi-layer attention networks
//! - [`training`]: cross-entropy, Adam, learning-rate decay, early stopping, checkpoints
//! - [`eval`]: confusion matrices and per-keyword reports
//! - [`cli`]: the `kws` command-line tool
//!
//! Data-parallel loops (batch featurization, evaluation, convolution and
//! large matrix products, finite-difference sweeps) run on rayon when the
//! default `parallel` feature is on and sequentially otherwise, with
//! identical results.

pub mod audio_io;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod layers;
pub mod models;
pub mod par;
pub mod training;

pub use error::{KwsError, Result};
