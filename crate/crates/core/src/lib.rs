//! Streaming monaural speech enhancement with an output-delayed subband LSTM.
//!
//! Every STFT frequency bin is treated as an independent sequence: the
//! magnitude of the bin and `N` neighbours on each side is fed to one
//! shared two-layer LSTM, which predicts a compressed complex ideal ratio
//! mask (cIRM) for the frame `tau` steps in the past. The delay lets a
//! forward-only network use `tau` frames of look-ahead while staying
//! strictly online.
//!
//! Crate layout:
//!
//! - [`dsp`]: periodic-Hann STFT/iSTFT, streaming analyzer and synthesizer
//! - [`wav`]: mono WAV reading/writing
//! - [`cirm`]: mask computation, compression and application
//! - [`features`]: subband vectors, normalization, training samples, shards
//! - [`neural`]: LSTM network, BPTT, Adam, trainer, gradient checking
//! - [`model_store`]: binary model files
//! - [`datagen`]: synthetic corpora, SNR mixing, reverberation, manifests
//! - [`metrics`]: SI-SDR, SNR, segmental SNR, corpus evaluation
//! - [`pipeline`]: synthetic corpora to trained and scored models
//! - [`engine`]: frame-by-frame enhancement sessions, file and stream modes
//! - [`selfcheck`]: quick invariant checks used by the CLI

pub mod cirm;
pub mod datagen;
pub mod dsp;
mod error;
pub mod engine;
pub mod features;
pub mod metrics;
pub mod model_store;
pub mod neural;
pub mod pipeline;
pub mod selfcheck;
pub mod wav;

pub use error::{Error, Result};
pub use num_complex::Complex64;
