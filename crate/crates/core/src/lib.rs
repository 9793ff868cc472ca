//! Core library for training latent dynamical-system models on time series
//! whose set of observed channels changes at every time step.
//!
//! The training rule implemented throughout is selective backpropagation
//! through time: missing inputs are zero-filled, and loss gradients at
//! missing observations are zeroed before backpropagating, so the model is
//! optimized only against the data that was actually measured.
//!
//! Module map:
//! - [`tensorio`]: data containers, observation masks, and on-disk tensors
//! - [`sampling`]: observation-mask generators (random drop, raster phases,
//!   coordinated dropout)
//! - [`lds`]: linear dynamical systems with exact masked BPTT gradients
//! - [`emissions`]: Gaussian / Poisson / zero-inflated-gamma likelihoods
//! - [`seqae`]: sequential variational autoencoder trained with SBTT
//! - [`synth`]: Lorenz-driven synthetic spiking and calcium fluorescence
//! - [`eval`]: ridge decoding, R², pseudo-R², coherence, PSTH correlation

pub mod emissions;
pub mod error;
pub mod eval;
pub mod lds;
pub mod numerics;
pub mod rng;
pub mod sampling;
pub mod seqae;
pub mod synth;
pub mod tensorio;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensorio::TimeSeriesBatch;
