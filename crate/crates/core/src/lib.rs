//! Algorithmic core for preference-driven personalization of multiband
//! hearing-aid compression.
//!
//! Everything here is pure computation over in-memory buffers: the compressor,
//! log-Mel features, the pairwise reward predictor, the deep Q-learning agent,
//! the listening environment, simulated listeners and the fitting protocol
//! state machine. File formats, the CLI and the HTTP preference service live in
//! the companion `prefcomp` crate.
#![cfg_attr(all(not(feature = "std"), not(test)), no_std)]

extern crate alloc;

pub mod action;
pub mod agent;
pub mod audio;
pub mod drc;
pub mod env;
mod error;
pub mod features;
pub mod fft;
pub mod fixtures;
pub mod nn;
pub mod protocol;
pub mod reward;
pub mod sim_user;
pub mod stats;

pub use error::{Error, Result};

/// Seeded generator used for every stochastic decision in a run.
pub type RunRng = rand_chacha::ChaCha8Rng;
