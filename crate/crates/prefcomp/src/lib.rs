//! Files, run orchestration, the preference service and the command line for
//! `prefcomp-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus;
mod error;
pub mod export;
pub mod feature_cache;
pub mod orchestrator;
pub mod runlog;
pub mod service;
pub mod wav;

pub use error::{Error, Result};
