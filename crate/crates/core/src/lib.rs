//! Desk-scale multi-modal remote-sensing pretraining: synthetic data,
//! factorized spatio-temporal encoders, multi-granularity contrastive
//! learning, geo-context prototypes and downstream probes.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod downstream;
pub mod encoder;
mod error;
pub mod exec;
pub mod fusion;
pub mod geo;
pub mod metrics;
pub mod nn;
pub mod pretrain;
pub mod synth;

pub use error::{Error, Result};
