//! Low-precision, coarse-grain-sparse MLP training and a cycle-level model
//! of the matching zero-skipping accelerator.

pub mod bitpack;
pub mod commands;
pub mod config;
pub mod deploy;
pub mod error;
pub mod hwsim;
pub mod metrics;
pub mod mnist;
pub mod modelfile;
pub mod network;
pub mod quant;
pub mod rng;
pub mod sparsity;
pub mod trainer;

pub use error::{Error, Result};
