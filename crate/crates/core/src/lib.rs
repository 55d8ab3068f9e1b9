//! Federated learning with fixed Top-K parameter compression, differential
//! privacy accounting and masked secure aggregation.

pub mod cli;
pub mod compression;
pub mod data;
pub mod error;
pub mod federation;
pub mod nn;
pub mod privacy;
pub mod secure_agg;
pub mod seed;

pub use error::{Error, Result};
