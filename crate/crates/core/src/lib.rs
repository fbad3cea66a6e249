//! Federated transfer learning under federated differential privacy.
//!
//! Every site privatizes each message it sends. The crate provides the
//! private primitives, per-site and federated estimators for a univariate
//! mean and for low- and high-dimensional linear regression, a protocol
//! simulator with a transcript audit, synthetic data generators and a
//! Monte Carlo experiment driver.

pub mod calibration;
pub mod detection;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod highdim;
pub mod lowdim;
pub mod mean;
pub mod mechanisms;
pub mod pipeline;
pub mod rates;
pub mod report;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
