//! Class-incremental learning with Gaussian class memories, optimal-transport
//! calibration across encoder updates, and soft-prompt prototype classifiers.
//!
//! The vision encoder is a trainable linear map and the text encoder a
//! frozen orthogonal projector, so every gradient in the crate is analytic
//! and every stage of the pipeline runs at desk scale.

pub mod checks;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gaussian;
pub mod optim;
pub mod persist;
pub mod pipeline;
pub mod prompt;
pub mod random;
pub mod report;
pub mod spd;
pub mod stream;
pub mod transport;

pub use error::{Error, Result};
pub use gaussian::{FeatureBatch, GaussianStat};
pub use transport::TransportMap;
