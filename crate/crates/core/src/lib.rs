//! Unsupervised domain adaptation workbench for person re-identification.

pub mod alignednet;
pub mod cyclemap;
pub mod error;
pub mod evalcmc;
pub mod metriclearn;
pub mod pipeline;
pub mod pseudolabel;
pub mod scheduler;
pub mod synthgen;
pub mod train;

pub use error::{ReidError, Result};
