//! Battery state-of-health analytics built around the PACE forecaster.

pub mod dataset;
pub mod ecm;
pub mod error;
pub mod fmt;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod stream;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorKind, Result};
