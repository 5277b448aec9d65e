//! Sparse relational transition models.
//!
//! A model is a set of rules. Each rule selects the objects relevant to an
//! action through a list of deictic references, then predicts their next
//! properties with a Gaussian regressor. Objects no rule touches keep their
//! properties up to a default noise level.

pub mod baseline;
pub mod dataset;
pub mod density;
pub mod em;
pub mod error;
pub mod harness;
pub mod kmeans;
pub mod modelfile;
pub mod nn;
pub mod predictor;
pub mod relational;
pub mod rule;
pub mod seed;
pub mod sim;

pub use error::{Result, SpareError};
