//! Minimal dense networks with manual backpropagation and Adam.

mod adam;
mod mlp;

pub use adam::{Adam, AdamParams};
pub use mlp::{Activation, Dense, ForwardCache, Mlp};
