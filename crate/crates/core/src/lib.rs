//! Adaptive scan-line subsampling for sequential polar-domain frames.
//!
//! A Sylvester-flow posterior encoder infers a latent state from a partial
//! observation; the posterior is pushed through a frozen decoder to predict
//! the next frame, and an information-gain policy picks which scan-lines to
//! acquire next.

pub mod error;
pub mod harness;
pub mod masks;
pub mod model;
pub mod polar_grid;
pub mod policy;
pub mod training;

pub use error::{Error, Result};
