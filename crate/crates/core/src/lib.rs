//! Self-supervised point-cloud representation learning by point
//! discrimination.
//!
//! A set-abstraction encoder produces per-layer centroid features; an
//! adaptation MLP maps each layer into a shared unit-norm space; a consistency
//! network scores (feature, point) pairs, and a temperature-scaled
//! cross-entropy teaches it to rank points from a feature's local region above
//! noise-perturbed points.

pub mod ablate;
pub mod blocks;
pub mod cli;
mod codec;
pub mod config;
pub mod consistency;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod loss;
pub mod train;

pub use error::{Error, Result};
