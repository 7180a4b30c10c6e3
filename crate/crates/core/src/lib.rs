//! Chaotic-system discovery, a patched-attention forecaster, and the
//! numerical tooling around them.

pub mod error;
pub mod rng;
pub mod stats;

pub mod integrate;
pub mod systems;
pub mod trajectory;

pub mod chaos;
pub mod dataset;

pub mod model;
pub mod train;

pub mod eval;
pub mod interpret;
pub mod ks;

pub mod cli;

pub use error::{Error, Result};
