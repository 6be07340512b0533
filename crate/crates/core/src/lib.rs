//! Entropy-based patch pausing for segmentation vision transformers.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pausing;
pub mod training;
pub mod numerics;
pub mod cli;

pub use error::{Error, Result};
