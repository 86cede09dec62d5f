//! Causality-inspired representation consistency for unsupervised video
//! anomaly detection.
//!
//! A memory pool records prototypes of normal features; a decomposer splits
//! each clip's features into shared and private parts; a characterizer maps
//! both to causal representations whose cross-batch correlation matrices are
//! driven towards identity. Test frames are scored by how far that
//! consistency breaks down, times the distance to learned cluster centers.

pub mod characterizer;
pub mod clustering;
pub mod data;
pub mod decomposer;
pub mod error;
pub mod init;
pub mod layers;
pub mod memory;
pub mod numerics;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
