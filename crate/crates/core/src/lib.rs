//! Cluster-prediction dense heads for segmentation, depth and surface normals.
//!
//! A pixel encoder-decoder produces per-pixel embeddings `F`, a small
//! transformer decoder refines `K` learned queries into cluster centers `Q`,
//! and every task reads its output from the same probability map
//! `softmax_K(F · Qᵀ)`: class identities for segmentation, adaptive bin
//! centers for depth, unit sphere-segment centers for normals.

pub mod backbone;
pub mod cli;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod persist;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
