//! Depth-scalable octree point cloud compression with a learned depth-level
//! predictor for machine consumers.
//!
//! The codec splits its output into one segment per octree level, so any
//! prefix of the stream decodes to a coarser octree. A small permutation
//! invariant network picks, per cloud, the shallowest prefix that still
//! serves a downstream task; the full stream remains available for viewing.

pub mod codec;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod metrics;
pub mod nn;
pub mod octree;
pub mod pointcloud;
pub mod predictor;
pub mod tasks;

pub use error::{Error, Result};
