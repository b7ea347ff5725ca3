//! Rotation-invariant, globally-aware point cloud registration.
//!
//! The pipeline describes two partially overlapping clouds with
//! rotation-invariant point pair features, exchanges global context through
//! attention, matches coarse node descriptors, refines them to point
//! correspondences with an optimal-transport step, and estimates the rigid
//! motion robustly. All floating point work is `f64` and every stage is
//! deterministic given its seed.

pub mod attention;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod geom;
pub mod losses;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod ppf;
pub mod solver;
pub mod train;

pub use error::{Error, Result};
