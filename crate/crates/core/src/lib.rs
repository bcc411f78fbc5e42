//! Domain-aware hybrid fusion for heterogeneous collaborative 3D perception.
//!
//! Auxiliary agents are scored by how well the ego's decoder reads their
//! features ([`domain`]). Compatible agents join feature-level fusion, the rest
//! are fused at the box level after their poses are corrected against the
//! fused boxes ([`pgo`], [`fusion`]). [`sim`] stands in for sensors, encoders
//! and the feature-fusion network; [`eval`] and [`runner`] produce reports.

pub mod assignment;
pub mod cli;
pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod pgo;
pub mod runner;
pub mod sim;

pub use error::{HydraError, Result};
