//! Implicit (linearized) attention for patch-based vision policies.
//!
//! Patches are scored and selected, or compressed, through kernel feature
//! maps so the `L x L` attention matrix is never built. The crate also
//! carries the sub-linear ranking structures that sit on top of those
//! features, head-diversity measures, an orthogonal sorting flow and a
//! small evolution-strategies trainer.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the double-precision instantiation used by the CLI.

pub mod alloc_stats;
pub mod attention;
pub mod diversity;
pub mod error;
pub mod features;
pub mod flow;
pub mod numerics;
pub mod patches;
pub mod policy;
pub mod ranking;
pub mod scalar;

pub use error::{IapError, Result};
pub use numerics::{Matrix, MulCounter, RngStream};
pub use scalar::Real;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
