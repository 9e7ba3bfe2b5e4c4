//! LayerNorm and RMSNorm with the approximations used by a normalization
//! accelerator: subsampled statistics, one-pass variance, a magic-constant
//! inverse square root with fixed-point Newton refinement, and ISD
//! prediction across layers whose log-ISD falls on a line. [`sim`] models
//! the hardware cycle by cycle on top of the same arithmetic.

pub mod calibrate;
pub mod datapath;
pub mod error;
pub mod exec;
pub mod invsqrt;
pub mod norm;
pub mod numerics;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
