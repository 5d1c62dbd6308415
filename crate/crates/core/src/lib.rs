//! Operators for multi-scale weighted feature fusion, energy-based (SimAM) and
//! shuffle attention on NCHW feature maps, plus the detection metrics used to
//! score a detector built from them.
//!
//! Every operator is deterministic: reductions run in 64-bit with a fixed
//! sequential order, and any parallelism splits work across independent
//! planes only.

pub mod bifpn;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod metrics;
pub mod rng;
pub mod shuffle_attention;
pub mod simam;
pub mod suites;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Dims, Element, Tensor, Tensor64};
