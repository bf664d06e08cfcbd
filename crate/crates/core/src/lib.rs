//! Head-wise control of block-sparse top-p attention in diffusion
//! transformers: temporal mask reuse driven by query/key drift, and
//! error-guided per-head threshold calibration under a global sparsity
//! budget. Everything runs against synthetic denoising traces and a fixed
//! surrogate network so that model-output error is measurable on a desk.

pub mod bitset;
pub mod blocksparse;
pub mod ebc;
pub mod error;
pub mod online;
pub mod spectral;
pub mod stability;
pub mod tmr;
pub mod trace;

pub use bitset::Bitset;
pub use error::{Error, Result};
