//! Two-stage score learning on synthetic manifold-supported data.
//!
//! Stage 1 fits a conservative-form network at one small noise level so that
//! its induced denoiser collapses onto the nearest-point projection. Stage 2
//! keeps that projection fixed and fits the bounded residual score with a
//! random-feature head in closed form. A time-modulated random-feature head
//! covers the high-noise regime, and a reverse-SDE sampler draws from the
//! assembled score.

// `!(x > 0.0)` is used on purpose so that NaN is rejected with the bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod highnoise;
pub mod manifold;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod oracle;
pub mod par;
pub mod sampler;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng, Vector};
