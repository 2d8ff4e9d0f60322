//! Experiment harness around `sild`: configuration and presets, the training
//! and evaluation pipeline, checkpoints, CSV/JSON artifacts and SVG plots.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod svg;

pub use config::RunConfig;
pub use error::LabError;
