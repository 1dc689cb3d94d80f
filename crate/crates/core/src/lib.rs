//! Multi-task dense prediction with task-specific deep prompts.
//!
//! A vision transformer encoder whose later layers receive per-task learnable
//! prompt tokens, a multi-scale feature fusion stage, a small multi-head
//! up-sampling decoder and the usual dense-prediction losses and metrics,
//! all on a from-scratch reverse-mode autodiff core.

pub mod analysis;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod fusion;
pub mod init;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod params;
pub mod rng;
pub mod task;
pub mod training;

pub use error::{Error, Result};
