//! Funnel-style sequence compression in a small Gemma2-like transformer.
//!
//! The stack can max-pool its hidden states by two at any layer boundary,
//! recover full length with one of six recovery operations, and is paired with
//! an analytical FLOPs model, a wall-clock profiler and synthetic tasks for
//! measuring what the compression costs in accuracy.

pub mod cli;
pub mod cost_model;
pub mod error;
pub mod funnel_ops;
pub mod model;
pub mod numerics;
pub mod tasks;

pub use error::{Error, Result};
