//! Adaptive action-chunking actor-critic on a small continuous maze, with an
//! exact tabular lab for the prefix backup operator.

pub mod analysis;
pub mod critic;
pub mod envs;
pub mod error;
pub mod extraction;
pub mod flow;
pub mod io;
pub mod ndgrad;
pub mod operator_lab;
pub mod scaling;
pub mod train;

pub use error::{Error, Result};
