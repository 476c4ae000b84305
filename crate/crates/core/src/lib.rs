//! Hierarchical planning over generated checkpoints in lava mazes, with
//! tabular estimators and a dynamic-programming oracle to check them against.

pub mod checkpoints;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod gridworld;
pub mod harness;
pub mod oracle;
pub mod planner;
pub mod policy;
pub mod replay;

pub use error::{Error, Result};
