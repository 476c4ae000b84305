//! Experiment driver: configuration, training, evaluation, metrics export and
//! the composite-value bound sweep.

pub mod agent;
pub mod bound;
pub mod config;
pub mod metrics;
pub mod run;
