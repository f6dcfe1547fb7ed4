//! Command-line driver for the opendet pipeline: configuration, stage
//! orchestration and report emission.

pub mod app;
pub mod config;
pub mod pipeline;
