//! Data generation, configuration, persistence, reports and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod pipeline;
pub mod report;
pub mod svg;
