//! Benchmark harness, persistence, configuration and command-line surface.

pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod metrics;
pub mod harness;
pub mod report;
pub mod diagnostics;
pub mod selftest;
pub mod cli;
