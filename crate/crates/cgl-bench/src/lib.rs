//! Benchmark harness around `cgl-core`: dataset files, a result store,
//! campaign orchestration, and analysis/report emission.

pub mod config;
pub mod formats;
pub mod orchestrate;
pub mod report;
pub mod store;
