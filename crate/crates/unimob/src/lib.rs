//! IO, file formats, and the benchmark/sweep harness around `unimob-core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod csvio;
pub mod error;
pub mod manifest;
pub mod svg;
pub mod sweep;
