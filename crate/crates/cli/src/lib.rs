//! Scenario files, case-study presets and the command pipelines behind the
//! `ddpc` binary.

pub mod commands;
pub mod config;
pub mod presets;
