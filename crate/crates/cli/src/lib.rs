//! Scenario layer on top of `bemshell`: TOML configs, benchmark presets,
//! the time march with streamed outputs, and the file writers.

pub mod config;
pub mod geometry;
pub mod output;
pub mod scenario;

pub use config::ScenarioConfig;
pub use scenario::{presets, RigidSolution, Scenario};
