//! Experiment runner for Stackelberg-Nash control of clamped fourth-order parabolic equations.

pub mod config;
pub mod output;
pub mod runner;

pub use config::{ConfigError, RunConfig};
pub use runner::{run, Command, Manifest, RunError};
