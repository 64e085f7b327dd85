//! Synthetic benchmark data, configuration, and the study harnesses behind
//! the `timba` command-line tool.

pub mod ablation;
pub mod config;
pub mod downstream;
pub mod experiment;
pub mod manifest;
pub mod mlp;
pub mod sensitivity;
pub mod synthetic;
