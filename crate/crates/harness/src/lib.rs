//! Toy datasets, distribution metrics and the experiment commands behind `affiner-cli`.

pub mod commands;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod output;
