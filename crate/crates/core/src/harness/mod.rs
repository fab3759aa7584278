//! Configuration, data loading, training loops and command implementations.

pub mod commands;
pub mod config;
pub mod data;
pub mod oracles;
pub mod train;

pub use config::RunConfig;
