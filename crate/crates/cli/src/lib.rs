//! Command line and HTTP front end for the sketch-guided diffusion engine.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod jobs;
pub mod service;
pub mod strokes;

pub use error::CliError;
