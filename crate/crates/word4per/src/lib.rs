//! Word4Per on disk: manifests, feature caches, checkpoints, run directories,
//! the `word4per` command line and the `/api/v1` HTTP service.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod imageio;
pub mod manifest;
pub mod rundir;
pub mod service;

pub use config::Config;
pub use error::{AppError, Result};
