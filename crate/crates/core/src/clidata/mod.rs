//! File formats, dataset directories and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod matrix;

pub use checkpoint::{load_model, load_params, save_model, save_params};
pub use matrix::{read_matrix, write_matrix};
