//! Command-line tool and HTTP service for mask-guided bokeh rendering.

pub mod cli;
pub mod error;
pub mod service;

pub use error::CliError;
