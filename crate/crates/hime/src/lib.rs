//! File formats, configuration and pipeline stages around `hime-core`.
//!
//! Concurrent invocations writing the same output paths are unsupported.

pub mod config;
pub mod container;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod traces;
pub mod weights;

pub use error::{CliError, FormatError};
