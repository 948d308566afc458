//! Command-line front end for the `mcncl-core` model: run configuration,
//! the corpus and checkpoint containers, evaluation reports, the gradient
//! check suite and the subcommands built on them.

pub mod bytes;
pub mod checkpoint;
pub mod checks;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod report;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{CliError, FormatError};
