//! Configuration, artifact layout and stage implementations behind the
//! `ctraj` command.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod stages;

pub use config::{Overrides, RunConfig};
pub use error::CliError;
pub use pipeline::{Outcome, Pipeline, Stage};
