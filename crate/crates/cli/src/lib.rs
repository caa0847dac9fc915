//! Command-line harness for the flowinv experiments: configuration resolution,
//! run directories and the subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use commands::{execute, Command, Invocation, RunSummary};
pub use error::CliError;
