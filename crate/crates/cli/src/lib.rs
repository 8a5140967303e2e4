//! The `cofm` command line: run configuration, subcommands and the
//! invariant suites behind `selftest` and the acceptance target.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod workflow;

pub use commands::run;
