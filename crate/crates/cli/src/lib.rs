//! File formats and run orchestration behind the `sae` command.

pub mod config;
pub mod io;
pub mod run;
