//! Subcommands of the `ssatt` binary: synthetic data, training, evaluation,
//! classification maps, the attention ablation and the gradient check.

pub mod ablation;
pub mod args;
pub mod commands;
pub mod config;
pub mod failure;
pub mod palette;
pub mod pipeline;

use std::ffi::OsString;

use clap::Parser;

use crate::failure::Failure;

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Help and version output exit with 0.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let args = match config::expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Failure::Invalid(e).exit_code();
        }
    };
    let cli = match args::Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
