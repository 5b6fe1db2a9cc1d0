//! Command-line surface of the synthloop simulator.
//!
//! [`run`] parses arguments, resolves the configuration, executes the
//! subcommand and writes `curves.csv`, `manifest.json` and `summary.txt`.

pub mod commands;
pub mod config;
pub mod csvdata;
pub mod error;
pub mod output;

use std::ffi::OsString;

use clap::Parser;

pub use config::{Cli, CommandKind, Flags, RunConfig};
pub use error::{CliError, CliResult};
pub use output::{CurveRow, RunOutput};

/// Resolves, executes and writes one run.
pub fn run_config(cfg: &RunConfig) -> CliResult<RunOutput> {
    let out = commands::execute(cfg)?;
    out.emit(&cfg.output_dir)?;
    Ok(out)
}

/// Full command-line entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = RunConfig::resolve(cli.command.kind(), cli.command.flags()).and_then(|cfg| run_config(&cfg));
    match result {
        Ok(out) => {
            print!("{}", out.summary);
            0
        }
        Err(e) => {
            eprintln!("synthloop: {e}");
            e.exit_code()
        }
    }
}
