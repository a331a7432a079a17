use std::process::ExitCode;

use clap::Parser;
use expcli::cli::{dispatch, Cli};

fn main() -> ExitCode {
    dispatch(Cli::parse())
}
