// SPDX-License-Identifier: Apache-2.0

//! The `bpdg` command line: corpus generation, labelling, training,
//! generation, evaluation and an interactive chat loop.

pub mod args;
pub mod chat;
pub mod commands;
pub mod settings;

use std::ffi::OsString;
use std::fmt;

use bpdg::BpdgError;
use clap::Parser;

pub use args::Cli;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(BpdgError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for CliError {}

impl From<BpdgError> for CliError {
    fn from(e: BpdgError) -> Self {
        Self::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Core(BpdgError::Config(_)) => EXIT_USAGE,
            Self::Core(BpdgError::Numeric(_) | BpdgError::Tensor(_) | BpdgError::Contract(_)) => EXIT_NUMERIC,
            Self::Core(_) => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
