//! The `spcl` command line: exact solving, PCL training, evaluation and invariant suites.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 suite or assertion failure, 3 divergence.

pub mod args;
pub mod config;
pub mod eval;
pub mod solve;
pub mod suites;
pub mod train;

use std::ffi::OsString;
use std::io::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;

use crate::args::{Cli, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    /// A suite or an assertion failed.
    #[error("{0}")]
    Failure(String),

    #[error("{0}")]
    Divergence(String),

    #[error(transparent)]
    Core(#[from] spcl_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use spcl_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io(_) => 1,
            CliError::Failure(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Core(e) => match e {
                E::Divergence(_) => 3,
                E::Violation(_) | E::Witness(_) | E::NonConvergence { .. } => 2,
                _ => 1,
            },
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match config::expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Solve(a) => solve::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Check(a) => suites::run(&a),
    }
}

/// Append-only `run.log`; the only place timestamps are written.
pub(crate) struct RunLog {
    file: std::fs::File,
}

impl RunLog {
    pub(crate) fn open(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let file = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("run.log"))?;
        Ok(Self { file })
    }

    pub(crate) fn line(&mut self, msg: &str) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let _ = writeln!(self.file, "{ts:.3} {msg}");
    }
}
