//! Command-line front end: configuration, datasets and result export.

pub mod commands;
pub mod config;
pub mod data;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot read {}: {reason}", path.display())]
    Missing { path: PathBuf, reason: String },
    #[error("{}:{line}: {reason}", path.display())]
    Malformed { path: PathBuf, line: u64, reason: String },
    #[error("cannot write {}: {reason}", path.display())]
    Io { path: PathBuf, reason: String },
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Pretty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum TableMode {
    #[default]
    CoreAssisted,
    Direct,
}

#[derive(Debug, Parser)]
#[command(name = "encor", version, about = "Edge-terminated cellular core experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for CSV output; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Control messages per handover; exits 3 if a count is off.
    Table {
        #[arg(long, value_enum, default_value_t)]
        mode: TableMode,
    },
    /// Handover completion time against offered handover rate.
    Load,
    /// Control messages against anchor density on a grid.
    Mec {
        /// Grid size as WIDTHxHEIGHT.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Population coverage of core placements and site costs.
    Place {
        /// Generate the dataset from the seed instead of reading files.
        #[arg(long)]
        synthetic: bool,
    },
    /// Application metrics across handovers.
    Apps,
    /// Writes a synthetic county/PoP/CDN dataset.
    Gen {
        #[arg(long)]
        counties: Option<usize>,
        #[arg(long)]
        pops: Option<usize>,
        #[arg(long)]
        cdns: Option<usize>,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
