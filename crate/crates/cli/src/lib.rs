//! Batch command-line front end: `synth`, `train`, `detect`, `eval` and
//! `inspect`. Every command that writes files also writes a run manifest
//! next to them.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

mod commands;
pub mod io;

pub use commands::{LogLine, RunManifest, TrainFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}{}: {message}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Schema {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },
    #[error(transparent)]
    Core(#[from] partswitch::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Schema { .. } => EXIT_SCHEMA,
            CliError::Core(_) => EXIT_RUNTIME,
        }
    }

    /// Wraps a validation failure of an input file's content.
    pub(crate) fn schema(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Schema {
            path: path.to_path_buf(),
            line: None,
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "partswitch", version, about = "Part-switching object detector pipeline")]
pub struct Cli {
    /// Worker threads for per-image parallelism (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Generator settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model from annotations and hypotheses.
    Train {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        hypotheses: PathBuf,
        /// Training settings (JSON), including `node_names` in hypothesis
        /// index order; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a trained model on hypothesis files.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        score_threshold: Option<f64>,
        /// Raw detections kept per image before part-based suppression.
        #[arg(long, default_value_t = partswitch::inference::DEFAULT_MAX_RAW_DETECTIONS)]
        max_detections: usize,
    },
    /// Score detections against annotations.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluation settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model whose node names define the parts; taken from the
        /// annotations when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Print a readable dump of a model (.json) or detection (.jsonl) file.
    Inspect { file: PathBuf },
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit status. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(&cli, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("partswitch: error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} threads: {e}", cli.threads)))?;
    let mut buf = Vec::new();
    pool.install(|| commands::dispatch(&cli.command, &mut buf))?;
    out.write_all(&buf).map_err(|e| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}
