//! The `tacit` pipeline: corpus generation, training, tracing, editing and
//! auditing driven by one JSON configuration.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

pub use commands::{cmd_all, cmd_audit, cmd_edit, cmd_gen, cmd_trace, cmd_train, Outputs};
pub use config::{RunConfig, Seeds};

#[derive(Debug)]
pub enum CliError {
    /// Bad input: configuration, arguments or missing artifacts. Exit code 1.
    Precondition(String),
    /// Anything else. Exit code 2.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Precondition(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Precondition(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<tacit_core::Error> for CliError {
    fn from(e: tacit_core::Error) -> Self {
        use tacit_core::Error as E;
        match e {
            E::InvalidConfig(_)
            | E::UnknownToken(_)
            | E::Corpus(_)
            | E::SubjectNotFound { .. }
            | E::CheckpointVersion { .. }
            | E::CorruptCheckpoint(_)
            | E::Json(_) => CliError::Precondition(e.to_string()),
            E::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::Precondition(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tacit",
    version,
    about = "Causal tracing, rank-one editing and systematicity audits on a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `master_seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path override such as `train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write corpus.jsonl and vocab.json.
    Gen(Common),
    /// Train and write model.ckpt and train.csv.
    Train(Common),
    /// Trace facts and write CSV grids and SVG heatmaps under traces/.
    Trace {
        #[command(flatten)]
        common: Common,
        /// Subject to trace; repeatable. All facts when absent.
        #[arg(long)]
        fact: Vec<String>,
    },
    /// Apply rank-one edits and write edited checkpoints under edits/.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "new_object")]
        fact: Option<String>,
        #[arg(long, requires = "fact")]
        new_object: Option<String>,
    },
    /// Score the trained model and the lookup baseline; write audit.json.
    Audit(Common),
    /// Run every stage in order.
    All(Common),
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?.with_overrides(&common.sets)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn dispatch(command: &Command, outs: &mut Outputs) -> Result<(), CliError> {
    match command {
        Command::Gen(c) => cmd_gen(&resolve(c)?, outs),
        Command::Train(c) => cmd_train(&resolve(c)?, outs),
        Command::Trace { common, fact } => cmd_trace(&resolve(common)?, fact, outs),
        Command::Edit {
            common,
            fact,
            new_object,
        } => cmd_edit(
            &resolve(common)?,
            fact.as_deref(),
            new_object.as_deref(),
            outs,
        ),
        Command::Audit(c) => cmd_audit(&resolve(c)?, outs),
        Command::All(c) => cmd_all(&resolve(c)?, outs),
    }
}

/// Parses arguments, runs one command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut outs = Outputs::default();
    match dispatch(&cli.command, &mut outs) {
        Ok(()) => 0,
        Err(e) => {
            outs.rollback();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
