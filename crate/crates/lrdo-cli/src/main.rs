// SPDX-License-Identifier: Apache-2.0

//! `lrdo`: closed-form predictions, Monte-Carlo simulations and sweeps for
//! minimum-norm denoisers trained on noisy low-rank data.
//!
//! Exit codes: 0 success, 1 i/o failure, 2 invalid configuration or usage,
//! 3 parameters outside a formula's domain, 4 numerical failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lrdo_core::ErrorClass;

use crate::config::{Format, Overrides, RunConfig};
use crate::output::Envelope;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] lrdo_core::Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 1,
            CliError::Core(e) => match e.class() {
                ErrorClass::Input => 2,
                ErrorClass::Domain => 3,
                ErrorClass::Numerical => 4,
                ErrorClass::Io => 1,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Closed-form risk for one instance (main theorem, W*, transfer).
    Predict,
    /// Monte-Carlo risk for one instance next to the prediction.
    Simulate,
    /// Theory and simulation over a grid of training-set sizes.
    Sweep,
    /// Monte-Carlo check of the random-matrix lemma constants.
    RmtCheck,
    /// Marchenko-Pastur support, mass and resolvent moments.
    Mp,
    /// Risk-minimizing training noise over a grid of training-set sizes.
    OptNoise,
    /// Clustered data: squared error and accuracy over training-set sizes.
    Classify,
    /// Training on repeated copies of the data with fresh noise.
    Augment,
    /// Reads a data matrix and reports its principal-component fragment.
    Ingest,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Predict => "predict",
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
            Command::RmtCheck => "rmt-check",
            Command::Mp => "mp",
            Command::OptNoise => "opt-noise",
            Command::Classify => "classify",
            Command::Augment => "augment",
            Command::Ingest => "ingest",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "lrdo", version, about = "Test-error predictions for minimum-norm denoisers on low-rank data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,
    /// Master seed of the Monte-Carlo trials.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Worker threads: a positive integer or `auto`. Overrides LRDO_THREADS.
    #[arg(long, global = true, env = "LRDO_THREADS")]
    threads: Option<String>,
}

fn thread_count(spec: Option<&str>) -> Result<usize, CliError> {
    match spec.map(str::trim) {
        None | Some("auto") => Ok(0),
        Some(s) => match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("--threads expects a positive integer or `auto`, got `{s}`"))),
        },
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let threads = thread_count(cli.threads.as_deref())?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        trials: cli.trials,
        format: cli.format.map(|f| match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }),
        out: cli.out.clone(),
    });
    let outcome = commands::run(cli.command, &cfg)?;
    let text = match cfg.format() {
        Format::Json => Envelope::new(cli.command.name(), &cfg, outcome.warnings, outcome.payload).to_json(),
        Format::Csv => {
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            outcome.table.to_csv()
        }
    };
    output::emit(&text, cfg.output.path.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_specs() {
        assert_eq!(thread_count(None).unwrap(), 0);
        assert_eq!(thread_count(Some("auto")).unwrap(), 0);
        assert_eq!(thread_count(Some("4")).unwrap(), 4);
        assert!(thread_count(Some("0")).is_err());
        assert!(thread_count(Some("many")).is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(lrdo_core::Error::AtPeak(1.0)).exit_code(), 3);
        assert_eq!(CliError::Core(lrdo_core::Error::ConvergenceFailure).exit_code(), 4);
        assert_eq!(CliError::Io("x".into()).exit_code(), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
