//! Command-line driver: degrade, train, eval, infer, ablate, plot, synth.

pub mod commands;
pub mod config;
pub mod plot;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AblateArgs, DegradeArgs, EvalArgs, InferArgs, PlotArgs, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config values or missing inputs (exit code 2).
    Usage(String),
    /// Failure while doing the work (exit code 1).
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<dssr::Error> for CliError {
    fn from(e: dssr::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "dssr", version, about = "Blind super-resolution: training, evaluation and ablations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize LR images and kernel files from HR images.
    Degrade(DegradeArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Score a checkpoint on a synthesized test set.
    Eval(EvalArgs),
    /// Super-resolve LR images, one output per recurrent step.
    Infer(InferArgs),
    /// Train and evaluate one run per variant or alpha value.
    Ablate(AblateArgs),
    /// Render curves from training logs and metric reports.
    Plot(PlotArgs),
    /// Write a procedural HR image corpus.
    Synth(SynthArgs),
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Parses `args` (without the program name) and runs the command in-process.
pub fn run_args<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("dssr")).chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli.command)
}

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Degrade(a) => commands::degrade(a),
        Command::Train(a) => commands::train(a).map(|_| ()),
        Command::Eval(a) => commands::eval(a).map(|_| ()),
        Command::Infer(a) => commands::infer(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Plot(a) => commands::plot(a),
        Command::Synth(a) => commands::synth(a),
    }
}

/// Default names inside a training output directory.
pub fn checkpoint_path(out: &std::path::Path) -> PathBuf {
    out.join("checkpoint.ckpt")
}

pub fn log_path(out: &std::path::Path) -> PathBuf {
    out.join("train_log.csv")
}
