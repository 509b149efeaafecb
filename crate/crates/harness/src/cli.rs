//! Command-line front end: argument parsing, configuration loading and exit
//! codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::{experiments, Config, Experiment, HarnessError};

#[derive(Parser)]
#[command(
    name = "gridest",
    version,
    about = "Distributed state estimation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the CSV tables and `summary.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the state of a grid from a measurement file.
    Solve(Common),
    /// Distance between the embedded and the WLS estimate over a range of ε.
    SweepEpsilon(Common),
    /// Estimation error as measurement redundancy grows.
    SweepMeasurements(Common),
    /// Residual detection on clean and corrupted measurement streams.
    Detect(Common),
    /// Local error of truncated diffusion on a lattice grid.
    LatticeDecay(Common),
    /// Communication counts of the sequential algorithm.
    Complexity(Common),
}

impl Command {
    fn split(&self) -> (Experiment, &Common) {
        match self {
            Self::Solve(c) => (Experiment::Solve, c),
            Self::SweepEpsilon(c) => (Experiment::SweepEpsilon, c),
            Self::SweepMeasurements(c) => (Experiment::SweepMeasurements, c),
            Self::Detect(c) => (Experiment::Detect, c),
            Self::LatticeDecay(c) => (Experiment::LatticeDecay, c),
            Self::Complexity(c) => (Experiment::Complexity, c),
        }
    }
}

fn load(experiment: Experiment, common: &Common) -> Result<(Config, PathBuf), HarnessError> {
    let (mut config, base) = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| HarnessError::Input {
                path: path.display().to_string(),
                source,
            })?;
            let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
            (Config::parse(&text, experiment)?, base)
        }
        None => (Config::defaults(experiment), PathBuf::new()),
    };
    if let Some(seed) = common.seed {
        config.set("seed", &seed.to_string())?;
    }
    Ok((config, base))
}

/// Runs one command and returns whether a detection run raised an alarm.
fn execute(command: &Command, out: &mut dyn Write) -> Result<bool, HarnessError> {
    let (experiment, common) = command.split();
    let (config, base) = load(experiment, common)?;
    let artifact = experiments::run(&config, &base)?;
    if let Some(dir) = &common.out {
        artifact.write_to(dir)?;
    }
    out.write_all(artifact.stdout_text().as_bytes())
        .map_err(|source| HarnessError::Output {
            path: "standard output".into(),
            source,
        })?;
    Ok(experiment == Experiment::Detect && artifact.alarm)
}

/// Runs the command line `args` (program name first) and returns the exit
/// status: 0 on success, 1 when detection raised an alarm, 2 for bad
/// arguments, configuration or input files, 3 when the computation failed.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match execute(&cli.command, out) {
        Ok(true) => 1,
        Ok(false) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
