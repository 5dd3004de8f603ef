//! Argument parsing and exit-code mapping.

use crate::commands;
use crate::config::{ConfigError, Overrides, PortType, Settings};
use clap::builder::PossibleValuesParser;
use clap::{Parser, Subcommand};
use evplug_core::pipeline::NoiseProfile;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const DEFAULT_OUT: &str = "evplug-out";

#[derive(Debug, Parser)]
#[command(name = "evplug", version, about = "Simulated vision-guided EV charging: render, detect, calibrate and plug in")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random draw; equal seeds give byte-identical output.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Charging port model.
    #[arg(long = "port-type", global = true, value_enum)]
    pub port_type: Option<PortType>,
    /// Port angle in degrees; repeat for several angles.
    #[arg(long = "port-angle", global = true, value_name = "DEG", allow_negative_numbers = true)]
    pub port_angle: Vec<f64>,
    /// Runs per port angle.
    #[arg(long, global = true, value_name = "N")]
    pub runs: Option<usize>,
    /// Noise preset: ideal keypoints, keypoint noise, or rendered images.
    #[arg(long, global = true, value_name = "PRESET", value_parser = PossibleValuesParser::new(NoiseProfile::NAMES))]
    pub noise: Option<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a stereo pair with its ground truth.
    Render,
    /// Calibrate camera and tool from simulated plug presentations.
    Calibrate {
        /// Number of accepted presentations to collect.
        #[arg(long, value_name = "N")]
        poses: Option<usize>,
    },
    /// Detect the port in a rendered stereo pair and estimate its pose.
    Detect,
    /// Plug-in and unplug runs at each port angle, logged as JSON lines.
    RunExperiment,
    /// Summarize a run log and write it as CSV.
    Report {
        /// Log written by run-experiment.
        log: PathBuf,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn settings(cli: &Cli, poses: Option<usize>) -> Result<Settings, Failure> {
    let o = Overrides { seed: cli.seed, port_type: cli.port_type, port_angles_deg: cli.port_angle.clone(), runs: cli.runs, noise: cli.noise.clone(), poses };
    Settings::resolve(cli.config.as_deref(), &o).map_err(|e: ConfigError| Failure::Usage(e.into()))
}

fn dispatch(cli: &Cli) -> Result<String, Failure> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let runtime = Failure::Runtime;
    match &cli.command {
        Command::Render => commands::render(&settings(cli, None)?, &out).map_err(runtime),
        Command::Calibrate { poses } => commands::calibrate(&settings(cli, *poses)?, &out).map_err(runtime),
        Command::Detect => commands::detect(&settings(cli, None)?, &out).map_err(runtime),
        Command::RunExperiment => commands::run_experiment(&settings(cli, None)?, &out).map_err(runtime),
        Command::Report { log } => commands::report(log, cli.out.as_deref()).map_err(runtime),
    }
}

/// Runs the tool on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(stderr, "{text}") } else { write!(stdout, "{text}") };
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(text) => {
            let _ = write!(stdout, "{text}");
            EXIT_OK
        }
        Err(Failure::Usage(e)) => {
            let _ = writeln!(stderr, "error: {e:#}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
