//! `taxelsim` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
//! error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "taxelsim", version, about = "Capacitive tactile skin simulator and calibration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the scan loop in virtual time and write a frame log and summary.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Seconds of simulated time; defaults to `simulation.duration_s`.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a capacitance to force calibration from a `t,c,f` cycles file.
    Calibrate {
        #[arg(long)]
        cycles: PathBuf,
        #[arg(long, default_value = "calibration.json")]
        out: PathBuf,
        #[arg(long)]
        knots: Option<usize>,
    },
    /// Record synthetic press-release cycles as a `t,c,f` file.
    RecordCycles {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        cycles: usize,
        /// Switch off noise, hysteresis, quantization and drift.
        #[arg(long)]
        ideal: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the characterization battery and write the report.
    Characterize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export taxel positions and the mux/CDC/channel table.
    Topology {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Publish frames over TCP in wall-clock time.
    Stream {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long, default_value_t = 100.0)]
        rate: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            duration,
            seed,
            out,
        } => commands::simulate(&config, duration, seed, out),
        Command::Calibrate { cycles, out, knots } => commands::calibrate(&cycles, &out, knots),
        Command::RecordCycles {
            config,
            out,
            cycles,
            ideal,
            seed,
        } => commands::record_cycles(&config, &out, cycles, ideal, seed),
        Command::Characterize { config, seed, out } => commands::characterize_cmd(&config, seed, out),
        Command::Topology { config, out } => commands::topology(&config, out),
        Command::Stream {
            config,
            bind,
            rate,
            seed,
            duration,
        } => commands::stream(&config, &bind, rate, seed, duration),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("taxelsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
