//! `irpim`: analyze weights, apply LHR/WDS, map tasks, simulate and report.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use irpim::booster::Mode;
use irpim::engine::BoosterPolicy;
use irpim::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "AIM_SIM_THREADS";

#[derive(Parser, Debug)]
#[command(name = "irpim", version, about = "IR-drop aware bit-serial SRAM PIM simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Anneal,
    Sequential,
    Zigzag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Inputs shared by `map` and `simulate`.
#[derive(Args, Debug, Clone)]
pub struct Setup {
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long)]
    pub workload: PathBuf,
    /// Mode: sprint or low-power.
    #[arg(long, default_value = "low-power")]
    pub mode: Mode,
    #[arg(long)]
    pub seed: u64,
    /// Apply a weight distribution shift of this power of two.
    #[arg(long)]
    pub delta: Option<u32>,
    /// Override the topology's safe-counter window.
    #[arg(long)]
    pub beta: Option<u32>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Reports Hamming counts and rates of quantized tensors
    Analyze {
        /// Tensor sidecar files.
        #[arg(required = true)]
        tensors: Vec<PathBuf>,
        /// Chip geometry used for the per-tile breakdown.
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tunes float weight layers with the HR regulariser
    Lhr {
        /// JSON file with one layer or a list of layers.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
        /// Quadratic pull towards the starting weights; 0 disables it.
        #[arg(long, default_value_t = 0.0)]
        anchor: f64,
    },
    /// Shifts a tensor by a power of two
    Wds {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long)]
        delta: u32,
        /// Sidecar path of the shifted tensor.
        #[arg(long)]
        out: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Maps tasks onto macros
    Map {
        #[command(flatten)]
        setup: Setup,
        #[arg(long, value_enum, default_value = "anneal")]
        strategy: Strategy,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the cycle-level simulation and writes its trace
    Simulate {
        #[command(flatten)]
        setup: Setup,
        /// Mapping file written by `map`.
        #[arg(long, conflicts_with = "strategy")]
        mapping: Option<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<Strategy>,
        /// Booster policy: aggressive, safe-only or dvfs.
        #[arg(long, default_value = "aggressive")]
        booster: BoosterPolicy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turns traces into plot-ready series; two traces add ablation deltas
    Report {
        /// Trace directories written by `simulate` or `run`.
        #[arg(required = true, num_args = 1..=2)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the whole pipeline described by a manifest
    Run {
        manifest: PathBuf,
        /// Override the manifest's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::validation(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Analyze {
            tensors,
            topology,
            format,
            out,
        } => commands::analyze(&tensors, topology.as_deref(), format, out.as_deref()),
        Command::Lhr {
            input,
            out,
            lambda,
            steps,
            lr,
            anchor,
        } => commands::lhr(&input, &out, lambda, steps, lr, anchor),
        Command::Wds {
            tensor,
            delta,
            out,
            report,
        } => commands::wds(&tensor, delta, &out, report.as_deref()),
        Command::Map { setup, strategy, out } => commands::map(&setup, strategy, out.as_deref()),
        Command::Simulate {
            setup,
            mapping,
            strategy,
            booster,
            out,
        } => {
            let placement = match mapping {
                Some(p) => commands::Placement::File(p),
                None => commands::Placement::Strategy(strategy.unwrap_or(Strategy::Anneal)),
            };
            commands::simulate(&setup, &placement, booster, &out)
        }
        Command::Report { traces, out } => commands::report(&traces, &out),
        Command::Run { manifest, out } => commands::run(&manifest, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
