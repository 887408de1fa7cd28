mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::commands::Failure;
use crate::config::Config;

/// Gait synthesis, gait libraries and library-guided policy training for a planar biped.
#[derive(Debug, Parser)]
#[command(name = "gaitlab", version)]
pub struct Cli {
    /// JSON configuration file [default: $GAITLAB_CONFIG, else built-in defaults]
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for training and evaluation; overrides the configuration
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Cmd {
    /// Sanity-check the model: mass matrix and one impact
    ModelCheck(ModelCheckArgs),
    /// Solve one periodic gait and write it as library frames
    Solve(SolveArgs),
    /// Solve a grid of gaits and write the library
    LibraryBuild(LibraryBuildArgs),
    /// Print the grid command whose gait serves a requested velocity
    LibraryQuery(LibraryQueryArgs),
    /// Find the closed-loop limit cycle of a gait and its Floquet multipliers
    Verify(VerifyArgs),
    /// Walk a gait's closed loop and write a phase-portrait CSV
    Simulate(SimulateArgs),
    /// Train a standing policy
    Pretrain(PretrainArgs),
    /// Train a walking policy guided by a gait library
    Train(TrainArgs),
    /// Tabulate success rate and velocity error per speed
    Eval(EvalArgs),
    /// Distances between neighbouring library gaits
    Continuity(ContinuityArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindArg {
    VirtualKnee,
    Prismatic,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelCheckArgs {
    /// Leg model to check
    #[arg(long, value_enum, default_value = "virtual-knee")]
    pub kind: KindArg,
}

#[derive(Debug, Args, Serialize)]
pub struct SolveArgs {
    /// Forward speed command (m/s)
    #[arg(long, allow_hyphen_values = true)]
    pub vx: f64,
    /// Lateral speed command (m/s)
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub vy: f64,
    /// Output gait JSON
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LibraryBuildArgs {
    /// Forward speed grid as start:step:stop
    #[arg(long, default_value = "0:0.05:1.2")]
    pub vx_range: String,
    /// Lateral speed grid as start:step:stop
    #[arg(long, default_value = "0:0:0", allow_hyphen_values = true)]
    pub vy_range: String,
    /// Parallel solves
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output library JSON
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-point build report JSON (includes timings)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct LibraryQueryArgs {
    /// Library JSON
    #[arg(long)]
    pub lib: PathBuf,
    /// Forward speed (m/s)
    #[arg(long, allow_hyphen_values = true)]
    pub vx: f64,
    /// Lateral speed (m/s)
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub vy: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    /// Gait JSON written by solve
    #[arg(long)]
    pub gait: PathBuf,
    /// Output report JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Gait JSON written by solve
    #[arg(long)]
    pub gait: PathBuf,
    /// Number of steps to walk
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Output phase-portrait CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Write prismatic-leg coordinates instead of the source model's
    #[arg(long)]
    pub mapped: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    /// Output policy checkpoint JSON
    #[arg(long)]
    pub out: PathBuf,
    /// Output training log CSV
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Training iterations (overrides the configuration)
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Library JSON
    #[arg(long)]
    pub lib: PathBuf,
    /// Initial policy checkpoint, normally from pretrain [default: random initialization]
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output policy checkpoint JSON
    #[arg(long)]
    pub out: PathBuf,
    /// Output training log CSV
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Training iterations (overrides the configuration)
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Library JSON
    #[arg(long)]
    pub lib: PathBuf,
    /// Policy checkpoint to evaluate [default: the scripted library tracking controller]
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Comma-separated forward speeds (m/s)
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6")]
    pub speeds: Vec<f64>,
    /// Trials per speed
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Output table CSV [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ContinuityArgs {
    /// Library JSON
    #[arg(long)]
    pub lib: PathBuf,
    /// Output CSV [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = Config::resolve(cli.config.as_deref())
        .and_then(|mut cfg| {
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
                cfg.eval.seed = seed;
            }
            cfg.validate().map(|()| cfg)
        })
        .map_err(Failure::from)
        .and_then(|cfg| {
            commands::echo_config(&cli.command, &cfg);
            commands::run(&cli.command, &cfg)
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let diag = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{diag}");
            ExitCode::from(1)
        }
    }
}
