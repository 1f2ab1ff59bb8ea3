//! `kinoplan`: generate scenario suites, train planners, evaluate single
//! episodes, run the benchmark tables and re-render stored traces.
//!
//! Exit status: 0 on success, 1 for configuration and usage errors, 2 for
//! runtime failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kinoplan::controllers::ControllerKind;
use kinoplan::envsim::Archetype;

#[derive(Parser, Debug)]
#[command(name = "kinoplan", version, about = "Kinematics-aware learned local planner")]
pub struct Cli {
    /// Worker threads for training and benchmarks (0 uses all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand that reads a config.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config file. Built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; the effective config is written there.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Config overrides, e.g. `train.iterations=500`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct Planners {
    /// Planner under comparison as NAME=PARAMS_FILE; repeat for each planner.
    #[arg(long = "planner", value_name = "NAME=PATH", required = true)]
    pub planners: Vec<String>,
    /// Tracking manifest CSV; generated from the config when omitted.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Skip writing per-episode traces.
    #[arg(long)]
    pub no_traces: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the tracking and navigation manifests, resolved scenarios and grids.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Only write manifests and scenario tables.
        #[arg(long)]
        no_grids: bool,
    },
    /// Train a planner; writes train.csv, checkpoints and final.params.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a `.params` checkpoint (its `.optim` file must sit beside it).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Navigate one scenario and write its trace, plan and scene SVG.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Planner parameter file.
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value = "mpc")]
        controller: ControllerKind,
        #[arg(long, default_value = "forest")]
        archetype: Archetype,
        /// Scenario seed; defaults to the root seed.
        #[arg(long)]
        scenario_seed: Option<u64>,
        /// Take the scenario from this manifest instead (with --id).
        #[arg(long, requires = "id")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        id: Option<usize>,
    },
    /// Tracking-error and navigation-success tables.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        planners: Planners,
        /// Navigation manifest CSV; generated from the config when omitted.
        #[arg(long)]
        navigation_manifest: Option<PathBuf>,
    },
    /// Tracking error against the minimum turning radius (`bench.radii`).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        planners: Planners,
    },
    /// Re-render a stored trace as an SVG scene.
    Replay {
        /// Trace CSV written by eval or bench.
        #[arg(long)]
        trace: PathBuf,
        /// Grid file of the scenario.
        #[arg(long)]
        grid: PathBuf,
        /// Plan CSV written by eval, drawn under the executed path.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Output SVG file.
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let jobs = cli.jobs;
    match kinoplan::training::with_jobs(jobs, move || commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                kinoplan::Error::Config(_) => 1,
                _ => 2,
            })
        }
    }
}
