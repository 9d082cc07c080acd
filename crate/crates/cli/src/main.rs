use std::path::PathBuf;
use std::process::ExitCode;

use aoisched::experiments::{cmd_simulate, cmd_solve_single, cmd_sweep, exit_code, RunOptions, SweepAxis};
use clap::{Parser, Subcommand};

/// Age-of-information sampling and scheduling experiments.
#[derive(Parser)]
#[command(name = "aoisched", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pick the sampling rate and solve the single-sensor constrained problem.
    SolveSingle {
        #[command(flatten)]
        common: Common,
        /// Solve at this sampling rate and skip the rate search.
        #[arg(long)]
        lambda: Option<f64>,
        /// Also try the 0.01 grid below the feasibility cliff.
        #[arg(long)]
        refine_cliff: bool,
    },
    /// Sweep one axis for every configured scheme.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda, cmax, snr or n_sensors; overrides [sweep].axis.
        #[arg(long)]
        axis: Option<String>,
    },
    /// Run the multi-sensor simulator.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Solve the policy instead of loading it.
        #[arg(long)]
        solve_first: bool,
    },
}

#[derive(clap::Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides [output].dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed; overrides [simulation].seeds.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> aoisched::Result<Vec<PathBuf>> {
    match cli.command {
        Command::SolveSingle { common, lambda, refine_cliff } => {
            let opts = RunOptions { out: common.out, seed: common.seed, lambda, refine_cliff, ..Default::default() };
            let out = cmd_solve_single(&common.config, &opts)?;
            let s = &out.summary;
            println!(
                "lambda* = {}  avg_aoi = {:.4}  avg_cost = {:.4}  theta = {:.4}",
                s.lambda_star, s.avg_aoi, s.avg_cost, s.theta
            );
            Ok(out.written)
        }
        Command::Sweep { common, axis } => {
            let axis = axis.map(|a| a.parse::<SweepAxis>()).transpose()?;
            let opts = RunOptions { out: common.out, seed: common.seed, axis, ..Default::default() };
            let out = cmd_sweep(&common.config, &opts)?;
            println!("{} rows", out.rows.len());
            Ok(out.written)
        }
        Command::Simulate { common, solve_first } => {
            let opts = RunOptions { out: common.out, seed: common.seed, solve_first, ..Default::default() };
            let out = cmd_simulate(&common.config, &opts)?;
            let a = &out.aggregate;
            println!(
                "{} N={} lambda={}  MAoI = {:.4} ± {:.4} over {} seeds  stable = {}",
                a.scheme, a.n_sensors, a.lambda, a.maoi_mean, a.maoi_se, a.seeds, a.stable
            );
            Ok(out.written)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(written) => {
            for path in written {
                log::info!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
