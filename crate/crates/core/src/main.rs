//! Command-line scenario runner.
//!
//! Exit codes: 0 all enabled checks passed, 1 configuration or validation
//! failure, 2 at least one check failed (artifacts still written).

use clap::Parser;
use reserve_engine::config::ScenarioConfig;
use reserve_engine::scenario::run_scenario;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "reserve-engine",
    about = "Multi-state life insurance reserving with stochastic retirement: analytic solvers plus a Monte Carlo cross-check"
)]
struct Args {
    /// Scenario configuration file (JSON)
    #[arg(long)]
    config: PathBuf,

    /// Output directory for CSV tables, the manifest, and the report
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,

    /// Override the number of simulated paths
    #[arg(long)]
    paths: Option<usize>,

    /// Override the master seed
    #[arg(long)]
    seed: Option<u64>,

    /// Override the grid step
    #[arg(long)]
    grid_step: Option<f64>,

    /// Override the regimes to run (comma-separated: full,g1,g2,practice)
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<String>>,

    /// Override the enabled checks (comma-separated:
    /// residual,identity,tower,zscore)
    #[arg(long, value_delimiter = ',')]
    checks: Option<Vec<String>>,

    /// Dump the simulated jump records to paths.csv
    #[arg(long)]
    dump_paths: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(1);
        }
    };
    let mut config = match ScenarioConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(p) = args.paths {
        config.mc.n_paths = p;
    }
    if let Some(s) = args.seed {
        config.mc.seed = s;
    }
    if let Some(h) = args.grid_step {
        config.grid_step = h;
    }
    if let Some(r) = args.regimes {
        config.regimes = r;
    }
    if let Some(c) = args.checks {
        config.checks = c;
    }
    if args.dump_paths {
        config.dump_paths = true;
    }
    if config.grid_step <= 0.0 || config.mc.n_paths == 0 {
        eprintln!("error: grid_step must be positive and n_paths at least 1");
        return ExitCode::from(1);
    }
    match run_scenario(&config, &args.out_dir) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
