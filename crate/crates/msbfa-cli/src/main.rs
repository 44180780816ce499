//! `msbfa` — multi-study Bayesian factor analysis from the command line.
//!
//! Three commands: `fit` runs one estimator on CSV study files, `bench`
//! runs the scenario x method evaluation grid, `simulate` writes a
//! synthetic scenario with its generative truth. Flags override the TOML
//! config file; failures print one machine-readable JSON line to stderr
//! and exit 2 (configuration), 3 (numerics), or 4 (guard refusal).

mod bench;
mod commands;
mod config;
mod output;
mod runner;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use msbfa::postprocess::Method;
use msbfa::{Error, Result};

use crate::bench::BenchPlan;
use crate::commands::FitRequest;
use crate::config::{load_file_config, FileConfig, Settings};

#[derive(Parser)]
#[command(name = "msbfa", version, about = "Multi-study Bayesian factor analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one method to CSV study files.
    Fit(FitArgs),
    /// Run the scenario benchmark grid and write evaluation reports.
    Bench(BenchArgs),
    /// Generate a synthetic scenario (data + truth) to CSV files.
    Simulate(SimulateArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; runs land in out_dir/{method}/{label}/{seed}.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total MCMC iterations.
    #[arg(long)]
    nrun: Option<usize>,
    /// Iterations discarded from the front.
    #[arg(long)]
    burn: Option<usize>,
    /// Keep every n-th post-burn draw.
    #[arg(long)]
    thin: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// stackfa | indfa | pfa | momss | sufa | bmsfa | tetris
    #[arg(long)]
    method: String,
    /// Study CSV files, one per study (repeat the flag).
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Covariate CSV files, one per study in the same order.
    #[arg(long = "covariates")]
    covariates: Vec<PathBuf>,
    /// Number of common factors.
    #[arg(long)]
    k: Option<usize>,
    /// Per-study factor counts, comma separated; one value broadcasts.
    #[arg(long, value_delimiter = ',')]
    j: Option<Vec<usize>>,
    /// Skip per-study column centering.
    #[arg(long)]
    no_center: bool,
    /// Scale columns to unit variance (implies centering).
    #[arg(long)]
    scale: bool,
    /// Apply ln(x + offset) before other preprocessing.
    #[arg(long)]
    log_offset: Option<f64>,
    /// Accept variable counts beyond the perturbed-factor limit.
    #[arg(long)]
    allow_large_p: bool,
    /// Skip the factor-count selection and refit pass.
    #[arg(long)]
    no_refit: bool,
    /// Fix the sharing pattern to this binary CSV (tetris only).
    #[arg(long)]
    fixed_t: Option<PathBuf>,
    /// Name for the run directory; defaults to "data".
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Scenario ids (1-5), comma separated.
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<u8>>,
    /// Methods to run, comma separated.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Replicates per cell; seeds are seed, seed+1, ...
    #[arg(long)]
    reps: Option<usize>,
    /// Fit at the study's inflated factor counts instead of the true ones.
    #[arg(long)]
    overspecified: bool,
    /// Published dimensions instead of the reduced desk-scale variants.
    #[arg(long)]
    full: bool,
    /// Train fraction in (0,1); adds held-out prediction error per cell.
    #[arg(long)]
    split: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Scenario id (1-5).
    #[arg(long)]
    scenario: u8,
    /// Published dimensions instead of the reduced desk-scale variants.
    #[arg(long)]
    full: bool,
}

fn merge_common(file: &mut FileConfig, common: &CommonArgs) {
    if common.out_dir.is_some() {
        file.out_dir = common.out_dir.clone();
    }
    if common.seed.is_some() {
        file.seed = common.seed;
    }
    if common.nrun.is_some() {
        file.nrun = common.nrun;
    }
    if common.burn.is_some() {
        file.burn = common.burn;
    }
    if common.thin.is_some() {
        file.thin = common.thin;
    }
}

fn load_merged(common: &CommonArgs) -> Result<FileConfig> {
    let mut file = match &common.config {
        Some(path) => load_file_config(path)?,
        None => FileConfig::default(),
    };
    merge_common(&mut file, common);
    Ok(file)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(args) => {
            let mut file = load_merged(&args.common)?;
            if args.no_center {
                file.center = Some(false);
            }
            if args.scale {
                file.scale = Some(true);
            }
            if args.log_offset.is_some() {
                file.log_offset = args.log_offset;
            }
            if args.allow_large_p {
                file.pfa.allow_large_p = Some(true);
            }
            let settings = Settings::resolve(&file)?;
            let method: Method = args.method.parse()?;
            let request = FitRequest {
                method,
                data: args.data,
                covariates: args.covariates,
                k: args.k,
                j: args.j,
                no_refit: args.no_refit,
                fixed_t: args.fixed_t,
                label: args.label.unwrap_or_else(|| "data".into()),
            };
            commands::cmd_fit(&request, &settings)
        }
        Command::Bench(args) => {
            let file = load_merged(&args.common)?;
            let settings = Settings::resolve(&file)?;
            let plan = BenchPlan {
                scenarios: args
                    .scenarios
                    .or(file.bench.scenarios)
                    .unwrap_or_else(|| vec![1, 2, 3]),
                methods: args
                    .methods
                    .or(file.bench.methods)
                    .unwrap_or_else(|| {
                        Method::ALL.iter().map(|m| m.as_str().to_string()).collect()
                    }),
                reps: args.reps.or(file.bench.reps).unwrap_or(5),
                overspecified: args.overspecified || file.bench.overspecified.unwrap_or(false),
                full: args.full || file.bench.full.unwrap_or(false),
                split: args.split.or(file.bench.split),
                base_seed: settings.seed,
            };
            bench::cmd_bench(&plan, &settings)
        }
        Command::Simulate(args) => {
            let file = load_merged(&args.common)?;
            let settings = Settings::resolve(&file)?;
            let full = args.full || file.bench.full.unwrap_or(false);
            commands::cmd_simulate(args.scenario, full, &settings)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors; anything else is a usage
            // problem reported both human- and machine-readably.
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                let _ = e.print();
                std::process::exit(0);
            }
            let err = Error::Config(e.to_string());
            eprintln!(
                "{}",
                serde_json::json!({ "error": output::error_payload(&err) })
            );
            std::process::exit(err.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": output::error_payload(&err) })
            );
            std::process::exit(err.exit_code());
        }
    }
}
