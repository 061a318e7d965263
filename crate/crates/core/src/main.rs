use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prequal::cli::{run_experiment, RunConfig};
use prequal::workload::Experiment;
use prequal::{ConfigError, Error, PolicyKind};

#[derive(Parser)]
#[command(name = "prequal-sim", version, about = "Run load-balancing experiments on the simulated testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV, resolved config, and summary.
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// load_ramp, selection_rules, probe_rate, rif_quantile, or linear_sweep.
    #[arg(long)]
    experiment: Option<String>,
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Simulations to run at once.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Only run steps for these policies (comma-separated).
    #[arg(long, value_delimiter = ',')]
    policy: Vec<String>,
}

fn run(args: RunArgs) -> Result<(), Error> {
    let experiment = args
        .experiment
        .as_deref()
        .map(str::parse::<Experiment>)
        .transpose()?;
    let mut cfg = match (&args.config, experiment) {
        (Some(path), e) => RunConfig::from_file_as(path, e)?,
        (None, Some(e)) => RunConfig::preset(e),
        (None, None) => {
            return Err(ConfigError::invalid("experiment", "pass --experiment or --config").into())
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out = Some(out);
    }
    if !args.policy.is_empty() {
        cfg.policies = args
            .policy
            .iter()
            .map(|p| p.parse::<PolicyKind>())
            .collect::<Result<_, _>>()?;
    }
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("out/{}", cfg.experiment)));
    let result = run_experiment(cfg, args.parallel)?;
    result.write_to(&out)?;
    print!("{}", result.summary_table());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
