use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddpc_cli::commands::{self, apply_seed, CliError};
use ddpc_cli::config::{self, ScenarioConfig};
use ddpc_cli::presets::Preset;

#[derive(Parser)]
#[command(name = "ddpc", version, about = "Data-driven predictive control experiments")]
struct Cli {
    /// Scenario file.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in case study instead of a scenario file.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// Overrides the experiment and run seeds.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the open-loop estimation experiment and write experiment.csv.
    Collect,
    /// Estimate the prediction matrices and write predictor.txt.
    Estimate {
        /// Experiment CSV; defaults to <out>/experiment.csv.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Closed-loop run of the configured variant.
    Run {
        /// Predictor file; without it the experiment is collected first.
        #[arg(long)]
        predictor: Option<PathBuf>,
    },
    /// Run the listed variants side by side.
    Compare,
}

fn load(cli: &Cli) -> Result<ScenarioConfig, String> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            config::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        (None, Some(p)) => p.config(),
        (None, None) => return Err("give --config <path> or --preset <name>".into()),
    };
    if let Some(seed) = cli.seed {
        apply_seed(&mut cfg, seed);
    }
    Ok(cfg)
}

fn execute(cli: &Cli, cfg: &ScenarioConfig) -> Result<(), CliError> {
    match &cli.command {
        Command::Collect => {
            let path = commands::cmd_collect(cfg, &cli.out)?;
            println!("wrote {}", path.display());
        }
        Command::Estimate { data } => {
            let data = data.clone().unwrap_or_else(|| cli.out.join("experiment.csv"));
            let (path, rep) = commands::cmd_estimate(cfg, &data, &cli.out)?;
            println!(
                "W: sigma_max={:.4e} sigma_min={:.4e} rank={}/{} input sigma ratio={:.4e}",
                rep.w_sigma_max, rep.w_sigma_min, rep.w_rank, rep.w_rows, rep.input_ratio
            );
            println!("wrote {}", path.display());
        }
        Command::Run { predictor } => {
            let run = commands::cmd_run(cfg, predictor.as_deref(), &cli.out)?;
            print!("{}", commands::format_table(std::slice::from_ref(&run)));
            println!("wrote {}", cli.out.display());
        }
        Command::Compare => {
            let runs = commands::cmd_compare(cfg, &cli.out)?;
            print!("{}", commands::format_table(&runs));
            println!("wrote {}", cli.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match execute(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
