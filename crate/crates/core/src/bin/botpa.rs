//! Command-line front end for the federated poisoning experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use botpa::experiment::{
    check_propositions, export_features, parse_config, run_dir, run_paired, run_select_n, run_sweep, ExperimentConfig,
};
use botpa::metrics::fmt_f64;
use botpa::{Error, ExecMode, Result};

#[derive(Debug, Parser)]
#[command(name = "botpa", version, about = "Federated learning poisoning and boosting experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Runs everything on one thread for bitwise reproducibility.
    #[arg(long, global = true)]
    serial: bool,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Paired vanilla and boosted runs (or plain runs without a [botpa] section).
    Run,
    /// One paired run per value of the [sweep] axis.
    Sweep,
    /// Compares empirical and analytic one-step weight divergence.
    CheckPropositions {
        /// Soft-label weights for the second proposition.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.4, 1.0])]
        lambdas: Vec<f64>,
        /// Step size; defaults to the configured learning rate.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Exports logits-layer features of the final global models.
    ExportFeatures,
    /// Picks the number of intermediate classes by increasing it until ASR declines.
    SelectN,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config", "a config file is required"))?;
    let mut cfg = parse_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.serial {
        cfg.exec = ExecMode::Serial;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_f64)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    match &cli.command {
        Command::Run => {
            let s = run_paired(&cfg)?;
            println!(
                "median V-ASR {} B-ASR {} RI-ASR {} V-acc {} B-acc {}",
                opt(s.median_v_asr()),
                opt(s.median_b_asr()),
                opt(s.median_ri_asr()),
                opt(s.median_v_accuracy()),
                opt(s.median_b_accuracy())
            );
        }
        Command::Sweep => {
            for p in run_sweep(&cfg)? {
                match &p.outcome {
                    Ok(s) => println!(
                        "{}: V-ASR {} B-ASR {} RI-ASR {}",
                        p.value,
                        opt(s.median_v_asr()),
                        opt(s.median_b_asr()),
                        opt(s.median_ri_asr())
                    ),
                    Err(e) => println!("{}: failed: {e}", p.value),
                }
            }
        }
        Command::CheckPropositions { lambdas, eta } => {
            for r in check_propositions(&cfg, lambdas, *eta)? {
                println!(
                    "proposition {} class {} lambda {}: max abs error {:e}",
                    r.proposition, r.class, r.lambda, r.report.max_abs_error
                );
            }
        }
        Command::ExportFeatures => {
            for path in export_features(&cfg)? {
                println!("{}", path.display());
            }
        }
        Command::SelectN => {
            let out = run_select_n(&cfg)?;
            for (n, v) in &out.evaluated {
                println!("N = {n}: median B-ASR {}", fmt_f64(*v));
            }
            println!("selected N = {}", out.chosen);
        }
    }
    println!("output: {}", run_dir(&cfg).display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
