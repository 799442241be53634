use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use koala::config::{ExperimentConfig, ExperimentMode};
use koala::runner::{self, MANIFEST_FILE};

/// Federated large-small model co-training simulator
#[derive(Parser, Debug)]
#[command(name = "koala", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured experiment (all trials)
    Run(Common),
    /// Homo-mode runs with and without forward distillation
    Ablation(Common),
    /// Params, FLOPs and float32 storage of every shipped model
    Resources(Common),
    /// Baseline run plus the configured run, reporting the test-loss gap
    LossGap(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML); built-in homo defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,

    /// Master seed, overrides the config
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory, overrides the config
    #[arg(long, env = "KOALA_OUT_DIR")]
    out: Option<PathBuf>,

    /// Number of clients trained concurrently
    #[arg(long)]
    parallel_clients: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::with_defaults(ExperimentMode::Homo),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(n) = self.parallel_clients {
            config.parallel_clients = n;
        }
        config.validate()?;
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = args.resolve()?;
            let manifest = runner::run_experiment(&config)?;
            for t in &manifest.trials {
                println!(
                    "seed {}: round-0 accuracy {:.4}, final {:.4}, best {:.4}",
                    t.seed,
                    t.round0_accuracy.unwrap_or(f64::NAN),
                    t.final_accuracy.unwrap_or(f64::NAN),
                    t.best_accuracy.unwrap_or(f64::NAN),
                );
            }
            if let Some(s) = manifest.best_accuracy {
                println!("best accuracy {:.4} ± {:.4}", s.mean, s.std);
            }
            println!("manifest: {}", config.output_dir.join(MANIFEST_FILE).display());
        }
        Command::Ablation(args) => {
            let config = args.resolve()?;
            let report = runner::run_ablation(&config)?;
            for (k, (with, without)) in report.final_accuracy.iter().enumerate() {
                println!("trial {k}: with forward {with:.4}, without {without:.4}");
            }
            println!(
                "with >= without in {} of {} trials",
                report.with_at_least_without,
                report.final_accuracy.len()
            );
        }
        Command::Resources(args) => {
            let config = args.resolve()?;
            let report = runner::report_resources(&config)?;
            print!("{}", report.to_table());
            std::fs::create_dir_all(&config.output_dir)?;
            let csv = config.output_dir.join("resources.csv");
            report.write_csv(&csv)?;
            println!("csv: {}", csv.display());
        }
        Command::LossGap(args) => {
            let config = args.resolve()?;
            let report = runner::run_with_baseline(&config)?;
            for (t, gap) in report.koala.trials.iter().zip(&report.gaps) {
                println!("seed {}: loss gap {gap:.6}", t.seed);
            }
            if let Some(s) = report.koala.loss_gap {
                println!("loss gap {:.6} ± {:.6}", s.mean, s.std);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
