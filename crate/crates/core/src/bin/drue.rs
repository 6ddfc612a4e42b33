use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use drue::config::RunConfig;
use drue::pipeline::{Pipeline, StageSelection};
use drue::{DrueError, Result};

#[derive(Parser)]
#[command(
    name = "drue",
    version,
    about = "Dual-decoder uncertainty estimation: data, training, scoring and evaluation"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the data seed and the training seeds with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset, the corruption ladder and ingest external folders.
    Prepare,
    /// Train the classifier and the decoders.
    Train {
        /// all, classifier, g1 or g0.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Score one dataset with one method.
    Score {
        /// drue, rue, rue_penultimate, entropy or mc_dropout.
        #[arg(long)]
        method: String,
        /// id_test, train, val, a ladder rung or an external folder name.
        #[arg(long, default_value = "id_test")]
        dataset: String,
    },
    /// AUC/AUPR report, score files and histogram export.
    Evaluate,
    /// The four-row decoder ablation.
    Ablate,
    /// Taylor remainder and JVP checks.
    Theory {
        /// Comma-separated perturbation scales, e.g. 1e-1,1e-2,1e-3.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
    },
    /// Render figures from an evaluated run directory.
    Plot {
        /// Run directory; defaults to the configured one.
        run_dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String> {
    let mut cfg = load_config(&cli)?;
    if let Command::Plot { run_dir: Some(dir) } = &cli.command {
        let snapshot = dir.join(drue::pipeline::SNAPSHOT_FILE);
        if cli.config.is_none() && snapshot.exists() {
            cfg = RunConfig::load(&snapshot)?;
            if let Some(seed) = cli.seed {
                cfg.override_seed(seed);
            }
        }
        cfg.paths.run_dir = dir.clone();
    }
    let p = Pipeline::new(cfg)?;
    Ok(match &cli.command {
        Command::Prepare => json(&p.prepare()?),
        Command::Train { stage } => json(&p.train(stage.parse::<StageSelection>()?)?),
        Command::Score { method, dataset } => {
            let paths = p.score(method, dataset)?;
            paths
                .iter()
                .map(|x| x.display().to_string())
                .collect::<Vec<_>>()
                .join("\n")
        }
        Command::Evaluate => {
            p.evaluate()?;
            p.run.report().display().to_string()
        }
        Command::Ablate => json(&p.ablate()?),
        Command::Theory { scales } => {
            p.theory(scales.clone())?;
            p.run.probe_report().display().to_string()
        }
        Command::Plot { .. } => p
            .plot()?
            .iter()
            .map(|x| x.display().to_string())
            .collect::<Vec<_>>()
            .join("\n"),
    })
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).unwrap_or_default()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.exit_code(), single_line(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn single_line(e: &DrueError) -> String {
    e.to_string()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}
