//! `cadaft`: generate benchmarks, annotate sentence pairs, train, and run
//! ablation sweeps from a single configuration file.

mod commands;
mod config;
mod failure;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use cadaft::datagen::ALPHA_ENTAILMENT;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use failure::Failure;

#[derive(Parser)]
#[command(name = "cadaft", version, about = "Confounder-aware adversarial fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration, or the manifest of an earlier run. Defaults apply
    /// when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write every benchmark split and a manifest.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run; writes a checkpoint, metrics, and a manifest.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding the split files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint for `train.epochs` more epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train erm_only, no_confounder, and full for every seed and tabulate.
    Ablation {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds or inclusive ranges, e.g. `1-5`. Defaults to
        /// the configured seed.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Add an overlap annotation `t` to each sentence pair.
    Annotate {
        /// One JSON object per line with `tokens_1` and `tokens_2`.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ALPHA_ENTAILMENT)]
        alpha: f64,
        /// Sweep table path; defaults to `<out stem>.sweep.csv`.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    use commands::output_path;
    match cli.command {
        Command::Generate { config, out } => commands::generate(&config.load()?, &output_path(&out)),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => commands::train(&config.load()?, &data, &output_path(&out), resume.as_deref()),
        Command::Ablation {
            config,
            data,
            out,
            seeds,
        } => {
            let cfg = config.load()?;
            let seeds = match seeds {
                Some(s) => commands::parse_seeds(&s).map_err(|e| Failure::config(format!("seeds: {e}")))?,
                None => vec![cfg.seed],
            };
            commands::ablation(&cfg, &data, &output_path(&out), &seeds)
        }
        Command::Annotate {
            input,
            out,
            alpha,
            sweep,
        } => {
            let out = output_path(&out);
            let sweep = sweep
                .map(|s| output_path(&s))
                .unwrap_or_else(|| commands::sibling(&out, "sweep.csv"));
            commands::annotate(&input, alpha, &out, &sweep)
        }
        Command::ShowConfig { config } => {
            print!("{}", config.load()?.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
