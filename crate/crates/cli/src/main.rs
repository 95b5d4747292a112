use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fedloc::experiment::{self, DataSource, ExperimentConfig, DATA_ROOT_ENV};
use fedloc::synth::{self, SynthConfig};

/// Federated WiFi-fingerprint localization experiments.
#[derive(Parser)]
#[command(name = "fedloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and print its fully defaulted form.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run an experiment and write results.csv, summary.csv and config.resolved.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Recompute summary.csv from a results directory's results.csv.
    Summarize {
        results_dir: PathBuf,
        /// Write summary.csv here instead of the results directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus in the UJIIndoorLoc CSV layout.
    SynthCorpus {
        dir: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().seed)]
        seed: u64,
        /// Per-campaign AP power drift, standard deviation in dB.
        #[arg(long, default_value_t = SynthConfig::default().drift_db_sd)]
        drift_db_sd: f64,
        /// Per-campaign probability of relocating an AP.
        #[arg(long, default_value_t = SynthConfig::default().moved_ap_fraction)]
        moved_ap_fraction: f64,
        /// Per-campaign probability of switching an AP off.
        #[arg(long, default_value_t = SynthConfig::default().off_ap_fraction)]
        off_ap_fraction: f64,
    },
}

#[derive(clap::Args)]
struct Overrides {
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Change the round budget; the transfer round scales with it.
    #[arg(long)]
    rounds_override: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// UJIIndoorLoc directory; used when the config names no data root.
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

fn load(path: &Path, o: &Overrides) -> anyhow::Result<ExperimentConfig> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = parse_with_data_root(&raw, o.data_root.as_deref())
        .with_context(|| format!("invalid config {}", path.display()))?;
    if let Some(seed) = o.seed_override {
        cfg.override_seed(seed);
    }
    if let Some(rounds) = o.rounds_override {
        cfg.override_rounds(rounds)?;
    }
    if let Some(out) = &o.out {
        cfg.output = out.clone();
    }
    experiment::check_config(&cfg)?;
    Ok(cfg)
}

/// A `uji` source without a root picks up the root from the flag or
/// environment before validation.
fn parse_with_data_root(raw: &str, data_root: Option<&Path>) -> fedloc::Result<ExperimentConfig> {
    match experiment::validate_config(raw) {
        Err(e) if data_root.is_some() && e.to_string().contains("data.root") => {
            let mut value: toml::Table = toml::from_str(raw).map_err(|e| fedloc::Error::Config(e.to_string()))?;
            let data = value
                .entry("data")
                .or_insert_with(|| toml::Value::Table(Default::default()));
            if let Some(t) = data.as_table_mut() {
                if !t.contains_key("root") {
                    t.insert(
                        "root".into(),
                        toml::Value::String(data_root.unwrap().display().to_string()),
                    );
                }
            }
            experiment::validate_config(&value.to_string())
        }
        other => other,
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Validate { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            print!("{}", cfg.to_toml());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            if cfg.data.source == DataSource::Synthetic {
                eprintln!("note: using the synthetic corpus (seed {})", cfg.data.synthetic_seed);
            }
            let artifacts = experiment::run_experiment(&cfg)?;
            println!(
                "{} rows, {} checkpoints -> {}",
                artifacts.rows.len(),
                artifacts.checkpoints.len(),
                artifacts.output.display()
            );
            for s in artifacts.summary.iter().filter(|s| s.baseline.is_some()) {
                println!(
                    "{} vs {} ({}{}): relative improvement {:.4}",
                    s.method,
                    s.baseline.as_deref().unwrap_or(""),
                    s.metric,
                    s.rho.map(|r| format!(", rho={r}")).unwrap_or_default(),
                    s.relative_improvement.unwrap_or(f64::NAN)
                );
            }
            if artifacts.succeeded() {
                Ok(ExitCode::SUCCESS)
            } else {
                for f in &artifacts.failures {
                    eprintln!("run failed: {f}");
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Summarize { results_dir, out } => {
            let rows = experiment::read_results(&results_dir.join("results.csv"))?;
            if rows.is_empty() {
                bail!("{} has no result rows", results_dir.display());
            }
            let summary = experiment::summarize(&rows);
            let path = out.unwrap_or(results_dir).join("summary.csv");
            let mut buf = Vec::new();
            experiment::write_summary(&summary, &mut buf)?;
            std::fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::SynthCorpus {
            dir,
            seed,
            drift_db_sd,
            moved_ap_fraction,
            off_ap_fraction,
        } => {
            let cfg = SynthConfig {
                seed,
                drift_db_sd,
                moved_ap_fraction,
                off_ap_fraction,
                ..SynthConfig::default()
            };
            synth::write_corpus(&dir, &cfg)?;
            println!("{}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
