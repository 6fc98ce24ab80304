//! `logmeta` command-line interface.
//!
//! Exit status: 0 on success, 1 on a runtime or data error (including a
//! failed LOSO fold), 2 on a usage error.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use logmeta::RunConfig;

/// Cross-source log anomaly detection with few-shot meta-learning.
#[derive(Debug, Parser)]
#[command(name = "logmeta", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run config (TOML). Defaults to $LOGMETA_CONFIG when set.
    #[arg(long, global = true, env = "LOGMETA_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set meta.inner_steps=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Corpus manifest (overrides the config's `manifest`).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Global seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Args)]
pub struct Holdout {
    /// Source held out of training; omit to train on every source.
    #[arg(long)]
    pub holdout: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine templates; writes `templates/<source>.tsv` and `assignments.csv`.
    Parse {
        #[arg(long)]
        out: PathBuf,
    },
    /// Resolve training labels (gold, template majority, transfer); writes
    /// `labels.csv` and `transfer.csv`.
    Label {
        #[command(flatten)]
        holdout: Holdout,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build feature vectors; writes `pool.csv` and, with `--holdout`,
    /// `target_train.csv` and `target_test.csv`.
    Featurize {
        #[command(flatten)]
        holdout: Holdout,
        /// `labels.csv` from `label`.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank features and keep the best K; writes `mask.txt` and `scores.csv`.
    Select {
        #[command(flatten)]
        holdout: Holdout,
        /// `pool.csv` from `featurize`.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project onto the selection and SMOTE-balance each source; writes
    /// `pools.csv`.
    Balance {
        #[command(flatten)]
        holdout: Holdout,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train the encoder; writes `encoder.ckpt` and `curve.csv`.
    Train {
        #[command(flatten)]
        holdout: Holdout,
        /// `pools.csv` from `balance`.
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt to the held-out source and score it; writes `report.*` and
    /// `predictions.csv`.
    Evaluate {
        #[arg(long)]
        holdout: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Labeled rows the adaptation support is drawn from.
        #[arg(long)]
        train: PathBuf,
        /// Labeled rows to score.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-source-out over every source; writes the report directory.
    Loso {
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify feature rows after adapting on a labeled support file.
    Predict {
        #[command(flatten)]
        holdout: Holdout,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Labeled rows the adaptation support is drawn from.
        #[arg(long)]
        support: PathBuf,
        /// Rows to classify (their label column is ignored).
        #[arg(long)]
        input: PathBuf,
        /// Output CSV: `record_id,predicted,p_anomaly`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the seeded synthetic corpus and its manifest.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        sources: usize,
        #[arg(long, default_value_t = 1000)]
        per_source: usize,
        /// Normal lines per anomalous line.
        #[arg(long, default_value_t = 50.0)]
        imbalance: f64,
        /// Generator seed (independent of the run seed).
        #[arg(long = "corpus-seed", default_value_t = 7)]
        corpus_seed: u64,
    },
}

impl GlobalArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path, &self.overrides)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::from_toml_with_overrides("", &self.overrides)?,
        };
        if let Some(m) = &self.manifest {
            cfg.manifest = m.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match stages::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_reach_the_config() {
        let cli = Cli::try_parse_from(["logmeta", "loso", "--out", "o", "--set", "meta.inner_steps=2", "--seed", "9"]).unwrap();
        let cfg = cli.global.run_config().unwrap();
        assert_eq!((cfg.meta.inner_steps, cfg.seed), (2, 9));
    }
}
