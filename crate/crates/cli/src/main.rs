use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use grokgeo::harness::{self, presets, ExperimentConfig};
use grokgeo::model::MlpParams;
use grokgeo::tasks::write_dataset_csv;

#[derive(Parser)]
#[command(name = "grokgeo", version, about = "Feature geometry and flatness in grokking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seeds one after another; `false` runs them concurrently.
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/validation split for a seed as CSV.
    Generate(Common),
    /// Train every seed of a config and write metrics and checkpoints.
    Train(Common),
    /// Run a config once per value of one scalar parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted parameter name, e.g. reg.lambda_reg.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Evaluate the flatness bound and collapse checks on exact ETFs.
    EtfCheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics for a saved checkpoint on a seed's split.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => presets::train_preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if let Some(d) = c.deterministic {
        cfg.deterministic = d;
    }
    Ok(cfg)
}

fn print_json(v: serde_json::Value) {
    println!("{v}");
}

fn summarize(runs: &[harness::SeedRun], dir: &Path) {
    for r in runs {
        if let Some(last) = r.log.last() {
            print_json(json!({
                "seed": r.seed,
                "step": last.step,
                "train_acc": last.train_acc,
                "val_acc": last.val_acc,
                "ncc": last.ncc,
                "kappa": last.kappa,
                "output": dir.join(format!("seed-{}", r.seed)),
            }));
        }
    }
}

fn etf_check(out: Option<PathBuf>) -> anyhow::Result<()> {
    let rows = harness::run_etf_grid(&harness::EtfGrid::default())?;
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        presets::write_etf_csv(&rows, &dir.join("etf.csv"))?;
    }
    let failing: Vec<_> = rows.iter().filter(|r| !(r.bound_holds() && r.nc.all() && r.bias_residual <= 1e-10)).collect();
    print_json(json!({ "cells": rows.len(), "failing": failing }));
    if !failing.is_empty() {
        bail!("{} ETF cells failed", failing.len());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = load_config(&c)?;
            let seed = cfg.seeds[0];
            let (train, val) = harness::run::seed_data(&cfg, seed)?;
            let dir = c.out.unwrap_or_else(|| cfg.output_dir.clone());
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("dataset.csv");
            write_dataset_csv(&path, &[&train, &val])?;
            print_json(json!({ "seed": seed, "train": train.len(), "validation": val.len(), "output": path }));
        }
        Command::Train(c) => {
            if c.preset.as_deref() == Some("etf-verify") {
                return etf_check(c.out);
            }
            let cfg = load_config(&c)?;
            let runs = harness::run_experiment(&cfg)?;
            harness::write_experiment(&cfg, &runs, &cfg.output_dir)?;
            summarize(&runs, &cfg.output_dir);
        }
        Command::Sweep { common, param, values } => {
            let cfg = load_config(&common)?;
            let points = harness::sweep(&cfg, &param, &values)?;
            harness::sweep::write_sweep(&points, &cfg.output_dir)?;
            for p in &points {
                summarize(&p.runs, &p.cfg.output_dir);
            }
        }
        Command::EtfCheck { out } => etf_check(out)?,
        Command::Analyze { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let params = MlpParams::load(&checkpoint)?;
            let seed = cfg.seeds[0];
            let r = harness::analyze(&cfg, &params, seed)?;
            print_json(json!({
                "seed": seed,
                "train_loss": r.train_loss,
                "val_loss": r.val_loss,
                "train_acc": r.train_acc,
                "val_acc": r.val_acc,
                "gen_gap": r.gen_gap,
                "ncc": r.ncc,
                "kappa": r.kappa,
                "kappa_simplified": r.kappa_simplified,
                "mean_angle_dev": r.mean_angle_dev,
                "representativeness": r.representativeness,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            e.exit();
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<grokgeo::Error>().map_or("cli", |g| g.kind());
            eprintln!("{}", json!({ "error": kind, "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
