//! One-parameter sweeps over an experiment config.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::run::{run_experiment, write_experiment, SeedRun};

/// Scalar config fields accepted by [`set_param`].
pub const SWEEP_PARAMS: &[&str] = &[
    "steps",
    "measure_every",
    "task.p",
    "task.split_fraction",
    "model.init_scale",
    "optimizer.lr",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "optimizer.weight_decay",
    "optimizer.batch_size",
    "reg.lambda_reg",
    "kde.bandwidth",
    "kde.sample_weight",
];

fn unknown(name: &str) -> Error {
    Error::Config(format!("unknown sweep parameter {name:?}; valid names: {}", SWEEP_PARAMS.join(", ")))
}

fn parse<T: std::str::FromStr>(name: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {name}: {e}")))
}

pub fn set_param(cfg: &mut ExperimentConfig, name: &str, value: &str) -> Result<()> {
    match name {
        "steps" => cfg.steps = parse(name, value)?,
        "measure_every" => cfg.measure_every = parse(name, value)?,
        "task.p" => cfg.task.p = parse(name, value)?,
        "task.split_fraction" => cfg.task.split_fraction = parse(name, value)?,
        "model.init_scale" => cfg.model.init_scale = parse(name, value)?,
        "optimizer.lr" => cfg.optimizer.lr = parse(name, value)?,
        "optimizer.beta1" => cfg.optimizer.beta1 = parse(name, value)?,
        "optimizer.beta2" => cfg.optimizer.beta2 = parse(name, value)?,
        "optimizer.eps" => cfg.optimizer.eps = parse(name, value)?,
        "optimizer.weight_decay" => cfg.optimizer.weight_decay = parse(name, value)?,
        "optimizer.batch_size" => cfg.optimizer.batch_size = parse(name, value)?,
        "reg.lambda_reg" => cfg.reg.lambda_reg = parse(name, value)?,
        "kde.bandwidth" => cfg.kde.bandwidth = parse(name, value)?,
        "kde.sample_weight" => cfg.kde.sample_weight = parse(name, value)?,
        _ => return Err(unknown(name)),
    }
    cfg.validate()
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    /// `{param}={value}`, also the output subdirectory name.
    pub label: String,
    pub cfg: ExperimentConfig,
    pub runs: Vec<SeedRun>,
}

/// The per-value configs, without running them.
pub fn sweep_configs(base: &ExperimentConfig, name: &str, values: &[String]) -> Result<Vec<(String, ExperimentConfig)>> {
    if !SWEEP_PARAMS.contains(&name) {
        return Err(unknown(name));
    }
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|v| {
            let label = format!("{name}={}", v.trim());
            let mut cfg = base.clone();
            set_param(&mut cfg, name, v)?;
            cfg.name = format!("{}/{label}", base.name);
            cfg.output_dir = base.output_dir.join(&label);
            Ok((label, cfg))
        })
        .collect()
}

/// Runs every value independently.
pub fn sweep(base: &ExperimentConfig, name: &str, values: &[String]) -> Result<Vec<SweepPoint>> {
    sweep_configs(base, name, values)?
        .into_iter()
        .map(|(label, cfg)| {
            let runs = run_experiment(&cfg)?;
            Ok(SweepPoint { label, cfg, runs })
        })
        .collect()
}

/// Writes each point to `dir/{param}={value}/`.
pub fn write_sweep(points: &[SweepPoint], dir: &Path) -> Result<()> {
    for p in points {
        write_experiment(&p.cfg, &p.runs, &dir.join(&p.label))?;
    }
    Ok(())
}
