//! Experiment configuration, stored as TOML.
//!
//! ```toml
//! name = "grok-baseline"
//! steps = 4000              # optimizer updates per seed
//! measure_every = 50        # geometry stride, in steps
//! seeds = [1, 42, 15213]
//! ncc_mode = "mean_variance"        # or "sum_variance"
//! geometry_split = "train"          # features used for NCC, angles and κ
//! log_val_geometry = false          # also write NCC/angles on the validation split
//! deterministic = true              # false runs seeds concurrently
//! output_dir = "runs/grok-baseline"
//!
//! [task]
//! p = 31
//! op = "add"                # add | sub | mul
//! split_fraction = 0.5
//!
//! [model]
//! hidden = [512]            # input 2p and output p are implied
//! init_scale = 1.0
//!
//! [optimizer]
//! lr = 1e-2
//! beta1 = 0.9
//! beta2 = 0.98
//! eps = 1e-8
//! weight_decay = 1.0
//! batch_size = 0            # 0 = full batch
//!
//! [reg]
//! kind = "none"             # none | ncc | flatness
//! lambda_reg = 0.0
//! schedule = "always"       # or { unplug_at = 2000 } (epochs)
//! stop_gradient = false
//!
//! [kde]
//! bandwidth = 1.0
//! sample_weight = 0.02
//!
//! [debug]
//! fd_check = false
//! fd_every = 50
//! fd_coords = 12
//! fd_tol = 1e-4
//! ```
//!
//! Every key is optional and defaults to the value shown. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{KdeConfig, VarianceMode};
use crate::model::{AdamWConfig, MlpConfig};
use crate::regularizers::RegConfig;
use crate::tasks::{ModOp, ModTaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometrySplit {
    #[default]
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub p: usize,
    pub op: ModOp,
    pub split_fraction: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = ModTaskConfig::default();
        TaskSection {
            p: t.p,
            op: t.op,
            split_fraction: t.split_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![512],
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 1.0,
            batch_size: 0,
        }
    }
}

impl OptimizerSection {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DebugSection {
    /// Compare regularizer gradients against finite differences during training.
    pub fd_check: bool,
    pub fd_every: usize,
    pub fd_coords: usize,
    pub fd_tol: f64,
}

impl Default for DebugSection {
    fn default() -> Self {
        DebugSection {
            fd_check: false,
            fd_every: 50,
            fd_coords: 12,
            fd_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub steps: usize,
    pub measure_every: usize,
    pub seeds: Vec<u64>,
    pub ncc_mode: VarianceMode,
    pub geometry_split: GeometrySplit,
    pub log_val_geometry: bool,
    pub deterministic: bool,
    pub output_dir: PathBuf,
    pub task: TaskSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub reg: RegConfig,
    pub kde: KdeConfig,
    pub debug: DebugSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            steps: 4000,
            measure_every: 50,
            seeds: vec![1, 42, 15213],
            ncc_mode: VarianceMode::MeanVariance,
            geometry_split: GeometrySplit::Train,
            log_val_geometry: false,
            deterministic: true,
            output_dir: PathBuf::from("runs/experiment"),
            task: TaskSection::default(),
            model: ModelSection::default(),
            optimizer: OptimizerSection::default(),
            reg: RegConfig::default(),
            kde: KdeConfig::default(),
            debug: DebugSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn task_config(&self, seed: u64) -> ModTaskConfig {
        ModTaskConfig {
            p: self.task.p,
            op: self.task.op,
            split_fraction: self.task.split_fraction,
            seed,
        }
    }

    pub fn mlp_config(&self, seed: u64) -> MlpConfig {
        let p = self.task.p;
        let mut layer_widths = vec![2 * p];
        layer_widths.extend(&self.model.hidden);
        layer_widths.push(p);
        MlpConfig {
            layer_widths,
            init_scale: self.model.init_scale,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.measure_every == 0 {
            return bad("measure_every must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.task.p < 2 {
            return bad(format!("task.p must be >= 2, got {}", self.task.p));
        }
        if !(self.task.split_fraction > 0.0 && self.task.split_fraction < 1.0) {
            return bad(format!("task.split_fraction must lie in (0, 1), got {}", self.task.split_fraction));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return bad(format!("model.hidden must list positive widths, got {:?}", self.model.hidden));
        }
        if !(self.model.init_scale > 0.0) {
            return bad(format!("model.init_scale must be > 0, got {}", self.model.init_scale));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if !(self.kde.bandwidth > 0.0 && self.kde.sample_weight > 0.0) {
            return bad(format!("kde bandwidth and sample_weight must be > 0, got {:?}", self.kde));
        }
        if self.debug.fd_check && (self.debug.fd_every == 0 || self.debug.fd_coords == 0 || !(self.debug.fd_tol > 0.0)) {
            return bad(format!("invalid debug settings {:?}", self.debug));
        }
        self.reg.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizers::{RegKind, Schedule};

    #[test]
    fn empty_file_is_default() {
        let c = ExperimentConfig::from_toml_str("", Path::new("x.toml")).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn documented_example_parses() {
        let doc: String = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let c = ExperimentConfig::from_toml_str(&doc, Path::new("doc")).unwrap();
        let mut expect = ExperimentConfig {
            name: "grok-baseline".into(),
            output_dir: "runs/grok-baseline".into(),
            ..Default::default()
        };
        expect.reg.kind = RegKind::None;
        assert_eq!(c, expect);
    }

    #[test]
    fn roundtrip() {
        let mut c = ExperimentConfig::default();
        c.reg = RegConfig {
            kind: RegKind::Flatness,
            lambda_reg: 1e-4,
            schedule: Schedule::UnplugAt(2000),
            stop_gradient: true,
        };
        c.seeds = vec![7];
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = ExperimentConfig::from_toml_str("[optimizer]\nlearning_rate = 1", Path::new("bad.toml")).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        assert!(e.to_string().contains("bad.toml"));
        assert!(ExperimentConfig::from_toml_str("stepz = 3", Path::new("x")).is_err());
    }

    #[test]
    fn invariants_enforced() {
        assert!(ExperimentConfig::from_toml_str("measure_every = 0", Path::new("x")).is_err());
        assert!(ExperimentConfig::from_toml_str("seeds = []", Path::new("x")).is_err());
        assert!(ExperimentConfig::from_toml_str("[reg]\nlambda_reg = -1.0", Path::new("x")).is_err());
    }

    #[test]
    fn widths_from_task() {
        let c = ExperimentConfig::default();
        assert_eq!(c.mlp_config(3).layer_widths, vec![62, 512, 31]);
    }
}
