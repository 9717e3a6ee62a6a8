//! Modular-arithmetic classification tasks.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModOp {
    Add,
    Sub,
    Mul,
}

impl ModOp {
    pub fn apply(self, a: usize, b: usize, p: usize) -> usize {
        match self {
            ModOp::Add => (a + b) % p,
            ModOp::Sub => (a + p - b % p) % p,
            ModOp::Mul => (a * b) % p,
        }
    }
}

impl fmt::Display for ModOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModOp::Add => "add",
            ModOp::Sub => "sub",
            ModOp::Mul => "mul",
        })
    }
}

impl FromStr for ModOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(ModOp::Add),
            "sub" => Ok(ModOp::Sub),
            "mul" => Ok(ModOp::Mul),
            other => Err(Error::InvalidArgument(format!("unknown op '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModTaskConfig {
    /// Modulus, also the class count.
    pub p: usize,
    pub op: ModOp,
    /// Fraction of all pairs placed in the training split.
    pub split_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModTaskConfig {
    fn default() -> Self {
        ModTaskConfig {
            p: 31,
            op: ModOp::Add,
            split_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Full,
    Train,
    Validation,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Full => "full",
            Role::Train => "train",
            Role::Validation => "validation",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub p: usize,
    pub inputs: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    /// One-hot rows of width `2p`.
    pub encoded: Matrix,
    pub role: Role,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn subset(&self, idx: &[usize], role: Role) -> Result<Dataset> {
        let inputs: Vec<_> = idx.iter().map(|&i| self.inputs[i]).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        let encoded = encode_pairs(self.p, &inputs)?;
        Ok(Dataset {
            p: self.p,
            inputs,
            labels,
            encoded,
            role,
        })
    }
}

/// All `p²` pairs in lexicographic order with their labels.
pub fn generate_mod_dataset(cfg: &ModTaskConfig) -> Result<Dataset> {
    let p = cfg.p;
    if p < 2 {
        return Err(Error::InvalidArgument(format!("modulus must be >= 2, got {p}")));
    }
    let inputs: Vec<(usize, usize)> = (0..p).flat_map(|a| (0..p).map(move |b| (a, b))).collect();
    let labels = inputs.iter().map(|&(a, b)| cfg.op.apply(a, b, p)).collect();
    let encoded = encode_pairs(p, &inputs)?;
    Ok(Dataset {
        p,
        inputs,
        labels,
        encoded,
        role: Role::Full,
    })
}

/// Seeded permutation split; the training side gets `floor(fraction * n)` samples.
/// Each side keeps the original sample order.
pub fn split_dataset(d: &Dataset, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = d.len();
    let n_train = (fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "split fraction {fraction} leaves an empty side for {n} samples"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let mut train_idx = perm[..n_train].to_vec();
    let mut val_idx = perm[n_train..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((d.subset(&train_idx, Role::Train)?, d.subset(&val_idx, Role::Validation)?))
}

pub fn encode_inputs(d: &Dataset) -> Result<Matrix> {
    encode_pairs(d.p, &d.inputs)
}

/// One-hot concatenation: `a` at column `a`, `b` at column `p + b`.
pub fn encode_pairs(p: usize, pairs: &[(usize, usize)]) -> Result<Matrix> {
    let mut m = Matrix::zeros(pairs.len(), 2 * p);
    for (i, &(a, b)) in pairs.iter().enumerate() {
        if a >= p || b >= p {
            return Err(Error::InvalidArgument(format!(
                "token pair ({a}, {b}) out of range for p = {p}"
            )));
        }
        m[(i, a)] = 1.0;
        m[(i, p + b)] = 1.0;
    }
    Ok(m)
}

/// Inverse of [`encode_pairs`] for a single row.
pub fn decode_row(p: usize, row: &[f64]) -> Option<(usize, usize)> {
    if row.len() != 2 * p {
        return None;
    }
    let a = row[..p].iter().position(|&x| x == 1.0)?;
    let b = row[p..].iter().position(|&x| x == 1.0)?;
    Some((a, b))
}

/// Writes `a,b,label,role` rows for each dataset in turn.
pub fn write_dataset_csv(path: &Path, parts: &[&Dataset]) -> Result<()> {
    let mut out = String::from("a,b,label,role\n");
    for d in parts {
        for (&(a, b), &y) in d.inputs.iter().zip(&d.labels) {
            out.push_str(&format!("{a},{b},{y},{}\n", d.role));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
