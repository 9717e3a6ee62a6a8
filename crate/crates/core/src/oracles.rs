//! Finite-difference verifiers for gradients and Hessian block traces.
//!
//! These are deliberately brute force and only used by tests and debug checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::parallel::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdConfig {
    pub epsilon: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { epsilon: 1e-5 }
    }
}

impl FdConfig {
    fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 && self.epsilon.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", self.epsilon)))
        }
    }
}

fn central<F>(f: &F, x: &[f64], i: usize, eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    probe[i] = x[i] + eps;
    let up = f(&probe);
    probe[i] = x[i] - eps;
    let down = f(&probe);
    let g = (up - down) / (2.0 * eps);
    if g.is_finite() {
        Ok(g)
    } else {
        Err(Error::NonFinite { coordinate: i })
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_grad<F>(f: F, x: &[f64], cfg: &FdConfig) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    cfg.validate()?;
    parallel::map_indices(Exec::default(), x.len(), |i| central(&f, x, i, cfg.epsilon))
        .into_iter()
        .collect()
}

/// Central-difference gradient restricted to the listed coordinates.
pub fn fd_grad_at<F>(f: F, x: &[f64], coords: &[usize], cfg: &FdConfig) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    cfg.validate()?;
    if let Some(&bad) = coords.iter().find(|&&c| c >= x.len()) {
        return Err(Error::InvalidArgument(format!("coordinate {bad} out of range for {} parameters", x.len())));
    }
    parallel::map_indices(Exec::default(), coords.len(), |j| central(&f, x, coords[j], cfg.epsilon))
        .into_iter()
        .collect()
}

fn check_finite(m: Matrix) -> Result<Matrix> {
    match m.as_slice().iter().position(|v| !v.is_finite()) {
        Some(coordinate) => Err(Error::NonFinite { coordinate }),
        None => Ok(m),
    }
}

/// `T[s][s'] = Σ_t ∂²L/∂w_{s,t}∂w_{s',t}` from second differences of `loss_fn`.
///
/// Each mixed partial costs four loss evaluations; for smooth losses of
/// moderate magnitude a step near `1e-4` keeps roundoff below truncation.
pub fn fd_hessian_block_trace<L>(loss_fn: L, w: &Matrix, cfg: &FdConfig) -> Result<Matrix>
where
    L: Fn(&Matrix) -> f64 + Send + Sync,
{
    cfg.validate()?;
    let (k, d) = w.shape();
    let eps = cfg.epsilon;
    let entries = parallel::map_indices(Exec::default(), k * k, |idx| {
        let (s, s2) = (idx / k, idx % k);
        let mut total = 0.0;
        let mut probe = w.clone();
        for t in 0..d {
            let (a, b) = ((s, t), (s2, t));
            if s == s2 {
                let base = loss_fn(w);
                probe[a] = w[a] + eps;
                let up = loss_fn(&probe);
                probe[a] = w[a] - eps;
                let down = loss_fn(&probe);
                probe[a] = w[a];
                total += (up - 2.0 * base + down) / (eps * eps);
            } else {
                let mut eval = |da: f64, db: f64| {
                    probe[a] = w[a] + da;
                    probe[b] = w[b] + db;
                    let v = loss_fn(&probe);
                    probe[a] = w[a];
                    probe[b] = w[b];
                    v
                };
                let pp = eval(eps, eps);
                let pm = eval(eps, -eps);
                let mp = eval(-eps, eps);
                let mm = eval(-eps, -eps);
                total += (pp - pm - mp + mm) / (4.0 * eps * eps);
            }
        }
        total
    });
    check_finite(Matrix::from_vec(k, k, entries)?)
}

/// Same as [`fd_hessian_block_trace`] but differentiates an analytic gradient
/// `grad_fn(w)` (a `k x d` matrix) once, which is far less noisy.
pub fn fd_hessian_block_trace_from_grad<G>(grad_fn: G, w: &Matrix, cfg: &FdConfig) -> Result<Matrix>
where
    G: Fn(&Matrix) -> Matrix + Send + Sync,
{
    cfg.validate()?;
    let (k, d) = w.shape();
    let eps = cfg.epsilon;
    // Column (s', t) of the Hessian, then pick the matching t in each row block.
    let columns = parallel::map_indices(Exec::default(), k * d, |idx| {
        let (s2, t) = (idx / d, idx % d);
        let mut probe = w.clone();
        probe[(s2, t)] = w[(s2, t)] + eps;
        let up = grad_fn(&probe);
        probe[(s2, t)] = w[(s2, t)] - eps;
        let down = grad_fn(&probe);
        (0..k).map(|s| (up[(s, t)] - down[(s, t)]) / (2.0 * eps)).collect::<Vec<f64>>()
    });
    let mut out = Matrix::zeros(k, k);
    for (idx, col) in columns.into_iter().enumerate() {
        let s2 = idx / d;
        for (s, v) in col.into_iter().enumerate() {
            out[(s, s2)] += v;
        }
    }
    check_finite(out)
}
