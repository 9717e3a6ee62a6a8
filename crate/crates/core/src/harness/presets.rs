//! Named experiments.
//!
//! | preset             | what it runs                                                    |
//! |--------------------|-----------------------------------------------------------------|
//! | `grok-baseline`    | p = 31 addition, 50/50 split, one hidden layer of 512, AdamW    |
//! | `ncc-reg`          | baseline with the collapse-suppressing NCC penalty              |
//! | `sharp-reg-unplug` | baseline with the sharpness penalty, removed at epoch 2000      |
//! | `rep-track`        | baseline that also logs validation-split NCC and angles         |
//! | `etf-verify`       | no training: flatness bound and collapse checks on exact ETFs   |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{build_etf, check_nc, prop1_bound, EtfConfig, NcChecks};
use crate::harness::config::ExperimentConfig;
use crate::regularizers::{RegConfig, RegKind, Schedule};

pub const PRESETS: &[&str] = &["grok-baseline", "ncc-reg", "sharp-reg-unplug", "rep-track", "etf-verify"];

#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    Train(ExperimentConfig),
    EtfVerify(EtfGrid),
}

fn named(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        output_dir: PathBuf::from("runs").join(name),
        ..Default::default()
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    let cfg = match name {
        "grok-baseline" => named(name),
        "ncc-reg" => ExperimentConfig {
            reg: RegConfig {
                kind: RegKind::Ncc,
                lambda_reg: 1e-8,
                schedule: Schedule::Always,
                stop_gradient: false,
            },
            ..named(name)
        },
        "sharp-reg-unplug" => ExperimentConfig {
            reg: RegConfig {
                kind: RegKind::Flatness,
                lambda_reg: 1e-4,
                schedule: Schedule::UnplugAt(2000),
                stop_gradient: false,
            },
            ..named(name)
        },
        "rep-track" => ExperimentConfig {
            log_val_geometry: true,
            ..named(name)
        },
        "etf-verify" => return Ok(Preset::EtfVerify(EtfGrid::default())),
        _ => {
            return Err(Error::Config(format!(
                "unknown preset {name:?}; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(Preset::Train(cfg))
}

/// Training preset by name; `etf-verify` is rejected.
pub fn train_preset(name: &str) -> Result<ExperimentConfig> {
    match preset(name)? {
        Preset::Train(c) => Ok(c),
        Preset::EtfVerify(_) => Err(Error::Config(format!("{name} does not train; use etf-check"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtfGrid {
    pub lambdas: Vec<f64>,
    pub ks: Vec<usize>,
    pub radii: Vec<f64>,
    /// Feature dimension is `k + extra_dims`.
    pub extra_dims: usize,
    pub bias_base: f64,
    pub seed: u64,
    pub tol: f64,
}

impl Default for EtfGrid {
    fn default() -> Self {
        EtfGrid {
            lambdas: vec![1.0, 2.0, 4.0, 8.0],
            ks: vec![2, 3, 10],
            radii: vec![0.5, 1.0, 2.0],
            extra_dims: 2,
            bias_base: 0.5,
            seed: 0,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EtfRow {
    pub k: usize,
    pub radius: f64,
    pub lambda: f64,
    /// κ of the ETF with features centered at the origin.
    pub kappa: f64,
    pub bound: f64,
    /// Collapse predicates on the ETF shifted by a random global mean.
    pub nc: NcChecks,
    pub bias_residual: f64,
}

impl EtfRow {
    pub fn bound_holds(&self) -> bool {
        self.kappa <= self.bound
    }
}

/// Evaluates every `(k, M, λ)` cell. κ is measured on the centered
/// construction, matching the bound's `‖φ‖ = M`; the collapse checks and the
/// bias identity use a seeded nonzero global mean.
pub fn run_etf_grid(grid: &EtfGrid) -> Result<Vec<EtfRow>> {
    let mut rows = Vec::new();
    for &k in &grid.ks {
        for &radius in &grid.radii {
            for &lambda in &grid.lambdas {
                let base = EtfConfig {
                    k,
                    d: k + grid.extra_dims,
                    radius,
                    lambda,
                    bias_base: grid.bias_base,
                    center_scale: 0.0,
                    seed: grid.seed,
                };
                let centered = build_etf(&base)?;
                let shifted = build_etf(&EtfConfig {
                    center_scale: 1.0,
                    ..base
                })?;
                rows.push(EtfRow {
                    k,
                    radius,
                    lambda,
                    kappa: centered.kappa(),
                    bound: prop1_bound(lambda, k, radius),
                    nc: check_nc(
                        &shifted.means,
                        &shifted.global_mean,
                        &shifted.w,
                        &shifted.b,
                        &shifted.features,
                        &shifted.labels,
                        grid.tol,
                    ),
                    bias_residual: shifted.bias_residual(lambda, grid.bias_base),
                });
            }
        }
    }
    Ok(rows)
}

pub fn etf_csv(rows: &[EtfRow]) -> String {
    let mut s = String::from("k,radius,lambda,kappa,bound,bound_holds,nc1,nc2,nc3,nc4,bias_residual\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{},{},{},{:.16e}",
            r.k,
            r.radius,
            r.lambda,
            r.kappa,
            r.bound,
            r.bound_holds(),
            r.nc.nc1,
            r.nc.nc2,
            r.nc.nc3,
            r.nc.nc4,
            r.bias_residual
        )
        .unwrap();
    }
    s
}

pub fn write_etf_csv(rows: &[EtfRow], path: &Path) -> Result<()> {
    std::fs::write(path, etf_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_resolve() {
        for name in PRESETS {
            let p = preset(name).unwrap();
            if let Preset::Train(c) = p {
                c.validate().unwrap();
                assert_eq!(c.name, *name);
                assert_eq!(c.seeds, vec![1, 42, 15213]);
            }
        }
        assert!(preset("grok").is_err());
        assert!(train_preset("etf-verify").is_err());
    }

    #[test]
    fn unplug_preset_schedule() {
        let c = train_preset("sharp-reg-unplug").unwrap();
        assert_eq!(c.reg.schedule, Schedule::UnplugAt(2000));
        assert_eq!(c.steps, 4000);
    }

    #[test]
    fn etf_grid_rows_pass() {
        let rows = run_etf_grid(&EtfGrid::default()).unwrap();
        assert_eq!(rows.len(), 36);
        for r in &rows {
            assert!(r.bound_holds(), "{r:?}");
            assert!(r.nc.all(), "{r:?}");
            assert!(r.bias_residual <= 1e-10);
        }
        let csv = etf_csv(&rows);
        assert_eq!(csv.lines().count(), 37);
    }
}
