//! The train/measure loop.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{self, class_stats, VarianceMode};
use crate::harness::config::{ExperimentConfig, GeometrySplit};
use crate::harness::metrics::{mean_log, write_metrics_csv, MetricRecord, MetricsLog};
use crate::model::{self, adamw_step, backward, forward, init_mlp, ExtraGrads, ForwardCache, MlpParams, OptimState};
use crate::numkit::{self, Matrix, Rng};
use crate::oracles::{fd_grad_at, FdConfig};
use crate::parallel::{self, Exec};
use crate::regularizers::{apply_schedule, flatness_reg, ncc_reg, RegKind};
use crate::tasks::{generate_mod_dataset, split_dataset, Dataset};

const SPLIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const FD_STREAM: u64 = 3;

/// Outcome of one debug gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdCheck {
    pub step: usize,
    pub kind: RegKind,
    pub max_rel_err: f64,
}

/// NCC and angle deviation on the split not used for the main columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideGeometry {
    pub step: usize,
    pub ncc: f64,
    pub mean_angle_dev: f64,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub log: MetricsLog,
    pub params: MlpParams,
    pub fd_checks: Vec<FdCheck>,
    pub side_geometry: Vec<SideGeometry>,
}

/// The train/validation split for `seed`.
pub fn seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let full = generate_mod_dataset(&cfg.task_config(seed))?;
    split_dataset(&full, cfg.task.split_fraction, &mut Rng::derive(seed, SPLIT_STREAM))
}

fn geometry_of(phi: &Matrix, labels: &[usize], k: usize, mode: VarianceMode) -> Result<(f64, f64)> {
    let stats = class_stats(phi, labels, k)?;
    let ncc = geometry::ncc(&stats, mode)?;
    let dev = geometry::mean_angle_deviation(&geometry::pairwise_cosines(&stats)?);
    Ok((ncc, dev))
}

/// Evaluates every logged quantity for the current parameters.
pub fn measure(
    cfg: &ExperimentConfig,
    params: &MlpParams,
    train: &Dataset,
    val: &Dataset,
    step: usize,
    epoch: u64,
) -> Result<MetricRecord> {
    let (rec, _) = measure_with_side(cfg, params, train, val, step, epoch)?;
    Ok(rec)
}

fn measure_with_side(
    cfg: &ExperimentConfig,
    params: &MlpParams,
    train: &Dataset,
    val: &Dataset,
    step: usize,
    epoch: u64,
) -> Result<(MetricRecord, Option<SideGeometry>)> {
    let k = cfg.task.p;
    let tc = forward(params, &train.encoded)?;
    let vc = forward(params, &val.encoded)?;
    let train_loss = model::ce_loss(&tc, &train.labels)?;
    let val_loss = model::ce_loss(&vc, &val.labels)?;
    let (geo, geo_labels, other, other_labels) = match cfg.geometry_split {
        GeometrySplit::Train => (&tc, &train.labels, &vc, &val.labels),
        GeometrySplit::Validation => (&vc, &val.labels, &tc, &train.labels),
    };
    let (ncc, mean_angle_dev) = geometry_of(geo.phi(), geo_labels, k, cfg.ncc_mode)?;
    let w = &params.classifier().weight;
    let t = geometry::hessian_trace_blocks(w, geo.phi(), &geo.probs)?;
    let kappa = geometry::relative_flatness(w, &t)?;
    let kappa_simplified = geometry::simplified_flatness(w, &t)?;
    let representativeness = geometry::representativeness_kde(tc.phi(), vc.phi(), &cfg.kde)?;
    let side = if cfg.log_val_geometry {
        let (ncc, mean_angle_dev) = geometry_of(other.phi(), other_labels, k, cfg.ncc_mode)?;
        Some(SideGeometry {
            step,
            ncc,
            mean_angle_dev,
        })
    } else {
        None
    };
    let rec = MetricRecord {
        step,
        epoch,
        train_loss,
        val_loss,
        train_acc: model::accuracy(&tc, &train.labels),
        val_acc: model::accuracy(&vc, &val.labels),
        gen_gap: val_loss - train_loss,
        ncc,
        kappa,
        kappa_simplified,
        mean_angle_dev,
        representativeness,
        effective_reg_coeff: apply_schedule(&cfg.reg, epoch),
    };
    for (name, v) in [("train_loss", train_loss), ("val_loss", val_loss), ("kappa", kappa), ("ncc", ncc)] {
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("{name} is not finite")));
        }
    }
    Ok((rec, side))
}

/// Cycles through the training set in seeded shuffled order.
struct Batches {
    n: usize,
    size: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    rng: Rng,
}

impl Batches {
    fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size > n {
            return Err(Error::Config(format!("batch_size {batch_size} exceeds {n} training samples")));
        }
        let size = if batch_size == 0 { n } else { batch_size };
        let mut b = Batches {
            n,
            size,
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
            rng: Rng::derive(seed, BATCH_STREAM),
        };
        if size < n {
            b.rng.shuffle(&mut b.order);
        }
        Ok(b)
    }

    fn full(&self) -> bool {
        self.size == self.n
    }

    /// Indices of the next batch; completes the epoch when the order is exhausted.
    fn next(&mut self) -> Vec<usize> {
        let end = (self.pos + self.size).min(self.n);
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        if self.pos == self.n {
            self.pos = 0;
            self.epoch += 1;
            if !self.full() {
                self.rng.shuffle(&mut self.order);
            }
        }
        idx
    }
}

fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

fn sample_coords(rng: &mut Rng, n: usize, count: usize) -> Vec<usize> {
    (0..count.min(n)).map(|_| rng.below(n as u64) as usize).collect()
}

fn max_rel_err(analytic: &[f64], fd: &[f64], scale: f64) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6 * scale).max(1e-300))
        .fold(0.0, f64::max)
}

fn logits_from(phi: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut z = numkit::matmul_nt(phi, w).expect("shapes checked by caller");
    for i in 0..z.rows() {
        z.row_mut(i).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
    }
    z
}

fn kappa_at(w: &Matrix, b: &[f64], phi: &Matrix) -> f64 {
    let probs = numkit::softmax_rows(&logits_from(phi, w, b));
    geometry::hessian_trace_blocks(w, phi, &probs)
        .and_then(|t| geometry::relative_flatness(w, &t))
        .unwrap_or(f64::NAN)
}

fn fd_check(cfg: &ExperimentConfig, params: &MlpParams, cache: &ForwardCache, labels: &[usize], rng: &mut Rng, step: usize) -> Result<FdCheck> {
    let k = cfg.task.p;
    let phi = cache.phi();
    let (n, d) = phi.shape();
    let fd_cfg = FdConfig::default();
    let coords = cfg.debug.fd_coords;
    let err = match cfg.reg.kind {
        RegKind::None => 0.0,
        RegKind::Ncc => {
            let r = ncc_reg(phi, labels, k, cfg.ncc_mode)?;
            let idx = sample_coords(rng, n * d, coords);
            let fd = fd_grad_at(
                |v| {
                    let m = Matrix::from_vec(n, d, v.to_vec()).expect("same shape");
                    class_stats(&m, labels, k).and_then(|s| geometry::ncc(&s, cfg.ncc_mode)).unwrap_or(f64::NAN)
                },
                phi.as_slice(),
                &idx,
                &fd_cfg,
            )?;
            let an: Vec<f64> = idx.iter().map(|&i| r.grad_phi.as_slice()[i]).collect();
            let scale = r.grad_phi.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            max_rel_err(&an, &fd, scale)
        }
        RegKind::Flatness => {
            let layer = params.classifier();
            let (w, b) = (&layer.weight, &layer.bias);
            let r = flatness_reg(w, phi, &cache.probs, cfg.reg.stop_gradient)?;
            if cfg.reg.stop_gradient {
                // The frozen-probability gradient is not the derivative of κ; check it against a frozen T.
                let t = geometry::hessian_trace_blocks(w, phi, &cache.probs)?;
                let idx = sample_coords(rng, w.as_slice().len(), coords);
                let fd = fd_grad_at(
                    |v| geometry::relative_flatness(&Matrix::from_vec(k, d, v.to_vec()).expect("same shape"), &t).unwrap_or(f64::NAN),
                    w.as_slice(),
                    &idx,
                    &fd_cfg,
                )?;
                let an: Vec<f64> = idx.iter().map(|&i| r.grad_w.as_slice()[i]).collect();
                let scale = r.grad_w.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                max_rel_err(&an, &fd, scale)
            } else {
                let iw = sample_coords(rng, w.as_slice().len(), coords);
                let fw = fd_grad_at(
                    |v| kappa_at(&Matrix::from_vec(k, d, v.to_vec()).expect("same shape"), b, phi),
                    w.as_slice(),
                    &iw,
                    &fd_cfg,
                )?;
                let ip = sample_coords(rng, n * d, coords);
                let fp = fd_grad_at(
                    |v| kappa_at(w, b, &Matrix::from_vec(n, d, v.to_vec()).expect("same shape")),
                    phi.as_slice(),
                    &ip,
                    &fd_cfg,
                )?;
                let aw: Vec<f64> = iw.iter().map(|&i| r.grad_w.as_slice()[i]).collect();
                let ap: Vec<f64> = ip.iter().map(|&i| r.grad_phi.as_slice()[i]).collect();
                let sw = r.grad_w.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let sp = r.grad_phi.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                max_rel_err(&aw, &fw, sw).max(max_rel_err(&ap, &fp, sp))
            }
        }
    };
    if !(err <= cfg.debug.fd_tol) {
        return Err(Error::InvalidArgument(format!(
            "regularizer gradient disagrees with finite differences: max relative error {err:e}"
        )));
    }
    Ok(FdCheck {
        step,
        kind: cfg.reg.kind,
        max_rel_err: err,
    })
}

/// One training step; returns nothing but mutates `params` and `opt`.
fn train_step(
    cfg: &ExperimentConfig,
    params: &mut MlpParams,
    opt: &mut OptimState,
    x: &Matrix,
    y: &[usize],
    coeff: f64,
    debug: Option<(&mut Rng, &mut Vec<FdCheck>, usize)>,
) -> Result<()> {
    let cache = forward(params, x)?;
    let k = cfg.task.p;
    if let Some((rng, checks, step)) = debug {
        checks.push(fd_check(cfg, params, &cache, y, rng, step)?);
    }
    // The loss is CE − coeff · measure, so the injected gradients carry −coeff.
    let grads = match cfg.reg.kind {
        _ if coeff == 0.0 => backward(params, &cache, y, ExtraGrads::default())?,
        RegKind::None => backward(params, &cache, y, ExtraGrads::default())?,
        RegKind::Ncc => {
            let r = ncc_reg(cache.phi(), y, k, cfg.ncc_mode)?;
            let g = r.grad_phi.scale(-coeff);
            backward(
                params,
                &cache,
                y,
                ExtraGrads {
                    features: Some(&g),
                    ..Default::default()
                },
            )?
        }
        RegKind::Flatness => {
            let w = &params.classifier().weight;
            let r = flatness_reg(w, cache.phi(), &cache.probs, cfg.reg.stop_gradient)?;
            let gw = r.grad_w.scale(-coeff);
            let gb: Vec<f64> = r.grad_b.iter().map(|v| -coeff * v).collect();
            let gp = r.grad_phi.scale(-coeff);
            backward(
                params,
                &cache,
                y,
                ExtraGrads {
                    features: Some(&gp),
                    weight: Some(&gw),
                    bias: Some(&gb),
                },
            )?
        }
    };
    adamw_step(params, &grads, opt)?;
    if !params.is_finite() {
        return Err(Error::InvalidArgument("parameters became non-finite".into()));
    }
    Ok(())
}

/// Trains and measures one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let wrap = |step: usize| move |e: Error| Error::Run {
        seed,
        step,
        source: Box::new(e),
    };
    cfg.validate().map_err(wrap(0))?;
    let (train, val) = seed_data(cfg, seed).map_err(wrap(0))?;
    let mut params = init_mlp(&cfg.mlp_config(seed)).map_err(wrap(0))?;
    let mut opt = OptimState::new(&params, cfg.optimizer.adamw());
    let mut batches = Batches::new(train.len(), cfg.optimizer.batch_size, seed).map_err(wrap(0))?;
    let mut fd_rng = Rng::derive(seed, FD_STREAM);
    let mut log = MetricsLog::new();
    let mut fd_checks = Vec::new();
    let mut side_geometry = Vec::new();

    let mut record = |log: &mut MetricsLog, params: &MlpParams, step: usize, epoch: u64| -> Result<()> {
        let (rec, side) = measure_with_side(cfg, params, &train, &val, step, epoch)?;
        log.push(rec)?;
        side_geometry.extend(side);
        Ok(())
    };
    record(&mut log, &params, 0, 0).map_err(wrap(0))?;

    for step in 1..=cfg.steps {
        let coeff = apply_schedule(&cfg.reg, batches.epoch);
        let idx = batches.next();
        let (x, y) = if batches.full() {
            (train.encoded.clone(), train.labels.clone())
        } else {
            (gather_rows(&train.encoded, &idx), idx.iter().map(|&i| train.labels[i]).collect())
        };
        let debug = (cfg.debug.fd_check && coeff > 0.0 && step % cfg.debug.fd_every == 0)
            .then_some((&mut fd_rng, &mut fd_checks, step));
        train_step(cfg, &mut params, &mut opt, &x, &y, coeff, debug).map_err(wrap(step))?;
        if step % cfg.measure_every == 0 || step == cfg.steps {
            record(&mut log, &params, step, batches.epoch).map_err(wrap(step))?;
        }
    }
    Ok(SeedRun {
        seed,
        log,
        params,
        fd_checks,
        side_geometry,
    })
}

/// Runs every seed in the config. Seeds run concurrently unless `deterministic`
/// is set; either way each seed's output is identical.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let exec = if cfg.deterministic { Exec::Sequential } else { Exec::default() };
    parallel::map_indices(exec, cfg.seeds.len(), |i| run_seed(cfg, cfg.seeds[i]))
        .into_iter()
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `config.toml`, `mean.csv` and a `seed-{s}/` directory per seed with
/// `metrics.csv` and `checkpoint.txt` (plus `val_geometry.csv` and
/// `fd_checks.csv` when enabled).
pub fn write_experiment(cfg: &ExperimentConfig, runs: &[SeedRun], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.save(&dir.join("config.toml"))?;
    for run in runs {
        let sd = dir.join(format!("seed-{}", run.seed));
        std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        write_metrics_csv(&run.log, &sd.join("metrics.csv"))?;
        run.params.save(&sd.join("checkpoint.txt"))?;
        if cfg.log_val_geometry {
            let mut s = String::from("step,ncc,mean_angle_dev\n");
            for g in &run.side_geometry {
                s += &format!("{},{:.16e},{:.16e}\n", g.step, g.ncc, g.mean_angle_dev);
            }
            write_file(&sd.join("val_geometry.csv"), &s)?;
        }
        if cfg.debug.fd_check {
            let mut s = String::from("step,max_rel_err\n");
            for c in &run.fd_checks {
                s += &format!("{},{:.16e}\n", c.step, c.max_rel_err);
            }
            write_file(&sd.join("fd_checks.csv"), &s)?;
        }
    }
    let logs: Vec<&MetricsLog> = runs.iter().map(|r| &r.log).collect();
    write_metrics_csv(&mean_log(&logs)?, &dir.join("mean.csv"))
}

/// Recomputes the metric record for saved parameters on `seed`'s split.
/// The step and epoch columns of the result are zero.
pub fn analyze(cfg: &ExperimentConfig, params: &MlpParams, seed: u64) -> Result<MetricRecord> {
    if params.widths() != cfg.mlp_config(seed).layer_widths {
        return Err(Error::Config(format!(
            "checkpoint widths {:?} do not match config widths {:?}",
            params.widths(),
            cfg.mlp_config(seed).layer_widths
        )));
    }
    let (train, val) = seed_data(cfg, seed)?;
    measure(cfg, params, &train, &val, 0, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizers::{RegConfig, Schedule};

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            name: "tiny".into(),
            steps: 30,
            measure_every: 10,
            seeds: vec![3],
            ..Default::default()
        };
        c.task.p = 7;
        c.model.hidden = vec![24];
        c
    }

    #[test]
    fn zero_steps_single_record() {
        let c = ExperimentConfig { steps: 0, ..tiny() };
        let run = run_seed(&c, 1).unwrap();
        assert_eq!(run.log.len(), 1);
        assert_eq!(run.log.records()[0].step, 0);
    }

    #[test]
    fn measurement_stride_and_final() {
        let c = ExperimentConfig {
            steps: 25,
            ..tiny()
        };
        let run = run_seed(&c, 1).unwrap();
        let steps: Vec<usize> = run.log.records().iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25]);
        assert!(run.log.records().iter().all(|r| r.epoch == r.step as u64));
    }

    #[test]
    fn replay_is_identical() {
        let c = tiny();
        let a = run_seed(&c, 5).unwrap();
        let b = run_seed(&c, 5).unwrap();
        assert_eq!(a.log.to_csv_string(), b.log.to_csv_string());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn seeds_differ() {
        let c = tiny();
        assert_ne!(run_seed(&c, 1).unwrap().log, run_seed(&c, 2).unwrap().log);
    }

    #[test]
    fn concurrent_seeds_match_sequential() {
        let mut c = tiny();
        c.seeds = vec![1, 2, 3];
        let a = run_experiment(&c).unwrap();
        c.deterministic = false;
        let b = run_experiment(&c).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.log, y.log);
        }
    }

    #[test]
    fn schedule_column_drops_at_unplug() {
        let mut c = tiny();
        c.measure_every = 1;
        c.reg = RegConfig {
            kind: RegKind::Flatness,
            lambda_reg: 1e-4,
            schedule: Schedule::UnplugAt(12),
            stop_gradient: false,
        };
        let run = run_seed(&c, 1).unwrap();
        for r in run.log.records() {
            let expect = if r.epoch < 12 { 1e-4 } else { 0.0 };
            assert_eq!(r.effective_reg_coeff, expect, "step {}", r.step);
        }
    }

    #[test]
    fn debug_fd_checks_pass_for_both_regularizers() {
        for (kind, lambda_reg) in [(RegKind::Ncc, 1e-6), (RegKind::Flatness, 1e-4)] {
            let mut c = tiny();
            c.reg = RegConfig {
                kind,
                lambda_reg,
                schedule: Schedule::Always,
                stop_gradient: false,
            };
            c.debug.fd_check = true;
            c.debug.fd_every = 10;
            let run = run_seed(&c, 2).unwrap();
            assert_eq!(run.fd_checks.len(), 3, "{kind:?}");
            assert!(run.fd_checks.iter().all(|f| f.max_rel_err < 1e-4));
        }
    }

    #[test]
    fn minibatch_epochs() {
        let mut c = tiny();
        // 24 training samples, batches of 10 → 3 updates per epoch.
        c.optimizer.batch_size = 10;
        c.steps = 9;
        c.measure_every = 3;
        let run = run_seed(&c, 1).unwrap();
        let epochs: Vec<u64> = run.log.records().iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3]);
    }

    #[test]
    fn oversized_batch_rejected() {
        let mut c = tiny();
        c.optimizer.batch_size = 1000;
        assert!(matches!(run_seed(&c, 1), Err(Error::Run { step: 0, .. })));
    }

    #[test]
    fn divergence_reports_seed_and_step() {
        let mut c = tiny();
        c.optimizer.lr = 1e300;
        c.optimizer.weight_decay = 0.0;
        match run_seed(&c, 4) {
            Err(Error::Run { seed, step, .. }) => {
                assert_eq!(seed, 4);
                assert!(step >= 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn outputs_written() {
        let mut c = tiny();
        c.seeds = vec![1, 2];
        c.log_val_geometry = true;
        let runs = run_experiment(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_experiment(&c, &runs, dir.path()).unwrap();
        for s in [1, 2] {
            let sd = dir.path().join(format!("seed-{s}"));
            assert!(sd.join("metrics.csv").exists());
            assert!(sd.join("checkpoint.txt").exists());
            assert_eq!(std::fs::read_to_string(sd.join("val_geometry.csv")).unwrap().lines().count(), 5);
        }
        assert!(dir.path().join("mean.csv").exists());
        let back = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn analyze_reproduces_final_record() {
        let c = tiny();
        let run = run_seed(&c, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.txt");
        run.params.save(&path).unwrap();
        let loaded = MlpParams::load(&path).unwrap();
        let rec = analyze(&c, &loaded, 6).unwrap();
        let last = run.log.last().unwrap();
        assert_eq!(rec.kappa, last.kappa);
        assert_eq!(rec.val_acc, last.val_acc);
        assert_eq!(rec.representativeness, last.representativeness);
    }
}
