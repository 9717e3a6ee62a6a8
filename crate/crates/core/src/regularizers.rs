//! Training penalties on the feature geometry and their unplug schedule.
//!
//! # Sign convention
//!
//! Both penalties are *subtracted* from the cross-entropy:
//!
//! ```text
//! L = L_CE − λ · NCC      (kind = ncc)
//! L = L_CE − λ · κ        (kind = flatness)
//! ```
//!
//! Minimizing `L` therefore *maximizes* the measure: the NCC penalty pushes
//! features away from collapse and the flatness penalty pushes the final layer
//! into sharp regions. The functions here return the measure and its gradient
//! with their natural sign; the caller injects `−λ · grad` into backprop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, class_stats, VarianceMode};
use crate::numkit::{self, dot, norm_sq, Matrix};
use crate::parallel::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    #[default]
    None,
    Ncc,
    Flatness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Always,
    /// Active for epochs `< E`, removed from epoch `E` on.
    UnplugAt(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub kind: RegKind,
    pub lambda_reg: f64,
    pub schedule: Schedule,
    /// Treat the softmax outputs as constants in the flatness gradient.
    pub stop_gradient: bool,
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!("reg.lambda_reg must be finite and >= 0, got {}", self.lambda_reg)));
        }
        Ok(())
    }
}

/// Coefficient in effect at `epoch`.
pub fn apply_schedule(cfg: &RegConfig, epoch: u64) -> f64 {
    if cfg.kind == RegKind::None {
        return 0.0;
    }
    match cfg.schedule {
        Schedule::Always => cfg.lambda_reg,
        Schedule::UnplugAt(e) if epoch < e => cfg.lambda_reg,
        Schedule::UnplugAt(_) => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NccReg {
    pub value: f64,
    /// `∂NCC/∂φ(x)`, one row per sample.
    pub grad_phi: Matrix,
}

/// NCC of the batch and its exact gradient with respect to every feature row.
///
/// With `D = ‖μ_c − μ_c'‖²` and `x` in class `c`:
/// `∂NCC/∂φ(x) = Σ_{c'≠c} [∂V_c/∂φ(x) / D − (V_c + V_c') · 2(μ_c − μ_c') / (n_c D²)]`.
pub fn ncc_reg(phi: &Matrix, labels: &[usize], num_classes: usize, mode: VarianceMode) -> Result<NccReg> {
    let stats = class_stats(phi, labels, num_classes)?;
    let value = geometry::ncc(&stats, mode)?;
    let v = stats.variances(mode);
    let k = num_classes;
    let d = phi.cols();
    let mut inv_dist_sum = vec![0.0; k];
    let mut pull = Matrix::zeros(k, d);
    for c in 0..k {
        for c2 in 0..k {
            if c == c2 {
                continue;
            }
            let diff: Vec<f64> = stats.means.row(c).iter().zip(stats.means.row(c2)).map(|(a, b)| a - b).collect();
            let dist = norm_sq(&diff);
            inv_dist_sum[c] += 1.0 / dist;
            let coef = (v[c] + v[c2]) / (dist * dist);
            for (acc, df) in pull.row_mut(c).iter_mut().zip(&diff) {
                *acc += coef * df;
            }
        }
    }
    let mut grad_phi = Matrix::zeros(phi.rows(), d);
    for (i, &c) in labels.iter().enumerate() {
        let nc = stats.counts[c] as f64;
        let dv = match mode {
            VarianceMode::SumVariance => 2.0,
            VarianceMode::MeanVariance => 2.0 / nc,
        };
        let (row, mean, pl) = (phi.row(i), stats.means.row(c), pull.row(c));
        for (t, g) in grad_phi.row_mut(i).iter_mut().enumerate() {
            *g = dv * (row[t] - mean[t]) * inv_dist_sum[c] - 2.0 / nc * pl[t];
        }
    }
    Ok(NccReg { value, grad_phi })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatnessReg {
    pub value: f64,
    pub grad_w: Matrix,
    /// Gradient with respect to the final-layer bias, which moves κ through the probabilities.
    pub grad_b: Vec<f64>,
    pub grad_phi: Matrix,
}

/// Relative flatness `κ` of the final layer and its total derivatives.
///
/// Per sample, `κ = (1/n) Σ_x ‖φ(x)‖² v(x)` with `v = Σ_s p_s G_ss − pᵀGp` and
/// `G = wwᵀ`. The probabilities depend on `w`, `b` and `φ` through the logits,
/// which contributes `∂κ/∂z = (‖φ‖²/n) p ∘ (g − pᵀg)`, `g_s = G_ss − 2(Gp)_s`.
/// With `stop_gradient` that path is dropped.
pub fn flatness_reg(w: &Matrix, phi: &Matrix, probs: &Matrix, stop_gradient: bool) -> Result<FlatnessReg> {
    flatness_reg_with(Exec::default(), w, phi, probs, stop_gradient)
}

pub fn flatness_reg_with(exec: Exec, w: &Matrix, phi: &Matrix, probs: &Matrix, stop_gradient: bool) -> Result<FlatnessReg> {
    let t = geometry::hessian_trace_blocks_with(exec, w, phi, probs)?;
    let value = geometry::relative_flatness(w, &t)?;
    let n = phi.rows();
    let (k, d) = w.shape();
    let inv_n = 1.0 / n as f64;
    let gram = numkit::matmul_nt(w, w)?;

    // Per sample: v(x) and ∂κ/∂z(x).
    let per_sample = parallel::map_indices(exec, n, |i| {
        let p = probs.row(i);
        let r = norm_sq(phi.row(i));
        let gp: Vec<f64> = (0..k).map(|s| dot(gram.row(s), p)).collect();
        let v = (0..k).map(|s| p[s] * gram[(s, s)]).sum::<f64>() - dot(p, &gp);
        let mut dz = vec![0.0; k];
        if !stop_gradient {
            let g: Vec<f64> = (0..k).map(|s| gram[(s, s)] - 2.0 * gp[s]).collect();
            let pg = dot(p, &g);
            for s in 0..k {
                dz[s] = r * inv_n * p[s] * (g[s] - pg);
            }
        }
        (v, dz)
    });
    let mut vs = Vec::with_capacity(n);
    let mut dz = Matrix::zeros(n, k);
    for (i, (v, row)) in per_sample.into_iter().enumerate() {
        vs.push(v);
        dz.row_mut(i).copy_from_slice(&row);
    }

    let mut grad_w = numkit::matmul_with(exec, &t, w)?.scale(2.0);
    let mut grad_b = vec![0.0; k];
    if !stop_gradient {
        grad_w.axpy(1.0, &numkit::matmul_tn_with(exec, &dz, phi)?)?;
        for i in 0..n {
            for (b, z) in grad_b.iter_mut().zip(dz.row(i)) {
                *b += z;
            }
        }
    }
    let mut grad_phi = numkit::matmul_with(exec, &dz, w)?;
    parallel::for_each_row(exec, grad_phi.as_mut_slice(), d, |i, row| {
        let c = 2.0 * inv_n * vs[i];
        for (g, x) in row.iter_mut().zip(phi.row(i)) {
            *g += c * x;
        }
    });
    Ok(FlatnessReg {
        value,
        grad_w,
        grad_b,
        grad_phi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use crate::oracles::{fd_grad, FdConfig};

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    fn assert_close(analytic: &[f64], fd: &[f64], tol: f64, floor: f64) {
        for (i, (a, b)) in analytic.iter().zip(fd).enumerate() {
            assert!(rel_err(*a, *b) < tol || (a - b).abs() < floor, "coord {i}: {a} vs {b}");
        }
    }

    #[test]
    fn schedule_boundaries() {
        let mut cfg = RegConfig {
            kind: RegKind::Flatness,
            lambda_reg: 0.5,
            schedule: Schedule::UnplugAt(100),
            stop_gradient: false,
        };
        assert_eq!(apply_schedule(&cfg, 99), 0.5);
        assert_eq!(apply_schedule(&cfg, 100), 0.0);
        assert_eq!(apply_schedule(&cfg, 5000), 0.0);
        cfg.schedule = Schedule::Always;
        for e in [0, 1, 100, u64::MAX] {
            assert_eq!(apply_schedule(&cfg, e), 0.5);
        }
        cfg.kind = RegKind::None;
        assert_eq!(apply_schedule(&cfg, 0), 0.0);
    }

    #[test]
    fn unplug_at_zero_never_applies() {
        let cfg = RegConfig {
            kind: RegKind::Ncc,
            lambda_reg: 1.0,
            schedule: Schedule::UnplugAt(0),
            stop_gradient: false,
        };
        assert_eq!(apply_schedule(&cfg, 0), 0.0);
    }

    #[test]
    fn negative_lambda_rejected() {
        let cfg = RegConfig {
            lambda_reg: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_toml_forms() {
        let c: RegConfig = toml::from_str("kind = \"flatness\"\nlambda_reg = 1e-4\nschedule = { unplug_at = 2000 }").unwrap();
        assert_eq!(c.schedule, Schedule::UnplugAt(2000));
        let c: RegConfig = toml::from_str("kind = \"ncc\"\nschedule = \"always\"").unwrap();
        assert_eq!(c.kind, RegKind::Ncc);
        assert!(toml::from_str::<RegConfig>("kind = \"ncc\"\nlambda = 1").is_err());
    }

    fn ncc_fd(phi: &Matrix, y: &[usize], k: usize, mode: VarianceMode) -> Vec<f64> {
        let (n, d) = phi.shape();
        fd_grad(
            |v| {
                let m = Matrix::from_vec(n, d, v.to_vec()).unwrap();
                geometry::ncc(&class_stats(&m, y, k).unwrap(), mode).unwrap()
            },
            phi.as_slice(),
            &FdConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn ncc_grad_matches_fd_both_modes() {
        for seed in 0..4 {
            let phi = numkit::random_matrix(&mut Rng::new(seed), 12, 4, 1.0);
            let y: Vec<usize> = (0..12).map(|i| (i * 5) % 3).collect();
            for mode in [VarianceMode::SumVariance, VarianceMode::MeanVariance] {
                let r = ncc_reg(&phi, &y, 3, mode).unwrap();
                assert_close(r.grad_phi.as_slice(), &ncc_fd(&phi, &y, 3, mode), 1e-4, 1e-9);
            }
        }
    }

    #[test]
    fn ncc_grad_unbalanced_classes() {
        let phi = numkit::random_matrix(&mut Rng::new(9), 9, 3, 2.0);
        let y = [0usize, 0, 0, 0, 0, 1, 1, 2, 2];
        let r = ncc_reg(&phi, &y, 3, VarianceMode::MeanVariance).unwrap();
        assert_close(r.grad_phi.as_slice(), &ncc_fd(&phi, &y, 3, VarianceMode::MeanVariance), 1e-4, 1e-9);
    }

    #[test]
    fn collapsed_classes_zero_value_and_grad() {
        let phi = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 2.0], vec![-1.0, 2.0]]).unwrap();
        let y = [0usize, 0, 1, 1];
        let r = ncc_reg(&phi, &y, 2, VarianceMode::MeanVariance).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_phi.as_slice().iter().all(|&g| g == 0.0));
        let fd = ncc_fd(&phi, &y, 2, VarianceMode::MeanVariance);
        assert!(fd.iter().all(|g| g.abs() < 1e-8));
    }

    #[test]
    fn single_samples_zero() {
        let phi = Matrix::from_rows(&[vec![0.3, 1.0], vec![2.0, -1.0]]).unwrap();
        let r = ncc_reg(&phi, &[0, 1], 2, VarianceMode::SumVariance).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_phi.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ncc_reg_coincident_means() {
        let phi = Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![0.0]]).unwrap();
        assert!(matches!(
            ncc_reg(&phi, &[0, 0, 1], 2, VarianceMode::MeanVariance),
            Err(Error::CoincidentMeans { .. })
        ));
    }

    struct Case {
        w: Matrix,
        b: Vec<f64>,
        phi: Matrix,
    }

    fn case(seed: u64, k: usize, d: usize, n: usize, logit_scale: f64) -> Case {
        let mut rng = Rng::new(seed);
        Case {
            w: numkit::random_matrix(&mut rng, k, d, logit_scale),
            b: numkit::rng_normal(&mut rng, k, 0.0, 1.0).unwrap(),
            phi: numkit::random_matrix(&mut rng, n, d, 1.0),
        }
    }

    fn kappa_of(w: &Matrix, b: &[f64], phi: &Matrix) -> f64 {
        let mut z = numkit::matmul_nt(phi, w).unwrap();
        for i in 0..z.rows() {
            z.row_mut(i).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let p = numkit::softmax_rows(&z);
        geometry::relative_flatness(w, &geometry::hessian_trace_blocks(w, phi, &p).unwrap()).unwrap()
    }

    fn probs_of(c: &Case) -> Matrix {
        let mut z = numkit::matmul_nt(&c.phi, &c.w).unwrap();
        for i in 0..z.rows() {
            z.row_mut(i).iter_mut().zip(&c.b).for_each(|(v, bb)| *v += bb);
        }
        numkit::softmax_rows(&z)
    }

    fn check_flatness_grads(c: &Case) {
        let (k, d) = c.w.shape();
        let n = c.phi.rows();
        let r = flatness_reg(&c.w, &c.phi, &probs_of(c), false).unwrap();
        assert!((r.value - kappa_of(&c.w, &c.b, &c.phi)).abs() < 1e-12 * r.value.abs().max(1.0));
        let cfg = FdConfig::default();
        let fw = fd_grad(|v| kappa_of(&Matrix::from_vec(k, d, v.to_vec()).unwrap(), &c.b, &c.phi), c.w.as_slice(), &cfg).unwrap();
        let fb = fd_grad(|v| kappa_of(&c.w, v, &c.phi), &c.b, &cfg).unwrap();
        let fp = fd_grad(|v| kappa_of(&c.w, &c.b, &Matrix::from_vec(n, d, v.to_vec()).unwrap()), c.phi.as_slice(), &cfg).unwrap();
        assert_close(r.grad_w.as_slice(), &fw, 1e-4, 1e-9);
        assert_close(&r.grad_b, &fb, 1e-4, 1e-9);
        assert_close(r.grad_phi.as_slice(), &fp, 1e-4, 1e-9);
    }

    #[test]
    fn flatness_grads_match_fd() {
        for seed in 0..5 {
            check_flatness_grads(&case(seed, 3, 5, 7, 1.0));
        }
        check_flatness_grads(&case(77, 6, 3, 10, 0.3));
    }

    #[test]
    fn stop_gradient_keeps_direct_terms() {
        let c = case(4, 3, 5, 7, 1.0);
        let p = probs_of(&c);
        let r = flatness_reg(&c.w, &c.phi, &p, true).unwrap();
        let t = geometry::hessian_trace_blocks(&c.w, &c.phi, &p).unwrap();
        let (k, d) = c.w.shape();
        // With T frozen, κ is a quadratic form in w.
        let fw = fd_grad(
            |v| geometry::relative_flatness(&Matrix::from_vec(k, d, v.to_vec()).unwrap(), &t).unwrap(),
            c.w.as_slice(),
            &FdConfig::default(),
        )
        .unwrap();
        assert_close(r.grad_w.as_slice(), &fw, 1e-6, 1e-10);
        assert!(r.grad_b.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn near_one_hot_vanishes() {
        let mut c = case(5, 3, 4, 6, 1.0);
        c.b = vec![0.0; 3];
        // Huge logit on one class per sample.
        let mut p = Matrix::zeros(6, 3);
        for i in 0..6 {
            for s in 0..3 {
                p[(i, s)] = if s == i % 3 { 1.0 - 2e-14 } else { 1e-14 };
            }
        }
        let r = flatness_reg(&c.w, &c.phi, &p, false).unwrap();
        assert!(r.value.abs() < 1e-10);
        let norm = r.grad_w.frobenius_sq() + r.grad_phi.frobenius_sq() + norm_sq(&r.grad_b);
        assert!(norm.sqrt() < 1e-8, "{norm}");
    }

    #[test]
    fn zero_weights_zero_value() {
        let c = case(6, 4, 3, 5, 1.0);
        let w = Matrix::zeros(4, 3);
        let p = numkit::softmax_rows(&Matrix::zeros(5, 4));
        assert_eq!(flatness_reg(&w, &c.phi, &p, false).unwrap().value, 0.0);
    }

    #[test]
    fn flatness_shape_mismatch() {
        let w = Matrix::zeros(3, 4);
        assert!(matches!(
            flatness_reg(&w, &Matrix::zeros(5, 2), &Matrix::zeros(5, 3), false),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn sequential_matches_default_bitwise() {
        let c = case(8, 5, 16, 40, 1.0);
        let p = probs_of(&c);
        assert_eq!(
            flatness_reg_with(Exec::Sequential, &c.w, &c.phi, &p, false).unwrap(),
            flatness_reg(&c.w, &c.phi, &p, false).unwrap()
        );
    }
}
