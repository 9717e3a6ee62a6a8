//! Geometry of penultimate-layer features and of the final-layer loss surface.
//!
//! * Clustering: [`class_stats`], [`ncc`], [`pairwise_cosines`].
//! * Flatness: [`hessian_trace_blocks`] gives `T[s][s'] = Tr(H_{s,s'})` for the
//!   mean softmax cross-entropy with respect to the classifier rows `w_s`;
//!   [`relative_flatness`] contracts it with the Gram matrix of `w`, and
//!   [`simplified_flatness`] is the `‖w‖² Tr(H)` upper bound.
//! * Collapse limit: [`build_etf`] constructs an exactly collapsed network,
//!   [`check_nc`] tests the four collapse conditions and [`prop1_bound`]
//!   evaluates the closed-form flatness bound in that limit.
//! * Coverage: [`representativeness_kde`].
//!
//! The bias of the final layer is excluded from every flatness quantity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;
use crate::numkit::{self, dot, norm_sq, Matrix, Rng};
use crate::parallel::{self, Exec};

/// How the within-class spread `V_c` is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// `V_c = Σ_{x∈D_c} ‖φ(x) − μ_c‖²`
    SumVariance,
    /// `V_c = (1/|D_c|) Σ_{x∈D_c} ‖φ(x) − μ_c‖²`
    #[default]
    MeanVariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    /// `k x d` class means.
    pub means: Matrix,
    pub counts: Vec<usize>,
    /// Sum-mode spread per class.
    pub var_sum: Vec<f64>,
    pub global_mean: Vec<f64>,
    /// `‖μ_c − μ_g‖` per class.
    pub radii: Vec<f64>,
}

impl ClassStats {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn variances(&self, mode: VarianceMode) -> Vec<f64> {
        match mode {
            VarianceMode::SumVariance => self.var_sum.clone(),
            VarianceMode::MeanVariance => self
                .var_sum
                .iter()
                .zip(&self.counts)
                .map(|(v, &n)| v / n as f64)
                .collect(),
        }
    }

    /// `μ_c − μ_g` as rows.
    pub fn centered_means(&self) -> Matrix {
        let mut c = self.means.clone();
        for i in 0..c.rows() {
            for (v, g) in c.row_mut(i).iter_mut().zip(&self.global_mean) {
                *v -= g;
            }
        }
        c
    }
}

fn check_rows(op: &'static str, phi: &Matrix, labels: &[usize]) -> Result<()> {
    if phi.rows() != labels.len() {
        return Err(Error::shape(op, format!("features {}", phi.shape_str()), format!("{} labels", labels.len())));
    }
    Ok(())
}

pub fn class_stats(phi: &Matrix, labels: &[usize], num_classes: usize) -> Result<ClassStats> {
    check_rows("class_stats", phi, labels)?;
    let d = phi.cols();
    let mut means = Matrix::zeros(num_classes, d);
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {num_classes} classes")));
        }
        counts[y] += 1;
        for (m, v) in means.row_mut(y).iter_mut().zip(phi.row(i)) {
            *m += v;
        }
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    for c in 0..num_classes {
        let inv = 1.0 / counts[c] as f64;
        means.row_mut(c).iter_mut().for_each(|m| *m *= inv);
    }
    let mut var_sum = vec![0.0; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        var_sum[y] += phi
            .row(i)
            .iter()
            .zip(means.row(y))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    let n = labels.len() as f64;
    let mut global_mean = vec![0.0; d];
    for i in 0..phi.rows() {
        for (g, v) in global_mean.iter_mut().zip(phi.row(i)) {
            *g += v;
        }
    }
    global_mean.iter_mut().for_each(|g| *g /= n);
    let radii = (0..num_classes)
        .map(|c| {
            means
                .row(c)
                .iter()
                .zip(&global_mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(ClassStats {
        means,
        counts,
        var_sum,
        global_mean,
        radii,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Neural collapse clustering, summed over ordered class pairs:
/// `Σ_{c≠c'} (V_c + V_c') / (2 ‖μ_c − μ_c'‖²)`.
pub fn ncc(stats: &ClassStats, mode: VarianceMode) -> Result<f64> {
    let v = stats.variances(mode);
    let k = stats.classes();
    let mut total = 0.0;
    for c in 0..k {
        for c2 in 0..k {
            if c == c2 {
                continue;
            }
            let dist = sq_dist(stats.means.row(c), stats.means.row(c2));
            if dist == 0.0 {
                return Err(Error::CoincidentMeans {
                    a: c.min(c2),
                    b: c.max(c2),
                });
            }
            total += (v[c] + v[c2]) / (2.0 * dist);
        }
    }
    Ok(total)
}

/// Ideal pairwise cosine of a centered simplex with `k` vertices.
pub fn simplex_target(k: usize) -> f64 {
    -1.0 / (k as f64 - 1.0)
}

/// Cosines between centered class means.
pub fn pairwise_cosines(stats: &ClassStats) -> Result<Matrix> {
    let centered = stats.centered_means();
    let k = stats.classes();
    let norms: Vec<f64> = (0..k).map(|c| norm_sq(centered.row(c)).sqrt()).collect();
    if let Some(class) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroCenteredMean { class });
    }
    let mut out = Matrix::identity(k);
    for c in 0..k {
        for c2 in c + 1..k {
            let cos = dot(centered.row(c), centered.row(c2)) / (norms[c] * norms[c2]);
            out[(c, c2)] = cos;
            out[(c2, c)] = cos;
        }
    }
    Ok(out)
}

/// Mean of `|cos − (−1/(k−1))|` over unordered class pairs.
pub fn mean_angle_deviation(cosines: &Matrix) -> f64 {
    let k = cosines.rows();
    if k < 2 {
        return 0.0;
    }
    let target = simplex_target(k);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for c in 0..k {
        for c2 in c + 1..k {
            total += (cosines[(c, c2)] - target).abs();
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn check_flatness_shapes(op: &'static str, w: &Matrix, phi: &Matrix, probs: &Matrix) -> Result<()> {
    if w.cols() != phi.cols() {
        return Err(Error::shape(op, format!("w {}", w.shape_str()), format!("phi {}", phi.shape_str())));
    }
    if probs.rows() != phi.rows() || probs.cols() != w.rows() {
        return Err(Error::shape(
            op,
            format!("probs {}", probs.shape_str()),
            format!("expected {}x{}", phi.rows(), w.rows()),
        ));
    }
    Ok(())
}

/// Traces of the `d x d` Hessian blocks of the mean cross-entropy with respect
/// to classifier rows: `T[s][s'] = (1/n) Σ_x (p_s δ_{ss'} − p_s p_s') ‖φ(x)‖²`.
pub fn hessian_trace_blocks(w: &Matrix, phi: &Matrix, probs: &Matrix) -> Result<Matrix> {
    hessian_trace_blocks_with(Exec::default(), w, phi, probs)
}

pub fn hessian_trace_blocks_with(exec: Exec, w: &Matrix, phi: &Matrix, probs: &Matrix) -> Result<Matrix> {
    check_flatness_shapes("hessian_trace_blocks", w, phi, probs)?;
    let n = phi.rows();
    let k = w.rows();
    let per_sample = parallel::map_indices(exec, n, |i| {
        let r = norm_sq(phi.row(i));
        let p = probs.row(i);
        let mut block = vec![0.0; k * k];
        for s in 0..k {
            for s2 in 0..k {
                let diag = if s == s2 { p[s] } else { 0.0 };
                block[s * k + s2] = (diag - p[s] * p[s2]) * r;
            }
        }
        block
    });
    let mut t = Matrix::zeros(k, k);
    for block in per_sample {
        for (acc, v) in t.as_mut_slice().iter_mut().zip(block) {
            *acc += v;
        }
    }
    let inv_n = 1.0 / n as f64;
    t.as_mut_slice().iter_mut().for_each(|v| *v *= inv_n);
    Ok(t)
}

/// `κ = Σ_{s,s'} ⟨w_s, w_s'⟩ T[s][s']`.
pub fn relative_flatness(w: &Matrix, t: &Matrix) -> Result<f64> {
    if t.rows() != w.rows() || t.cols() != w.rows() {
        return Err(Error::shape("relative_flatness", format!("w {}", w.shape_str()), format!("T {}", t.shape_str())));
    }
    let k = w.rows();
    let mut total = 0.0;
    for s in 0..k {
        for s2 in 0..k {
            total += dot(w.row(s), w.row(s2)) * t[(s, s2)];
        }
    }
    Ok(total)
}

/// `‖w‖_F² · Σ_s T[s][s]`, an upper bound on [`relative_flatness`].
pub fn simplified_flatness(w: &Matrix, t: &Matrix) -> Result<f64> {
    if t.rows() != w.rows() || t.cols() != w.rows() {
        return Err(Error::shape("simplified_flatness", format!("w {}", w.shape_str()), format!("T {}", t.shape_str())));
    }
    Ok(w.frobenius_sq() * t.trace())
}

/// Logit margin between the true class and any other class in the collapse limit.
pub fn nc_margin(k: usize, radius: f64) -> f64 {
    radius * radius * k as f64 / (k as f64 - 1.0)
}

/// Flatness bound for a collapsed network with classifier scale `lambda`,
/// `k` classes and class-mean radius `radius`:
/// `λ² k³ M⁴ e^{−λδ} / (1 + (k−1) e^{−λδ})²` with `δ = M² k/(k−1)`.
///
/// The derivation takes `‖φ(x)‖ = M`, i.e. features centered at the origin.
pub fn prop1_bound(lambda: f64, k: usize, radius: f64) -> f64 {
    let kf = k as f64;
    let q = (-lambda * nc_margin(k, radius)).exp();
    let denom = 1.0 + (kf - 1.0) * q;
    lambda * lambda * kf.powi(3) * radius.powi(4) * q / (denom * denom)
}

/// Softmax output `(ŷ_true, ŷ_other)` of a collapsed network.
pub fn nc_limit_probs(lambda: f64, k: usize, radius: f64) -> (f64, f64) {
    let q = (-lambda * nc_margin(k, radius)).exp();
    let denom = 1.0 + (k as f64 - 1.0) * q;
    (1.0 / denom, q / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtfConfig {
    pub k: usize,
    pub d: usize,
    /// Distance `M` of every class mean from the global mean.
    pub radius: f64,
    /// Classifier scale `λ` in `w_j = λ(μ_j − μ_g)`.
    pub lambda: f64,
    /// The shared value of `b_j + λ(μ_j − μ_g)ᵀμ_g`.
    pub bias_base: f64,
    /// Standard deviation of the random global mean; 0 centers the features.
    pub center_scale: f64,
    pub seed: u64,
}

impl Default for EtfConfig {
    fn default() -> Self {
        EtfConfig {
            k: 3,
            d: 4,
            radius: 1.0,
            lambda: 1.0,
            bias_base: 0.0,
            center_scale: 1.0,
            seed: 0,
        }
    }
}

/// An exactly collapsed final layer and its features.
#[derive(Debug, Clone, PartialEq)]
pub struct Etf {
    pub means: Matrix,
    pub global_mean: Vec<f64>,
    pub w: Matrix,
    pub b: Vec<f64>,
    /// One feature row per class, equal to its mean.
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Etf {
    pub fn logits(&self) -> Matrix {
        let mut z = numkit::matmul_nt(&self.features, &self.w).expect("consistent shapes");
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        z
    }

    pub fn probs(&self) -> Matrix {
        numkit::softmax_rows(&self.logits())
    }

    /// Relative flatness of the constructed network on its own features.
    pub fn kappa(&self) -> f64 {
        let t = hessian_trace_blocks(&self.w, &self.features, &self.probs()).expect("consistent shapes");
        relative_flatness(&self.w, &t).expect("consistent shapes")
    }

    /// `max_j |b_j + λ(μ_j − μ_g)ᵀμ_g − bias_base|`.
    pub fn bias_residual(&self, lambda: f64, bias_base: f64) -> f64 {
        (0..self.means.rows())
            .map(|j| {
                let u: Vec<f64> = self.means.row(j).iter().zip(&self.global_mean).map(|(m, g)| m - g).collect();
                (self.b[j] + lambda * dot(&u, &self.global_mean) - bias_base).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Simplex of `k` centered standard basis vectors, scaled to radius `M`,
/// placed in the first `k` coordinates of `R^d` and shifted by a seeded
/// global mean.
pub fn build_etf(cfg: &EtfConfig) -> Result<Etf> {
    let EtfConfig {
        k,
        d,
        radius,
        lambda,
        bias_base,
        center_scale,
        seed,
    } = *cfg;
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need k >= 2 classes, got {k}")));
    }
    if d < k {
        return Err(Error::InvalidArgument(format!("feature dimension {d} < class count {k}")));
    }
    if !(radius > 0.0 && lambda > 0.0 && center_scale >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need radius > 0, lambda > 0, center_scale >= 0; got {radius}, {lambda}, {center_scale}"
        )));
    }
    let kf = k as f64;
    // ‖e_c − 1/k‖ = sqrt((k−1)/k)
    let unit = radius / ((kf - 1.0) / kf).sqrt();
    let centered = Matrix::from_fn(k, d, |c, t| {
        if t >= k {
            0.0
        } else if t == c {
            (1.0 - 1.0 / kf) * unit
        } else {
            -unit / kf
        }
    });
    let global_mean = numkit::rng_normal(&mut Rng::new(seed), d, 0.0, center_scale)?;
    let means = Matrix::from_fn(k, d, |c, t| centered[(c, t)] + global_mean[t]);
    let w = centered.scale(lambda);
    let b = (0..k).map(|j| bias_base - lambda * dot(centered.row(j), &global_mean)).collect();
    Ok(Etf {
        features: means.clone(),
        means,
        global_mean,
        w,
        b,
        labels: (0..k).collect(),
    })
}

/// Outcome of the four collapse predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NcChecks {
    pub nc1: bool,
    pub nc2: bool,
    pub nc3: bool,
    pub nc4: bool,
}

impl NcChecks {
    pub fn all(&self) -> bool {
        self.nc1 && self.nc2 && self.nc3 && self.nc4
    }
}

const NC4_PROBES: usize = 256;
const NC4_PROBE_SEED: u64 = 0x4e43_3450;

/// Checks the collapse conditions at absolute tolerance `tol`.
///
/// NC3 fits `λ` by least squares; NC4 compares classifier argmax with
/// nearest-mean argmin on every feature row, every class mean and 256 seeded
/// probes drawn uniformly from the bounding box of the means.
#[allow(clippy::too_many_arguments)]
pub fn check_nc(
    means: &Matrix,
    global_mean: &[f64],
    w: &Matrix,
    b: &[f64],
    phi: &Matrix,
    labels: &[usize],
    tol: f64,
) -> NcChecks {
    let k = means.rows();
    let d = means.cols();
    let shapes_ok = w.shape() == (k, d)
        && b.len() == k
        && global_mean.len() == d
        && phi.cols() == d
        && phi.rows() == labels.len()
        && labels.iter().all(|&y| y < k)
        && k >= 2;
    if !shapes_ok {
        return NcChecks {
            nc1: false,
            nc2: false,
            nc3: false,
            nc4: false,
        };
    }

    let nc1 = (0..phi.rows()).all(|i| sq_dist(phi.row(i), means.row(labels[i])).sqrt() <= tol);

    let centered = Matrix::from_fn(k, d, |c, t| means[(c, t)] - global_mean[t]);
    let radii: Vec<f64> = (0..k).map(|c| norm_sq(centered.row(c)).sqrt()).collect();
    let m = radii.iter().sum::<f64>() / k as f64;
    let target = -m * m / (k as f64 - 1.0);
    let equal_radii = radii.iter().all(|r| (r - m).abs() <= tol);
    let equiangular = (0..k).all(|c| (c + 1..k).all(|c2| (dot(centered.row(c), centered.row(c2)) - target).abs() <= tol));
    let nc2 = m > 0.0 && equal_radii && equiangular;

    let uu = centered.frobenius_sq();
    let wu: f64 = w.as_slice().iter().zip(centered.as_slice()).map(|(a, b)| a * b).sum();
    let lambda = if uu > 0.0 { wu / uu } else { 0.0 };
    let nc3 = lambda > 0.0 && (0..k).all(|j| sq_dist(w.row(j), &centered.row(j).iter().map(|u| lambda * u).collect::<Vec<_>>()).sqrt() <= tol);

    let decide = |h: &[f64]| {
        let logits: Vec<f64> = (0..k).map(|j| dot(w.row(j), h) + b[j]).collect();
        let dists: Vec<f64> = (0..k).map(|j| -sq_dist(h, means.row(j))).collect();
        argmax(&logits) == argmax(&dists)
    };
    let mut nc4 = (0..phi.rows()).all(|i| decide(phi.row(i))) && (0..k).all(|j| decide(means.row(j)));
    if nc4 {
        let lo: Vec<f64> = (0..d).map(|t| (0..k).map(|c| means[(c, t)]).fold(f64::INFINITY, f64::min)).collect();
        let hi: Vec<f64> = (0..d).map(|t| (0..k).map(|c| means[(c, t)]).fold(f64::NEG_INFINITY, f64::max)).collect();
        let mut rng = Rng::new(NC4_PROBE_SEED);
        nc4 = (0..NC4_PROBES).all(|_| {
            let h: Vec<f64> = (0..d).map(|t| lo[t] + (hi[t] - lo[t]) * rng.uniform()).collect();
            decide(&h)
        });
    }
    NcChecks { nc1, nc2, nc3, nc4 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdeConfig {
    pub bandwidth: f64,
    pub sample_weight: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        KdeConfig {
            bandwidth: 1.0,
            sample_weight: 0.02,
        }
    }
}

/// Coverage deficiency of `eval_phi` by `train_phi`:
/// `mean_z max(0, 1 − Σ_i τ exp(−‖z − φ_i‖² / 2h²))`, in `[0, 1]`.
///
/// Each training feature contributes an unnormalized Gaussian bump of height
/// `τ`; an evaluation point is fully covered once the bumps sum to one.
pub fn representativeness_kde(train_phi: &Matrix, eval_phi: &Matrix, cfg: &KdeConfig) -> Result<f64> {
    representativeness_kde_with(Exec::default(), train_phi, eval_phi, cfg)
}

pub fn representativeness_kde_with(exec: Exec, train_phi: &Matrix, eval_phi: &Matrix, cfg: &KdeConfig) -> Result<f64> {
    if train_phi.cols() != eval_phi.cols() {
        return Err(Error::shape(
            "representativeness_kde",
            format!("train {}", train_phi.shape_str()),
            format!("eval {}", eval_phi.shape_str()),
        ));
    }
    if train_phi.rows() == 0 || eval_phi.rows() == 0 {
        return Err(Error::InvalidArgument("representativeness needs non-empty feature sets".into()));
    }
    if !(cfg.bandwidth > 0.0 && cfg.sample_weight > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth and sample weight must be positive, got {} and {}",
            cfg.bandwidth, cfg.sample_weight
        )));
    }
    let inv_two_h2 = 1.0 / (2.0 * cfg.bandwidth * cfg.bandwidth);
    let total = parallel::ordered_sum(exec, eval_phi.rows(), |e| {
        let z = eval_phi.row(e);
        let mut q = 0.0;
        for i in 0..train_phi.rows() {
            q += cfg.sample_weight * (-sq_dist(z, train_phi.row(i)) * inv_two_h2).exp();
            if q >= 1.0 {
                break;
            }
        }
        (1.0 - q).max(0.0)
    });
    Ok(total / eval_phi.rows() as f64)
}

/// One snapshot of the geometry measurements.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeometryReport {
    pub step: usize,
    pub ncc: f64,
    pub kappa: f64,
    pub kappa_simplified: f64,
    pub mean_angle_dev: f64,
    pub representativeness: f64,
}
