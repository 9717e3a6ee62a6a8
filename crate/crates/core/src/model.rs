//! ReLU multilayer perceptron with an exposed penultimate feature map.
//!
//! The network is `softmax(w φ(x) + b)` where `φ` is the last hidden
//! activation and `(w, b)` is the final affine layer. Gradients are written
//! out by hand; the regularizers inject extra gradient at `φ` and at the
//! final layer through [`ExtraGrads`].
//!
//! # Checkpoint format
//!
//! Plain text, one token group per line:
//!
//! ```text
//! grokgeo-checkpoint v1
//! widths 62 512 31
//! weight 512 62
//! <512 lines of 62 space-separated floats>
//! bias 512
//! <one line of 512 floats>
//! weight 31 512
//! ...
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a save/load cycle is
//! exact.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Input width, hidden widths, class count.
    pub layer_widths: Vec<usize>,
    /// Multiplier on the `1/sqrt(fan_in)` weight scale.
    #[serde(default = "one")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "need input, at least one hidden layer and an output layer, got widths {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "init_scale must be positive, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&0)
    }
}

/// One affine layer; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    /// Bumped on every optimizer step; forward caches record it.
    epoch: u64,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidArgument("need at least two layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.rows() != pair[1].weight.cols() {
                return Err(Error::shape(
                    "MlpParams::new",
                    format!("layer {i} weight {}", pair[0].weight.shape_str()),
                    format!("layer {} weight {}", i + 1, pair[1].weight.shape_str()),
                ));
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.rows() {
                return Err(Error::shape(
                    "MlpParams::new",
                    format!("weight {}", l.weight.shape_str()),
                    format!("bias {}", l.bias.len()),
                ));
            }
        }
        Ok(MlpParams { layers, epoch: 0 })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].weight.cols()];
        w.extend(self.layers.iter().map(|l| l.weight.rows()));
        w
    }

    /// Final-layer weights `w` (`k x d`).
    pub fn classifier(&self) -> &Layer {
        self.layers.last().expect("at least two layers")
    }

    pub fn classifier_mut(&mut self) -> &mut Layer {
        self.epoch += 1;
        self.layers.last_mut().expect("at least two layers")
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<MlpParams> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                "MlpParams::with_flat",
                format!("{} params", self.num_params()),
                format!("{} values", flat.len()),
            ));
        }
        let mut out = self.clone();
        let mut pos = 0;
        for l in &mut out.layers {
            let n = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        out.epoch += 1;
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::from("grokgeo-checkpoint v1\nwidths");
        for w in self.widths() {
            let _ = write!(s, " {w}");
        }
        s.push('\n');
        for l in &self.layers {
            let _ = writeln!(s, "weight {} {}", l.weight.rows(), l.weight.cols());
            for i in 0..l.weight.rows() {
                push_floats(&mut s, l.weight.row(i));
            }
            let _ = writeln!(s, "bias {}", l.bias.len());
            push_floats(&mut s, &l.bias);
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<MlpParams> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut lines = text.lines();
        if lines.next() != Some("grokgeo-checkpoint v1") {
            return Err(bad("missing 'grokgeo-checkpoint v1' header".into()));
        }
        let widths: Vec<usize> = match lines.next().and_then(|l| l.strip_prefix("widths ")) {
            Some(rest) => parse_tokens(rest).map_err(bad)?,
            None => return Err(bad("missing widths line".into())),
        };
        let mut layers = Vec::new();
        for li in 0..widths.len().saturating_sub(1) {
            let header = lines.next().ok_or_else(|| bad(format!("layer {li}: missing weight header")))?;
            let dims: Vec<usize> = match header.strip_prefix("weight ") {
                Some(rest) => parse_tokens(rest).map_err(bad)?,
                None => return Err(bad(format!("layer {li}: expected weight header, got '{header}'"))),
            };
            if dims != [widths[li + 1], widths[li]] {
                return Err(bad(format!("layer {li}: weight dims {dims:?} disagree with widths")));
            }
            let mut data = Vec::with_capacity(dims[0] * dims[1]);
            for _ in 0..dims[0] {
                let row: Vec<f64> = parse_tokens(lines.next().unwrap_or("")).map_err(bad)?;
                if row.len() != dims[1] {
                    return Err(bad(format!("layer {li}: weight row has {} values", row.len())));
                }
                data.extend(row);
            }
            let bh = lines.next().unwrap_or("");
            if bh != format!("bias {}", dims[0]) {
                return Err(bad(format!("layer {li}: expected 'bias {}', got '{bh}'", dims[0])));
            }
            let bias: Vec<f64> = parse_tokens(lines.next().unwrap_or("")).map_err(bad)?;
            if bias.len() != dims[0] {
                return Err(bad(format!("layer {li}: bias has {} values", bias.len())));
            }
            layers.push(Layer {
                weight: Matrix::from_vec(dims[0], dims[1], data)?,
                bias,
            });
        }
        MlpParams::new(layers)
    }
}

fn push_floats(s: &mut String, xs: &[f64]) {
    for (j, x) in xs.iter().enumerate() {
        if j > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:?}");
    }
    s.push('\n');
}

fn parse_tokens<T: std::str::FromStr>(line: &str) -> std::result::Result<Vec<T>, String> {
    line.split_whitespace()
        .map(|t| t.parse::<T>().map_err(|_| format!("bad token '{t}'")))
        .collect()
}

/// Weights ~ N(0, (init_scale / sqrt(fan_in))²), biases zero.
pub fn init_mlp(cfg: &MlpConfig) -> Result<MlpParams> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let layers = cfg
        .layer_widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = cfg.init_scale / (fan_in as f64).sqrt();
            Layer {
                weight: numkit::random_matrix(&mut rng, fan_out, fan_in, std),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    MlpParams::new(layers)
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l]` is the output of hidden layer `l`.
    pub activations: Vec<Matrix>,
    /// Hidden pre-activations, one per hidden layer.
    pub pre_activations: Vec<Matrix>,
    pub logits: Matrix,
    pub probs: Matrix,
    epoch: u64,
}

impl ForwardCache {
    /// Penultimate features `φ(x)`, one row per sample.
    pub fn phi(&self) -> &Matrix {
        self.activations.last().expect("non-empty")
    }

    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.logits.rows()).map(|i| argmax(self.logits.row(i))).collect()
    }
}

/// Index of the first maximal entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One-hot inputs are sparse enough that skipping zeros beats dense dot products.
fn mostly_zero(m: &Matrix) -> bool {
    let zeros = m.as_slice().iter().filter(|&&v| v == 0.0).count();
    4 * zeros >= 3 * m.as_slice().len()
}

fn affine(x: &Matrix, layer: &Layer) -> Result<Matrix> {
    if x.cols() != layer.weight.cols() {
        return Err(Error::shape(
            "forward",
            format!("input {}", x.shape_str()),
            format!("weight {}", layer.weight.shape_str()),
        ));
    }
    let mut z = if mostly_zero(x) {
        numkit::matmul(x, &layer.weight.transpose())?
    } else {
        numkit::matmul_nt(x, &layer.weight)?
    };
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

pub fn forward(params: &MlpParams, x: &Matrix) -> Result<ForwardCache> {
    let (hidden, last) = params.layers.split_at(params.layers.len() - 1);
    let mut activations = vec![x.clone()];
    let mut pre_activations = Vec::with_capacity(hidden.len());
    for layer in hidden {
        let z = affine(activations.last().expect("non-empty"), layer)?;
        activations.push(z.map(|v| v.max(0.0)));
        pre_activations.push(z);
    }
    let logits = affine(activations.last().expect("non-empty"), &last[0])?;
    let probs = numkit::softmax_rows(&logits);
    Ok(ForwardCache {
        activations,
        pre_activations,
        logits,
        probs,
        epoch: params.epoch,
    })
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("labels", format!("{n} samples"), format!("{} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean cross-entropy, evaluated from logits as `logsumexp(z) - z_y`.
pub fn ce_loss(cache: &ForwardCache, labels: &[usize]) -> Result<f64> {
    let n = cache.batch_size();
    check_labels(labels, n, cache.logits.cols())?;
    let total = labels.iter().enumerate().fold(0.0, |acc, (i, &y)| {
        let row = cache.logits.row(i);
        acc + (numkit::log_sum_exp(row) - row[y])
    });
    Ok(total / n as f64)
}

pub fn accuracy(cache: &ForwardCache, labels: &[usize]) -> f64 {
    let hits = cache
        .predictions()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Additional gradient injected into [`backward`], for loss terms that
/// depend on the penultimate features or the final layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtraGrads<'a> {
    /// `n x d`, gradient w.r.t. `φ(x)` per sample.
    pub features: Option<&'a Matrix>,
    /// `k x d`, gradient w.r.t. the final weight matrix.
    pub weight: Option<&'a Matrix>,
    /// Length `k`, gradient w.r.t. the final bias.
    pub bias: Option<&'a [f64]>,
}

/// Parameter gradients, shaped like [`MlpParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Layer>,
}

impl Grads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

/// Gradients of `mean CE + injected terms` with respect to every parameter.
pub fn backward(
    params: &MlpParams,
    cache: &ForwardCache,
    labels: &[usize],
    extra: ExtraGrads<'_>,
) -> Result<Grads> {
    if cache.epoch != params.epoch {
        return Err(Error::StaleCache {
            cache: cache.epoch,
            params: params.epoch,
        });
    }
    let n = cache.batch_size();
    let k = cache.logits.cols();
    check_labels(labels, n, k)?;

    let mut dz = cache.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        dz[(i, y)] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    dz.as_mut_slice().iter_mut().for_each(|v| *v *= inv_n);

    let n_layers = params.layers.len();
    let mut grads: Vec<Layer> = params.layers.iter().map(Layer::zeros_like).collect();

    for l in (0..n_layers).rev() {
        let a_prev = &cache.activations[l];
        let mut gw = if mostly_zero(a_prev) {
            numkit::matmul_tn(a_prev, &dz)?.transpose()
        } else {
            numkit::matmul_tn(&dz, a_prev)?
        };
        let mut gb = column_sums(&dz);
        if l == n_layers - 1 {
            if let Some(w) = extra.weight {
                gw.axpy(1.0, w)?;
            }
            if let Some(b) = extra.bias {
                if b.len() != gb.len() {
                    return Err(Error::shape("backward bias", format!("{}", gb.len()), format!("{}", b.len())));
                }
                gb.iter_mut().zip(b).for_each(|(g, e)| *g += e);
            }
        }
        grads[l] = Layer { weight: gw, bias: gb };
        if l == 0 {
            break;
        }
        let mut da = numkit::matmul(&dz, &params.layers[l].weight)?;
        if l == n_layers - 1 {
            if let Some(f) = extra.features {
                da.axpy(1.0, f)?;
            }
        }
        let z = &cache.pre_activations[l - 1];
        for (g, &zv) in da.as_mut_slice().iter_mut().zip(z.as_slice()) {
            if zv <= 0.0 {
                *g = 0.0;
            }
        }
        dz = da;
    }
    Ok(Grads { layers: grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
    pub weight_decay: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
            weight_decay: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub hyper: AdamWConfig,
    pub m: Vec<Layer>,
    pub v: Vec<Layer>,
    pub t: u64,
}

impl OptimState {
    pub fn new(params: &MlpParams, hyper: AdamWConfig) -> Self {
        let zeros: Vec<Layer> = params.layers.iter().map(Layer::zeros_like).collect();
        OptimState {
            hyper,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

fn adamw_update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], h: &AdamWConfig, bc1: f64, bc2: f64) {
    for i in 0..theta.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * theta[i]);
    }
}

/// One AdamW step with decoupled weight decay on every parameter.
pub fn adamw_step(params: &mut MlpParams, grads: &Grads, opt: &mut OptimState) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} layers", params.layers.len()),
            format!("{} gradient layers", grads.layers.len()),
        ));
    }
    opt.t += 1;
    let h = opt.hyper;
    let bc1 = 1.0 - h.beta1.powi(opt.t as i32);
    let bc2 = 1.0 - h.beta2.powi(opt.t as i32);
    for (li, layer) in params.layers.iter_mut().enumerate() {
        let g = &grads.layers[li];
        if g.weight.shape() != layer.weight.shape() || g.bias.len() != layer.bias.len() {
            return Err(Error::shape("adamw_step", layer.weight.shape_str(), g.weight.shape_str()));
        }
        let (m, v) = (&mut opt.m[li], &mut opt.v[li]);
        adamw_update(
            layer.weight.as_mut_slice(),
            g.weight.as_slice(),
            m.weight.as_mut_slice(),
            v.weight.as_mut_slice(),
            &h,
            bc1,
            bc2,
        );
        adamw_update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias, &h, bc1, bc2);
    }
    params.epoch += 1;
    Ok(())
}
