//! Dense row-major matrices, softmax and the seeded random stream.
//!
//! All products accumulate over the shared dimension in ascending index
//! order. Zero left-hand entries are skipped, which leaves results unchanged
//! for finite inputs and makes one-hot and ReLU-sparse products cheap.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::parallel::{self, Exec};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row 0 has {cols} columns"),
                    format!("row {i} has {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape_str(), other.shape_str()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("axpy", self.shape_str(), other.shape_str()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eight interleaved partial sums, combined pairwise; lets the compiler vectorize.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 8];
    for (x, y) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = a[n - n % 8..].iter().zip(&b[n - n % 8..]).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
fn axpy_slice(out: &mut [f64], s: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

/// `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_with(Exec::default(), a, b)
}

pub fn matmul_with(exec: Exec, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape_str(), b.shape_str()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    parallel::for_each_row(exec, &mut out.data, b.cols, |i, out_row| {
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy_slice(out_row, aik, b.row(k));
            }
        }
    });
    Ok(out)
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_tn_with(Exec::default(), a, b)
}

pub fn matmul_tn_with(exec: Exec, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", a.shape_str(), b.shape_str()));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    // Blocks of output rows so each row of `a` and `b` is read once per block.
    parallel::for_each_row(exec, &mut out.data, TN_BLOCK * b.cols, |blk, chunk| {
        let i0 = blk * TN_BLOCK;
        for k in 0..a.rows {
            let (ak, bk) = (a.row(k), b.row(k));
            for (r, out_row) in chunk.chunks_mut(b.cols).enumerate() {
                let v = ak[i0 + r];
                if v != 0.0 {
                    axpy_slice(out_row, v, bk);
                }
            }
        }
    });
    Ok(out)
}

const TN_BLOCK: usize = 16;

/// `a * bᵀ` as row-by-row dot products.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", a.shape_str(), b.shape_str()));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    parallel::for_each_row(Exec::default(), &mut out.data, b.rows, |i, out_row| {
        let ai = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(ai, b.row(j));
        }
    });
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `ln Σ exp(row)`, stable for large entries.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Deterministic random stream.
///
/// ChaCha8 keyed by the seed; uniforms take the top 53 bits of each word and
/// normals come from the Box–Muller transform, both spare values used.
/// The stream is frozen: changing either mapping changes every run.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// An independent stream derived from this seed and a stream label.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut rng = Rng::new(seed);
        rng.inner.set_stream(stream);
        rng
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by rejection, `n > 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// `n` normal draws with the given mean and standard deviation.
pub fn rng_normal(rng: &mut Rng, n: usize, mean: f64, std: f64) -> Result<Vec<f64>> {
    if !(std >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "standard deviation must be >= 0, got {std}"
        )));
    }
    Ok((0..n).map(|_| mean + std * rng.standard_normal()).collect())
}

/// A `rows x cols` matrix of normal draws.
pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| std * rng.standard_normal()).collect();
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn brute_force(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn annihilating_product() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn products_match_triple_loop() {
        let mut rng = Rng::new(3);
        let a = random_matrix(&mut rng, 3, 4, 1.0);
        let b = random_matrix(&mut rng, 4, 2, 1.0);
        let expect = brute_force(&a, &b);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&expect) < 1e-14);
        assert!(matmul_tn(&a.transpose(), &b).unwrap().max_abs_diff(&expect) < 1e-14);
        assert!(matmul_nt(&a, &b.transpose()).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn dimension_mismatch_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn sequential_and_default_paths_agree_bitwise() {
        let mut rng = Rng::new(11);
        let a = random_matrix(&mut rng, 17, 9, 1.0);
        let b = random_matrix(&mut rng, 9, 13, 1.0);
        assert_eq!(
            matmul_with(Exec::Sequential, &a, &b).unwrap(),
            matmul_with(Exec::default(), &a, &b).unwrap()
        );
        let c = random_matrix(&mut rng, 17, 5, 1.0);
        assert_eq!(
            matmul_tn_with(Exec::Sequential, &a, &c).unwrap(),
            matmul_tn_with(Exec::default(), &a, &c).unwrap()
        );
    }

    #[test]
    fn softmax_symmetric_row() {
        let p = softmax_rows(&Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let p = softmax_rows(&Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        assert!(p.is_finite());
        assert_relative_eq!(p[(0, 0)], 1.0, epsilon = 1e-15);
        assert!(p[(0, 1)] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let p = softmax_rows(&Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (j, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert_relative_eq!(p[(0, j)], x.exp() / z, max_relative = 1e-14);
        }
    }

    #[test]
    fn normal_with_zero_std_is_constant() {
        let v = rng_normal(&mut Rng::new(1), 10, 2.5, 0.0).unwrap();
        assert!(v.iter().all(|&x| x == 2.5));
    }

    #[test]
    fn normal_rejects_negative_std() {
        assert!(rng_normal(&mut Rng::new(1), 3, 0.0, -1.0).is_err());
    }

    #[test]
    fn normal_stream_is_seed_deterministic() {
        let a = rng_normal(&mut Rng::new(99), 64, 0.0, 1.0).unwrap();
        let b = rng_normal(&mut Rng::new(99), 64, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        let c = rng_normal(&mut Rng::new(100), 64, 0.0, 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn normal_sample_mean_within_bound() {
        let n = 100_000;
        let (mean, std) = (1.5, 2.0);
        let v = rng_normal(&mut Rng::new(7), n, mean, std).unwrap();
        let m = v.iter().sum::<f64>() / n as f64;
        assert!((m - mean).abs() < 5.0 * std / (n as f64).sqrt(), "mean {m}");
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        assert!((var.sqrt() - std).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn derived_streams_differ() {
        let a = Rng::derive(5, 1).next_u64();
        let b = Rng::derive(5, 2).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        Rng::new(4).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::numkit::Rng;

        proptest! {
            #[test]
            fn matmul_is_associative(seed in 0u64..1000, n in 1usize..6, m in 1usize..6, p in 1usize..6, q in 1usize..6) {
                let mut rng = Rng::new(seed);
                let a = random_matrix(&mut rng, n, m, 1.0);
                let b = random_matrix(&mut rng, m, p, 1.0);
                let c = random_matrix(&mut rng, p, q, 1.0);
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                let scale = left.as_slice().iter().fold(1.0f64, |s, x| s.max(x.abs()));
                prop_assert!(left.max_abs_diff(&right) <= 1e-10 * scale);
            }

            #[test]
            fn softmax_rows_are_distributions(seed in 0u64..1000, n in 1usize..5, k in 1usize..8, scale in 0.1f64..200.0) {
                let mut rng = Rng::new(seed);
                let logits = random_matrix(&mut rng, n, k, scale);
                let p = softmax_rows(&logits);
                for i in 0..n {
                    let s: f64 = p.row(i).iter().sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                    prop_assert!(p.row(i).iter().all(|&x| x >= 0.0));
                }
                prop_assert_eq!(p, softmax_rows(&logits));
            }
        }
    }
}
