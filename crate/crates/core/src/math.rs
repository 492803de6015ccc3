//! Dense 64-bit numeric kernels shared by the selection, buffer and learner
//! code: row-major containers, normalization, cosine similarity, angular
//! cost, softmax, exact GELU and top-k.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecPolicy;

/// Guard added to vector norms before division.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
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

    /// `y = self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `y = selfᵀ · x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, self.row(i), &mut y);
        }
        y
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
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

/// Row-major rank-3 array of shape `(d0, d1, d2)`; the last axis is contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Self { shape: [d0, d1, d2], data: vec![0.0; d0 * d1 * d2] }
    }

    pub fn from_vec(d0: usize, d1: usize, d2: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != d0 * d1 * d2 {
            return Err(Error::dim("Tensor3::from_vec", d0 * d1 * d2, data.len()));
        }
        Ok(Self { shape: [d0, d1, d2], data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The `d1 × d2` block at outer index `i`.
    pub fn outer(&self, i: usize) -> &[f64] {
        let n = self.shape[1] * self.shape[2];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn outer_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.shape[1] * self.shape[2];
        &mut self.data[i * n..(i + 1) * n]
    }

    /// The length-`d2` fibre at `(i, j)`.
    pub fn fibre(&self, i: usize, j: usize) -> &[f64] {
        let d = self.shape[2];
        let off = (i * self.shape[1] + j) * d;
        &self.data[off..off + d]
    }

    pub fn fibre_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let d = self.shape[2];
        let off = (i * self.shape[1] + j) * d;
        &mut self.data[off..off + d]
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    /// Builds a new tensor from the listed outer indices, in order.
    pub fn gather(&self, indices: &[usize]) -> Tensor3 {
        let mut data = Vec::with_capacity(indices.len() * self.shape[1] * self.shape[2]);
        for &i in indices {
            data.extend_from_slice(self.outer(i));
        }
        Tensor3 { shape: [indices.len(), self.shape[1], self.shape[2]], data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// `y += alpha · x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `v / (‖v‖ + ε)`; the zero vector maps to itself.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (norm(v) + NORM_EPS);
    v.iter().map(|x| x * inv).collect()
}

fn l2_normalize_into(v: &[f64], out: &mut [f64]) {
    let inv = 1.0 / (norm(v) + NORM_EPS);
    for (o, x) in out.iter_mut().zip(v) {
        *o = x * inv;
    }
}

/// Full cosine-similarity tensor and its per-sample mean.
#[derive(Debug, Clone)]
pub struct Similarity {
    /// `b × L × N`.
    pub full: Tensor3,
    /// Mean over tokens and fingerprints, one entry per sample.
    pub scores: Vec<f64>,
}

/// Reference cosine similarity between every token of every sample and every
/// aggregated fingerprint. Means are reduced token-major, then fingerprint.
pub fn batch_similarity(emd: &Tensor3, fingerprints: &Matrix) -> Result<Similarity> {
    let (b, l, d) = emd.shape();
    let (n, fd) = fingerprints.shape();
    if fd != d {
        return Err(Error::dim("batch_similarity", format!("D = {d}"), format!("D = {fd}")));
    }
    let p_hat: Vec<Vec<f64>> = (0..n).map(|k| l2_normalize(fingerprints.row(k))).collect();
    let mut full = Tensor3::zeros(b, l, n);
    let mut scores = Vec::with_capacity(b);
    let mut tok = vec![0.0; d];
    for i in 0..b {
        let mut acc = 0.0;
        for t in 0..l {
            l2_normalize_into(emd.fibre(i, t), &mut tok);
            let out = full.fibre_mut(i, t);
            for (k, p) in p_hat.iter().enumerate() {
                let s = dot(&tok, p);
                out[k] = s;
                acc += s;
            }
        }
        scores.push(if l * n == 0 { 0.0 } else { acc / (l * n) as f64 });
    }
    Ok(Similarity { full, scores })
}

/// Mean of the unit-normalized rows of `m` (length `cols`).
pub fn mean_unit_row(m: &Matrix) -> Vec<f64> {
    let (n, d) = m.shape();
    let mut acc = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    for k in 0..n {
        l2_normalize_into(m.row(k), &mut tmp);
        axpy(1.0, &tmp, &mut acc);
    }
    if n > 0 {
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|x| *x *= inv);
    }
    acc
}

/// Per-sample mean of unit-normalized tokens, `b × D`.
pub fn mean_unit_tokens(emd: &Tensor3, policy: ExecPolicy) -> Matrix {
    let (b, l, d) = emd.shape();
    let mut out = Matrix::zeros(b, d);
    policy.for_each_chunk(out.as_mut_slice(), d.max(1), |i, row| {
        let mut tmp = vec![0.0; d];
        for t in 0..l {
            l2_normalize_into(emd.fibre(i, t), &mut tmp);
            axpy(1.0, &tmp, row);
        }
        if l > 0 {
            let inv = 1.0 / l as f64;
            row.iter_mut().for_each(|x| *x *= inv);
        }
    });
    out
}

/// Per-sample similarity scores without materializing the `b × L × N` tensor.
///
/// The mean of pairwise cosine similarities factors into the inner product of
/// the mean unit token and the mean unit fingerprint, so the cost is
/// `O(b·L·D + N·D)` instead of `O(b·L·N·D)`. Agrees with
/// [`batch_similarity`] to rounding.
pub fn similarity_scores(emd: &Tensor3, fingerprints: &Matrix, policy: ExecPolicy) -> Result<Vec<f64>> {
    let (b, l, d) = emd.shape();
    let fd = fingerprints.cols();
    if fd != d {
        return Err(Error::dim("similarity_scores", format!("D = {d}"), format!("D = {fd}")));
    }
    let q = mean_unit_row(fingerprints);
    Ok(policy.map(b, |i| {
        let mut tmp = vec![0.0; d];
        let mut acc = vec![0.0; d];
        for t in 0..l {
            l2_normalize_into(emd.fibre(i, t), &mut tmp);
            axpy(1.0, &tmp, &mut acc);
        }
        if l == 0 {
            0.0
        } else {
            dot(&acc, &q) / l as f64
        }
    }))
}

/// Mean of `arccos(s)` over the input, each entry clamped to `[-1, 1]`.
pub fn angular_cost(sims: &[f64]) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::domain("angular_cost of an empty set"));
    }
    let total = sims.iter().fold(0.0, |acc, s| acc + s.clamp(-1.0, 1.0).acos());
    Ok(total / sims.len() as f64)
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::domain("softmax of an empty vector"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `d/dx [x · Φ(x)] = Φ(x) + x · φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Largest `k` values in descending order; ties go to the lower index.
pub fn top_k(v: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if k == 0 || k > v.len() {
        return Err(Error::domain(format!("top_k: k = {k} outside [1, {}]", v.len())));
    }
    let order = argsort_desc(v);
    let idx: Vec<usize> = order.into_iter().take(k).collect();
    Ok((idx.iter().map(|&i| v[i]).collect(), idx))
}

/// Indices sorted by descending value, stable on the original index.
/// NaNs sort last.
pub fn argsort_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}
