//! Fingerprint pool and the attunement block that refines it: a learnable
//! top-r gate routing each fingerprint through frozen key/value MLP experts.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::math::{axpy, dot, gelu, gelu_grad, softmax, top_k, Matrix, Tensor3};

/// Learnable `N × L_p × D` fingerprint parameters.
///
/// The first half of each fingerprint's tokens is its key part, the second
/// half its value part.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintPool {
    params: Tensor3,
}

impl FingerprintPool {
    pub fn new(params: Tensor3) -> Result<Self> {
        let (n, lp, _) = params.shape();
        if n == 0 {
            return Err(Error::domain("fingerprint pool needs at least one fingerprint"));
        }
        if lp < 2 || lp % 2 != 0 {
            return Err(Error::domain(format!("fingerprint length must be even and >= 2, got {lp}")));
        }
        if !params.is_finite() {
            return Err(Error::domain("fingerprint parameters must be finite"));
        }
        Ok(Self { params })
    }

    /// Gaussian init with the given standard deviation.
    pub fn random<R: Rng>(n: usize, length: usize, dim: usize, std: f64, rng: &mut R) -> Result<Self> {
        let data = (0..n * length * dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(Tensor3::from_vec(n, length, dim, data)?)
    }

    pub fn count(&self) -> usize {
        self.params.shape().0
    }

    pub fn length(&self) -> usize {
        self.params.shape().1
    }

    pub fn dim(&self) -> usize {
        self.params.shape().2
    }

    pub fn params(&self) -> &Tensor3 {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Tensor3 {
        &mut self.params
    }

    /// Key-half tokens of fingerprint `n` (`L_p/2 × D`, row-major).
    pub fn key(&self, n: usize) -> &[f64] {
        let half = self.length() / 2 * self.dim();
        &self.params.outer(n)[..half]
    }

    /// Value-half tokens of fingerprint `n`.
    pub fn value(&self, n: usize) -> &[f64] {
        let half = self.length() / 2 * self.dim();
        &self.params.outer(n)[half..]
    }

    /// `N × D` matrix of fingerprints summed over their length.
    pub fn aggregate(&self) -> Matrix {
        aggregate(&self.params)
    }
}

/// Sums a `N × L × D` tensor over its middle axis.
pub fn aggregate(t: &Tensor3) -> Matrix {
    let (n, l, d) = t.shape();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let row = out.row_mut(i);
        for j in 0..l {
            axpy(1.0, t.fibre(i, j), row);
        }
    }
    out
}

/// One frozen key/value MLP expert, `x ↦ V · gelu(K · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertMlp {
    key: Matrix,
    value: Matrix,
}

impl ExpertMlp {
    pub fn new(key: Matrix, value: Matrix) -> Result<Self> {
        let (kr, kc) = key.shape();
        if kr != kc || value.shape() != (kr, kc) {
            return Err(Error::dim(
                "ExpertMlp::new",
                format!("{kr}x{kr} key and value"),
                format!("{:?} / {:?}", key.shape(), value.shape()),
            ));
        }
        Ok(Self { key, value })
    }

    pub fn key(&self) -> &Matrix {
        &self.key
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre = self.key.matvec(x);
        let act: Vec<f64> = pre.iter().map(|&h| gelu(h)).collect();
        (pre, self.value.matvec(&act))
    }
}

/// Gate weights (learnable) plus the frozen experts.
#[derive(Debug, Clone, PartialEq)]
pub struct AttunementParams {
    /// `D × R` gate layer.
    pub gate: Matrix,
    experts: Vec<ExpertMlp>,
    top_r: usize,
}

impl AttunementParams {
    pub fn new(gate: Matrix, experts: Vec<ExpertMlp>, top_r: usize) -> Result<Self> {
        let r = experts.len();
        if r == 0 {
            return Err(Error::domain("attunement needs at least one expert"));
        }
        if gate.cols() != r {
            return Err(Error::dim("AttunementParams::new", format!("gate with {r} columns"), gate.cols()));
        }
        if experts.iter().any(|e| e.key.rows() != gate.rows()) {
            return Err(Error::dim("AttunementParams::new", format!("experts of width {}", gate.rows()), "mismatch"));
        }
        if top_r == 0 || top_r > r {
            return Err(Error::domain(format!("top_r = {top_r} outside [1, {r}]")));
        }
        if !gate.is_finite() {
            return Err(Error::domain("gate weights must be finite"));
        }
        Ok(Self { gate, experts, top_r })
    }

    /// Random orthogonal experts and a small Gaussian gate.
    pub fn random<R: Rng>(dim: usize, experts: usize, top_r: usize, gate_std: f64, rng: &mut R) -> Result<Self> {
        let mlps = (0..experts)
            .map(|_| ExpertMlp::new(random_orthogonal(dim, rng), random_orthogonal(dim, rng)))
            .collect::<Result<Vec<_>>>()?;
        let gate = Matrix::from_vec(
            dim,
            experts,
            (0..dim * experts).map(|_| gate_std * rng.sample::<f64, _>(StandardNormal)).collect(),
        )?;
        Self::new(gate, mlps, top_r)
    }

    /// Experts from a weights file with a fresh gate.
    pub fn from_experts<R: Rng>(experts: Vec<ExpertMlp>, top_r: usize, gate_std: f64, rng: &mut R) -> Result<Self> {
        let dim = experts.first().map_or(0, |e| e.key.rows());
        let r = experts.len();
        let gate = Matrix::from_vec(
            dim,
            r,
            (0..dim * r).map(|_| gate_std * rng.sample::<f64, _>(StandardNormal)).collect(),
        )?;
        Self::new(gate, experts, top_r)
    }

    pub fn experts(&self) -> &[ExpertMlp] {
        &self.experts
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn top_r(&self) -> usize {
        self.top_r
    }

    pub fn dim(&self) -> usize {
        self.gate.rows()
    }
}

/// Square orthogonal matrix from modified Gram-Schmidt on Gaussian rows.
pub fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    let mut i = 0;
    while i < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for j in 0..i {
            let proj = dot(&v, m.row(j));
            axpy(-proj, m.row(j), &mut v);
        }
        let nv = dot(&v, &v).sqrt();
        // rank-deficient draw; resample
        if nv < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        m.row_mut(i).copy_from_slice(&v);
        i += 1;
    }
    m
}

/// Gate decision for every fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// Raw `N × R` gate scores.
    pub scores: Matrix,
    /// `N × r` mixing weights; each row sums to one.
    pub weights: Matrix,
    indices: Vec<usize>,
}

impl GateOutput {
    pub fn selected(&self) -> usize {
        self.weights.cols()
    }

    /// Expert indices chosen for fingerprint `n`, highest score first.
    pub fn indices(&self, n: usize) -> &[usize] {
        let r = self.selected();
        &self.indices[n * r..(n + 1) * r]
    }
}

fn mean_token(block: &[f64], length: usize, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for l in 0..length {
        axpy(1.0, &block[l * dim..(l + 1) * dim], &mut m);
    }
    let inv = 1.0 / length as f64;
    m.iter_mut().for_each(|x| *x *= inv);
    m
}

fn check_dims(pool: &Tensor3, params: &AttunementParams, op: &'static str) -> Result<()> {
    let d = pool.shape().2;
    if d != params.dim() {
        return Err(Error::dim(op, format!("D = {}", params.dim()), format!("D = {d}")));
    }
    Ok(())
}

/// Top-`r_select` gating from the length-pooled fingerprints.
pub fn gate_forward(pool: &FingerprintPool, params: &AttunementParams, r_select: usize) -> Result<GateOutput> {
    gate_forward_raw(pool.params(), params, r_select)
}

fn gate_forward_raw(pool: &Tensor3, params: &AttunementParams, r_select: usize) -> Result<GateOutput> {
    check_dims(pool, params, "gate_forward")?;
    let r = params.expert_count();
    if r_select == 0 || r_select > r {
        return Err(Error::domain(format!("r_select = {r_select} outside [1, {r}]")));
    }
    let (n, lp, d) = pool.shape();
    let mut scores = Matrix::zeros(n, r);
    let mut weights = Matrix::zeros(n, r_select);
    let mut indices = Vec::with_capacity(n * r_select);
    for i in 0..n {
        let pooled = mean_token(pool.outer(i), lp, d);
        let g = params.gate.matvec_t(&pooled);
        let (vals, idx) = top_k(&g, r_select)?;
        weights.row_mut(i).copy_from_slice(&softmax(&vals)?);
        scores.row_mut(i).copy_from_slice(&g);
        indices.extend(idx);
    }
    Ok(GateOutput { scores, weights, indices })
}

/// Refined fingerprints: every token of fingerprint `n` is the gate-weighted
/// mix of its selected experts' outputs. Output shape equals input shape.
pub fn attune(pool: &FingerprintPool, params: &AttunementParams) -> Result<Tensor3> {
    attune_tensor(pool.params(), params)
}

pub(crate) fn attune_tensor(pool: &Tensor3, params: &AttunementParams) -> Result<Tensor3> {
    let gate = gate_forward_raw(pool, params, params.top_r)?;
    let (n, lp, d) = pool.shape();
    let mut out = Tensor3::zeros(n, lp, d);
    ExecPolicy::default().for_each_chunk(out.as_mut_slice(), (lp * d).max(1), |i, block| {
        let w = gate.weights.row(i);
        for (j, &e) in gate.indices(i).iter().enumerate() {
            let expert = &params.experts[e];
            for l in 0..lp {
                let (_, f) = expert.forward(pool.fibre(i, l));
                axpy(w[j], &f, &mut block[l * d..(l + 1) * d]);
            }
        }
    });
    Ok(out)
}

/// Gradients of a scalar loss with respect to the fingerprints and the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct AttuneGrads {
    pub pool: Tensor3,
    pub gate: Matrix,
}

/// Backward pass of [`attune`]. The top-r index set is held fixed; gradient
/// reaches the gate only through the softmax over the selected scores.
pub fn attune_backward(pool: &FingerprintPool, params: &AttunementParams, upstream: &Tensor3) -> Result<AttuneGrads> {
    attune_backward_tensor(pool.params(), params, upstream)
}

pub(crate) fn attune_backward_tensor(pool: &Tensor3, params: &AttunementParams, upstream: &Tensor3) -> Result<AttuneGrads> {
    if upstream.shape() != pool.shape() {
        return Err(Error::dim("attune_backward", format!("{:?}", pool.shape()), format!("{:?}", upstream.shape())));
    }
    let gate = gate_forward_raw(pool, params, params.top_r)?;
    let (n, lp, d) = pool.shape();
    let r = params.expert_count();

    // per-fingerprint (grad block, gate-score grad, pooled input); gate grads
    // are reduced afterwards in fingerprint order
    let per_fp = ExecPolicy::default().map(n, |i| {
        let w = gate.weights.row(i);
        let idx = gate.indices(i);
        let mut grad_block = vec![0.0; lp * d];
        let mut d_w = vec![0.0; idx.len()];
        for (j, &e) in idx.iter().enumerate() {
            let expert = &params.experts[e];
            for l in 0..lp {
                let x = pool.fibre(i, l);
                let g = upstream.fibre(i, l);
                let (pre, f) = expert.forward(x);
                d_w[j] += dot(g, &f);
                // through V · gelu(K · x), scaled by the mixing weight
                let mut d_act = expert.value.matvec_t(g);
                for (da, &h) in d_act.iter_mut().zip(&pre) {
                    *da *= w[j] * gelu_grad(h);
                }
                let dx = expert.key.matvec_t(&d_act);
                axpy(1.0, &dx, &mut grad_block[l * d..(l + 1) * d]);
            }
        }
        // softmax Jacobian
        let mean_dw: f64 = w.iter().zip(&d_w).map(|(a, b)| a * b).sum();
        let mut d_scores = vec![0.0; r];
        for (j, &e) in idx.iter().enumerate() {
            d_scores[e] = w[j] * (d_w[j] - mean_dw);
        }
        let pooled = mean_token(pool.outer(i), lp, d);
        let d_pooled = params.gate.matvec(&d_scores);
        let inv = 1.0 / lp as f64;
        for l in 0..lp {
            axpy(inv, &d_pooled, &mut grad_block[l * d..(l + 1) * d]);
        }
        (grad_block, d_scores, pooled)
    });

    let mut grad_pool = Vec::with_capacity(n * lp * d);
    let mut grad_gate = Matrix::zeros(d, r);
    for (block, d_scores, pooled) in per_fp {
        grad_pool.extend(block);
        for (k, &p) in pooled.iter().enumerate() {
            axpy(p, &d_scores, grad_gate.row_mut(k));
        }
    }
    Ok(AttuneGrads { pool: Tensor3::from_vec(n, lp, d, grad_pool)?, gate: grad_gate })
}

const WEIGHTS_MAGIC: &[u8; 4] = b"SFPW";
const WEIGHTS_VERSION: u32 = 1;

/// Reads frozen expert weights: `"SFPW"`, u32 version, u32 R, u32 D, then R
/// pairs of `D × D` row-major little-endian f32 matrices (key, then value).
pub fn read_weights(mut r: impl Read) -> Result<Vec<ExpertMlp>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!("bad weights magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let mut experts = Vec::with_capacity(count);
    for _ in 0..count {
        let key = Matrix::from_vec(dim, dim, read_f32s(&mut r, dim * dim)?)?;
        let value = Matrix::from_vec(dim, dim, read_f32s(&mut r, dim * dim)?)?;
        experts.push(ExpertMlp::new(key, value)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after weights".into()));
    }
    Ok(experts)
}

pub fn write_weights(mut w: impl Write, experts: &[ExpertMlp]) -> Result<()> {
    let dim = experts.first().map_or(0, |e| e.key.rows());
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    w.write_all(&(experts.len() as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for e in experts {
        for m in [&e.key, &e.value] {
            for &x in m.as_slice() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Vec<ExpertMlp>> {
    let f = std::fs::File::open(path)?;
    read_weights(std::io::BufReader::new(f))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub(crate) fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file truncated".into())
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn pool(n: usize, lp: usize, d: usize, data: Vec<f64>) -> FingerprintPool {
        FingerprintPool::new(Tensor3::from_vec(n, lp, d, data).unwrap()).unwrap()
    }

    fn identity_params(d: usize, r: usize, top_r: usize) -> AttunementParams {
        let experts = (0..r)
            .map(|_| ExpertMlp::new(Matrix::identity(d), Matrix::identity(d)).unwrap())
            .collect();
        AttunementParams::new(Matrix::zeros(d, r), experts, top_r).unwrap()
    }

    #[test]
    fn pool_validation() {
        assert!(FingerprintPool::new(Tensor3::zeros(0, 2, 3)).is_err());
        assert!(FingerprintPool::new(Tensor3::zeros(1, 3, 3)).is_err());
        assert!(FingerprintPool::new(Tensor3::zeros(1, 0, 3)).is_err());
        let mut t = Tensor3::zeros(1, 2, 1);
        t.as_mut_slice()[0] = f64::NAN;
        assert!(FingerprintPool::new(t).is_err());
        let p = pool(1, 4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.key(0), &[1.0, 2.0]);
        assert_eq!(p.value(0), &[3.0, 4.0]);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(pool(2, 2, 3, vec![0.0; 12]).aggregate(), Matrix::zeros(2, 3));
        let p = pool(1, 2, 2, vec![0.5, -1.5, -0.5, 1.5]);
        assert_eq!(p.aggregate().as_slice(), &[0.0, 0.0]);
        let p = pool(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.aggregate().as_slice(), &[4.0, 6.0]);
    }

    #[test]
    fn gate_zero_weights_is_uniform() {
        let p = pool(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 2.0, 5.0]);
        let g = gate_forward(&p, &identity_params(2, 3, 3), 3).unwrap();
        for i in 0..2 {
            for &w in g.weights.row(i) {
                assert!((w - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gate_single_expert_collapse() {
        let p = pool(2, 2, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let mut params = identity_params(2, 3, 1);
        params.gate = Matrix::from_rows(&[vec![1.0, 0.0, 0.5], vec![0.0, 2.0, 0.1]]).unwrap();
        let g = gate_forward(&p, &params, 1).unwrap();
        assert_eq!(g.weights.as_slice(), &[1.0, 1.0]);
        assert_eq!(g.indices(0), &[0]);
        assert_eq!(g.indices(1), &[1]);
        assert!(gate_forward(&p, &params, 0).is_err());
        assert!(gate_forward(&p, &params, 4).is_err());
    }

    #[test]
    fn gate_hand_softmax() {
        // pooled fingerprint [1, 1]; gate columns give scores [2, 1, 0]
        let p = pool(1, 2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let mut params = identity_params(2, 3, 2);
        params.gate = Matrix::from_rows(&[vec![1.0, 0.5, 0.0], vec![1.0, 0.5, 0.0]]).unwrap();
        let g = gate_forward(&p, &params, 2).unwrap();
        assert_eq!(g.indices(0), &[0, 1]);
        assert!((g.weights[(0, 0)] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((g.weights[(0, 1)] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn attune_examples() {
        let x: Vec<f64> = vec![10.0, 12.0, 11.0, 15.0];
        let out = attune(&pool(1, 2, 2, x.clone()), &identity_params(2, 3, 3)).unwrap();
        for (a, b) in out.as_slice().iter().zip(&x) {
            assert!((a - b).abs() < 1e-6);
        }
        let zero = attune(&pool(2, 2, 3, vec![0.0; 12]), &identity_params(3, 3, 3)).unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));

        let e = ExpertMlp::new(Matrix::from_vec(1, 1, vec![2.0]).unwrap(), Matrix::from_vec(1, 1, vec![3.0]).unwrap()).unwrap();
        let params = AttunementParams::new(Matrix::zeros(1, 1), vec![e], 1).unwrap();
        let out = attune(&pool(1, 2, 1, vec![1.0, 1.0]), &params).unwrap();
        // 3 · gelu(2) with the exact Gaussian CDF
        assert!((out.as_slice()[0] - 5.863_499_208_310_925).abs() < 1e-9);
    }

    #[test]
    fn attune_rejects_mismatched_dims() {
        let p = pool(1, 2, 3, vec![0.0; 6]);
        assert!(attune(&p, &identity_params(2, 3, 3)).is_err());
        assert!(attune_backward(&p, &identity_params(3, 3, 3), &Tensor3::zeros(1, 2, 2)).is_err());
    }

    #[test]
    fn backward_zero_upstream() {
        let seeds = SeedTree::new(3);
        let mut rng = seeds.stream("init");
        let p = FingerprintPool::random(2, 4, 3, 1.0, &mut rng).unwrap();
        let params = AttunementParams::random(3, 3, 3, 0.5, &mut rng).unwrap();
        let g = attune_backward(&p, &params, &Tensor3::zeros(2, 4, 3)).unwrap();
        assert!(g.pool.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.gate.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_near_identity() {
        let x: Vec<f64> = vec![10.0, 12.0, 11.0, 15.0, 9.0, 13.0];
        let p = pool(1, 2, 3, x);
        let params = identity_params(3, 3, 1);
        let up = Tensor3::from_vec(1, 2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7]).unwrap();
        let g = attune_backward(&p, &params, &up).unwrap();
        for (a, b) in g.pool.as_slice().iter().zip(up.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn scalar_loss(pool: &Tensor3, params: &AttunementParams, coef: &Tensor3) -> f64 {
        dot(attune_tensor(pool, params).unwrap().as_slice(), coef.as_slice())
    }

    #[test]
    fn backward_matches_finite_differences() {
        let seeds = SeedTree::new(11);
        let mut rng = seeds.stream("fd");
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for trial in 0..20 {
            let n = 1 + trial % 3;
            let lp = 2 + 2 * (trial % 2);
            let d = 2 + trial % 4;
            let p = FingerprintPool::random(n, lp, d, 1.0, &mut rng).unwrap();
            let mut params = AttunementParams::random(d, 3, 3, 0.7, &mut rng).unwrap();
            let coef = FingerprintPool::random(n, lp, d, 1.0, &mut rng).unwrap().params().clone();
            let g = attune_backward(&p, &params, &coef).unwrap();

            let mut t = p.params().clone();
            for k in 0..t.as_slice().len() {
                let orig = t.as_slice()[k];
                t.as_mut_slice()[k] = orig + h;
                let up = scalar_loss(&t, &params, &coef);
                t.as_mut_slice()[k] = orig - h;
                let down = scalar_loss(&t, &params, &coef);
                t.as_mut_slice()[k] = orig;
                worst = worst.max(rel_err(g.pool.as_slice()[k], (up - down) / (2.0 * h)));
            }
            for k in 0..params.gate.as_slice().len() {
                let orig = params.gate.as_slice()[k];
                params.gate.as_mut_slice()[k] = orig + h;
                let up = scalar_loss(p.params(), &params, &coef);
                params.gate.as_mut_slice()[k] = orig - h;
                let down = scalar_loss(p.params(), &params, &coef);
                params.gate.as_mut_slice()[k] = orig;
                worst = worst.max(rel_err(g.gate.as_slice()[k], (up - down) / (2.0 * h)));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn frozen_experts_untouched_and_equivariant() {
        let seeds = SeedTree::new(5);
        let mut rng = seeds.stream("init");
        let p = FingerprintPool::random(3, 2, 4, 1.0, &mut rng).unwrap();
        let params = AttunementParams::random(4, 3, 3, 0.5, &mut rng).unwrap();
        let before = params.experts().to_vec();
        let out = attune(&p, &params).unwrap();
        let _ = attune_backward(&p, &params, &out).unwrap();
        assert_eq!(before, params.experts());

        let perm = [2usize, 0, 1];
        let permuted = FingerprintPool::new(p.params().gather(&perm)).unwrap();
        let out2 = attune(&permuted, &params).unwrap();
        assert_eq!(out2, out.gather(&perm));
    }

    #[test]
    fn orthogonal_init_is_orthogonal() {
        let mut rng = SeedTree::new(1).stream("orth");
        let q = random_orthogonal(6, &mut rng);
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(q.row(i), q.row(j)) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_file_round_trip() {
        let mut rng = SeedTree::new(9).stream("w");
        let params = AttunementParams::random(3, 2, 2, 0.1, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_weights(&mut buf, params.experts()).unwrap();
        assert_eq!(&buf[..4], b"SFPW");
        assert_eq!(buf.len(), 16 + 2 * 2 * 9 * 4);
        let back = read_weights(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(params.experts()) {
            for (x, y) in a.key().as_slice().iter().zip(b.key().as_slice()) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
        assert!(matches!(read_weights(&buf[..20]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_weights(bad.as_slice()).is_err());
    }
}
