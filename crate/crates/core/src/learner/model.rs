//! Prototype classifier over similarity-modulated embeddings. Fingerprints
//! reach the loss through the similarity of each sample to the attuned
//! fingerprints, so gradient descent trains the pool, the gate and the
//! prototypes together while the experts stay frozen.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::fingerprints::{aggregate, attune_backward_tensor, attune_tensor, AttunementParams, FingerprintPool};
use crate::learner::embedder::EmbeddingBatch;
use crate::math::{axpy, dot, mean_unit_row, mean_unit_tokens, Matrix, Tensor3, NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeModel {
    /// `K_cls × D` class prototypes.
    pub prototypes: Matrix,
    pub pool: FingerprintPool,
    pub attn: AttunementParams,
    pub learning_rate: f64,
    pub steps: usize,
}

/// Gradients for every learnable parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub pool: Tensor3,
    pub gate: Matrix,
    pub prototypes: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: f64,
    /// `b × K_cls`.
    pub logits: Matrix,
}

/// Intermediate values shared by the forward and backward passes.
struct Trace {
    attuned: Tensor3,
    unit_tokens: Matrix,
    raw_mean: Matrix,
    features: Matrix,
    logits: Matrix,
}

impl PrototypeModel {
    pub fn new(prototypes: Matrix, pool: FingerprintPool, attn: AttunementParams, learning_rate: f64, steps: usize) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::domain(format!("learning rate {learning_rate} must be finite and non-negative")));
        }
        if steps == 0 {
            return Err(Error::domain("at least one gradient step per timestamp"));
        }
        if prototypes.cols() != pool.dim() || attn.dim() != pool.dim() {
            return Err(Error::dim("PrototypeModel::new", pool.dim(), prototypes.cols()));
        }
        if !prototypes.is_finite() {
            return Err(Error::domain("prototypes must be finite"));
        }
        Ok(Self { prototypes, pool, attn, learning_rate, steps })
    }

    /// Gaussian prototypes with standard deviation `std`.
    pub fn random_prototypes<R: Rng>(classes: usize, dim: usize, std: f64, rng: &mut R) -> Matrix {
        let data = (0..classes * dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Matrix::from_vec(classes, dim, data).expect("shape by construction")
    }

    pub fn classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    fn trace(&self, tokens: &Tensor3) -> Result<Trace> {
        let (b, l, d) = tokens.shape();
        if d != self.dim() {
            return Err(Error::dim("forward_loss", format!("D = {}", self.dim()), format!("D = {d}")));
        }
        let attuned = attune_tensor(self.pool.params(), &self.attn)?;
        let unit_mean_fp = mean_unit_row(&aggregate(&attuned));
        let unit_tokens = mean_unit_tokens(tokens, ExecPolicy::default());
        let sims: Vec<f64> = (0..b).map(|i| dot(unit_tokens.row(i), &unit_mean_fp)).collect();
        let mut raw_mean = Matrix::zeros(b, d);
        let mut features = Matrix::zeros(b, d);
        for i in 0..b {
            let row = raw_mean.row_mut(i);
            for t in 0..l {
                axpy(1.0 / l as f64, tokens.fibre(i, t), row);
            }
            let scale = 1.0 + sims[i];
            let m = raw_mean.row(i).to_vec();
            features.row_mut(i).iter_mut().zip(&m).for_each(|(f, x)| *f = x * scale);
        }
        let k = self.classes();
        let mut logits = Matrix::zeros(b, k);
        for i in 0..b {
            for c in 0..k {
                logits[(i, c)] = dot(features.row(i), self.prototypes.row(c));
            }
        }
        Ok(Trace { attuned, unit_tokens, raw_mean, features, logits })
    }

    fn check_labels(&self, batch: &EmbeddingBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= self.classes()) {
            return Err(Error::domain(format!("label {y} outside [0, {})", self.classes())));
        }
        Ok(())
    }

    /// Mean cross-entropy of the prototype logits.
    pub fn forward_loss(&self, batch: &EmbeddingBatch) -> Result<ForwardOutput> {
        self.check_labels(batch)?;
        let tr = self.trace(&batch.tokens)?;
        let loss = cross_entropy(&tr.logits, &batch.labels).0;
        Ok(ForwardOutput { loss, logits: tr.logits })
    }

    /// Loss and analytic gradients for the pool, the gate and the prototypes.
    pub fn loss_and_gradients(&self, batch: &EmbeddingBatch) -> Result<(f64, Gradients)> {
        self.check_labels(batch)?;
        let tr = self.trace(&batch.tokens)?;
        let (loss, d_logits) = cross_entropy(&tr.logits, &batch.labels);
        let (b, k, d) = (batch.len(), self.classes(), self.dim());

        let mut g_proto = Matrix::zeros(k, d);
        let mut d_mean_fp = vec![0.0; d];
        for i in 0..b {
            let dl = d_logits.row(i);
            let mut d_feat = vec![0.0; d];
            for c in 0..k {
                axpy(dl[c], tr.features.row(i), g_proto.row_mut(c));
                axpy(dl[c], self.prototypes.row(c), &mut d_feat);
            }
            // feat = raw_mean · (1 + s),  s = ⟨unit_tokens_i, unit_mean_fp⟩
            let d_sim = dot(&d_feat, tr.raw_mean.row(i));
            axpy(d_sim, tr.unit_tokens.row(i), &mut d_mean_fp);
        }

        // unit_mean_fp = mean_n q_n / (‖q_n‖ + ε),  q_n = Σ_l attuned[n, l]
        let q = aggregate(&tr.attuned);
        let (n, lp, _) = tr.attuned.shape();
        let mut upstream = Tensor3::zeros(n, lp, d);
        for row in 0..n {
            let qn = q.row(row);
            let r = dot(qn, qn).sqrt();
            let denom = r + NORM_EPS;
            let mut dq: Vec<f64> = d_mean_fp.iter().map(|g| g / (n as f64 * denom)).collect();
            if r > 0.0 {
                let proj = dot(qn, &d_mean_fp) / (n as f64 * r * denom * denom);
                axpy(-proj, qn, &mut dq);
            }
            for l in 0..lp {
                upstream.fibre_mut(row, l).copy_from_slice(&dq);
            }
        }
        let g = attune_backward_tensor(self.pool.params(), &self.attn, &upstream)?;
        Ok((loss, Gradients { pool: g.pool, gate: g.gate, prototypes: g_proto }))
    }

    /// `steps` gradient-descent updates on the same batch. Returns the loss
    /// measured before each step. The experts are never written.
    pub fn train_step(&mut self, batch: &EmbeddingBatch) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.steps);
        for _ in 0..self.steps {
            let (loss, g) = self.loss_and_gradients(batch)?;
            losses.push(loss);
            if self.learning_rate == 0.0 {
                continue;
            }
            let lr = -self.learning_rate;
            axpy(lr, g.pool.as_slice(), self.pool.params_mut().as_mut_slice());
            axpy(lr, g.gate.as_slice(), self.attn.gate.as_mut_slice());
            axpy(lr, g.prototypes.as_slice(), self.prototypes.as_mut_slice());
        }
        Ok(losses)
    }

    /// Argmax-logit accuracy; ties go to the lower class index.
    pub fn evaluate(&self, batch: &EmbeddingBatch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::domain("empty evaluation set"));
        }
        let out = self.forward_loss(batch)?;
        let correct = (0..batch.len())
            .filter(|&i| {
                let row = out.logits.row(i);
                let pred = crate::math::argsort_desc(row)[0];
                pred == batch.labels[i]
            })
            .count();
        Ok(correct as f64 / batch.len() as f64)
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let (b, k) = logits.shape();
    let mut grad = Matrix::zeros(b, k);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        total += max + z.ln() - row[y];
        for c in 0..k {
            grad[(i, c)] = ((row[c] - max).exp() / z - if c == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (total / b as f64, grad)
}
