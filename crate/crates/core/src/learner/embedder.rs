//! Embedding sources: a seeded synthetic drifting-cluster generator and a
//! binary embedding file.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fingerprints::{read_f32s, read_u32, truncated};
use crate::math::{Matrix, Tensor3};
use crate::rng::SeedTree;

/// Per-sample token embeddings with labels; the unit of stream arrival.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    /// `b × L × D`.
    pub tokens: Tensor3,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> EmbeddingBatch {
        EmbeddingBatch {
            tokens: self.tokens.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Concatenates two batches with the same token shape.
    pub fn concat(&self, other: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        let (_, l, d) = self.tokens.shape();
        let (_, l2, d2) = other.tokens.shape();
        if (l, d) != (l2, d2) {
            return Err(Error::dim("EmbeddingBatch::concat", format!("L={l}, D={d}"), format!("L={l2}, D={d2}")));
        }
        let mut data = self.tokens.as_slice().to_vec();
        data.extend_from_slice(other.tokens.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        Ok(EmbeddingBatch { tokens: Tensor3::from_vec(labels.len(), l, d, data)?, labels, ids })
    }
}

/// Which samples to embed.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSpec {
    pub task: usize,
    /// Stream-wide sample ids (row indices for file sources).
    pub ids: Vec<u64>,
    /// Classes active in `task`; synthetic labels are drawn from these.
    pub classes: Vec<usize>,
}

/// Gaussian class clusters whose means shift from task to task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEmbedder {
    pub class_means: Matrix,
    pub noise_std: f64,
    /// `T × D` offset added to every class mean during task `t`.
    pub drift: Matrix,
    pub tokens: usize,
    seeds: SeedTree,
}

impl SyntheticEmbedder {
    pub fn new(class_means: Matrix, noise_std: f64, drift: Matrix, tokens: usize, seed: u64) -> Result<Self> {
        if drift.cols() != class_means.cols() {
            return Err(Error::dim("SyntheticEmbedder::new", class_means.cols(), drift.cols()));
        }
        if tokens == 0 || class_means.rows() == 0 || drift.rows() == 0 {
            return Err(Error::domain("synthetic embedder needs tokens, classes and tasks"));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::domain("noise_std must be non-negative"));
        }
        Ok(Self { class_means, noise_std, drift, tokens, seeds: SeedTree::new(seed) })
    }

    /// Unit-variance class means and a random-walk drift of `drift_scale`
    /// per task, all derived from `seed`.
    pub fn generate(
        classes: usize,
        dim: usize,
        tokens: usize,
        tasks: usize,
        noise_std: f64,
        drift_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let seeds = SeedTree::new(seed);
        let mut rng = seeds.stream("class_means");
        let means = (0..classes * dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut rng = seeds.stream("drift");
        let mut drift = Matrix::zeros(tasks, dim);
        for t in 1..tasks {
            for k in 0..dim {
                let step: f64 = rng.sample(StandardNormal);
                drift[(t, k)] = drift[(t - 1, k)] + drift_scale * step;
            }
        }
        Self::new(Matrix::from_vec(classes, dim, means)?, noise_std, drift, tokens, seed)
    }

    pub fn dim(&self) -> usize {
        self.class_means.cols()
    }

    pub fn classes(&self) -> usize {
        self.class_means.rows()
    }

    pub fn tasks(&self) -> usize {
        self.drift.rows()
    }

    fn embed(&self, spec: &BatchSpec) -> Result<EmbeddingBatch> {
        if spec.task >= self.tasks() {
            return Err(Error::domain(format!("task {} outside [0, {})", spec.task, self.tasks())));
        }
        if spec.classes.is_empty() || spec.classes.iter().any(|&c| c >= self.classes()) {
            return Err(Error::domain("batch spec names no classes or an unknown class"));
        }
        let (l, d) = (self.tokens, self.dim());
        let mut data = Vec::with_capacity(spec.ids.len() * l * d);
        let mut labels = Vec::with_capacity(spec.ids.len());
        for &id in &spec.ids {
            let mut rng = self.seeds.indexed("sample", &[spec.task as u64, id]);
            let label = spec.classes[rng.random_range(0..spec.classes.len())];
            let mean = self.class_means.row(label);
            let shift = self.drift.row(spec.task);
            for _ in 0..l {
                for k in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(mean[k] + shift[k] + self.noise_std * noise);
                }
            }
            labels.push(label);
        }
        Ok(EmbeddingBatch { tokens: Tensor3::from_vec(spec.ids.len(), l, d, data)?, labels, ids: spec.ids.clone() })
    }
}

/// Embeddings loaded from an `SFPE` file.
#[derive(Debug, Clone, PartialEq)]
pub struct FileEmbedder {
    pub tokens: Tensor3,
    pub labels: Vec<usize>,
}

const EMBED_MAGIC: &[u8; 4] = b"SFPE";
const EMBED_VERSION: u32 = 1;

impl FileEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }

    /// `"SFPE"`, u32 version, u64 n, u32 L, u32 D, `n·L·D` f32, `n` u32 labels;
    /// all little-endian.
    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != EMBED_MAGIC {
            return Err(Error::Format(format!("bad embedding magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != EMBED_VERSION {
            return Err(Error::Format(format!("unsupported embedding version {version}")));
        }
        let mut nb = [0u8; 8];
        r.read_exact(&mut nb).map_err(truncated)?;
        let n = u64::from_le_bytes(nb) as usize;
        let l = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let data = read_f32s(&mut r, n * l * d)?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(read_u32(&mut r)? as usize);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after embeddings".into()));
        }
        Ok(Self { tokens: Tensor3::from_vec(n, l, d, data)?, labels })
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let (n, l, d) = self.tokens.shape();
        w.write_all(EMBED_MAGIC)?;
        w.write_all(&EMBED_VERSION.to_le_bytes())?;
        w.write_all(&(n as u64).to_le_bytes())?;
        w.write_all(&(l as u32).to_le_bytes())?;
        w.write_all(&(d as u32).to_le_bytes())?;
        for &x in self.tokens.as_slice() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        for &y in &self.labels {
            w.write_all(&(y as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn embed(&self, spec: &BatchSpec) -> Result<EmbeddingBatch> {
        let n = self.len();
        let mut rows = Vec::with_capacity(spec.ids.len());
        for &id in &spec.ids {
            if id as usize >= n {
                return Err(Error::Format(format!("sample {id} outside file of {n} rows")));
            }
            rows.push(id as usize);
        }
        Ok(EmbeddingBatch {
            tokens: self.tokens.gather(&rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            ids: spec.ids.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Embedder {
    Synthetic(SyntheticEmbedder),
    File(FileEmbedder),
}

impl Embedder {
    pub fn embed(&self, spec: &BatchSpec) -> Result<EmbeddingBatch> {
        match self {
            Embedder::Synthetic(s) => s.embed(spec),
            Embedder::File(f) => f.embed(spec),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Embedder::Synthetic(s) => s.dim(),
            Embedder::File(f) => f.tokens.shape().2,
        }
    }

    pub fn tokens(&self) -> usize {
        match self {
            Embedder::Synthetic(s) => s.tokens,
            Embedder::File(f) => f.tokens.shape().1,
        }
    }
}
