//! Baseline selectors: uniform random coresets, greedy k-center on
//! mean-pooled embeddings, and classic reservoir buffering.

use rand::Rng;

use crate::buffer::{BufferItem, RehearsalBuffer};
use crate::coreset::{check_sigma, coreset_size};
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::math::{Matrix, Tensor3};

/// Uniform `⌊σ·b⌋`-subset, sorted ascending.
pub fn random_coreset<R: Rng>(batch: usize, sigma: f64, rng: &mut R) -> Result<Vec<usize>> {
    if batch == 0 {
        return Err(Error::domain("cannot select a coreset from an empty batch"));
    }
    check_sigma(sigma)?;
    let c = coreset_size(batch, sigma);
    let mut idx = rand::seq::index::sample(rng, batch, c).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Token-mean of every sample, `b × D`.
pub fn mean_pool(emd: &Tensor3) -> Matrix {
    let (b, l, d) = emd.shape();
    let mut out = Matrix::zeros(b, d);
    for i in 0..b {
        let row = out.row_mut(i);
        for t in 0..l {
            for (o, x) in row.iter_mut().zip(emd.fibre(i, t)) {
                *o += x;
            }
        }
        row.iter_mut().for_each(|x| *x /= l as f64);
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy farthest-point selection of `⌊σ·b⌋` centers under Euclidean
/// distance. Seeds with the point farthest from the centroid; ties go to the
/// lower index. Returned in selection order.
pub fn kcenter_coreset(emd: &Tensor3, sigma: f64, policy: ExecPolicy) -> Result<Vec<usize>> {
    let (b, _, d) = emd.shape();
    if b == 0 {
        return Err(Error::domain("cannot select a coreset from an empty batch"));
    }
    check_sigma(sigma)?;
    let c = coreset_size(b, sigma);
    let points = mean_pool(emd);
    let mut centroid = vec![0.0; d];
    for i in 0..b {
        for (m, x) in centroid.iter_mut().zip(points.row(i)) {
            *m += x / b as f64;
        }
    }
    let from_centroid = policy.map(b, |i| sq_dist(points.row(i), &centroid));
    let first = argmax_first(&from_centroid);
    let mut chosen = vec![first];
    let mut min_dist = policy.map(b, |i| sq_dist(points.row(i), points.row(first)));
    // chosen points can never win again, even when everything left is a duplicate
    min_dist[first] = f64::NEG_INFINITY;
    while chosen.len() < c {
        let next = argmax_first(&min_dist);
        chosen.push(next);
        min_dist[next] = f64::NEG_INFINITY;
        let centre = points.row(next);
        let fresh = policy.map(b, |i| sq_dist(points.row(i), centre));
        for (m, f) in min_dist.iter_mut().zip(fresh) {
            if f < *m {
                *m = f;
            }
        }
    }
    Ok(chosen)
}

/// Reservoir sampling update; returns how many residents were written.
pub fn reservoir_update<R: Rng>(buffer: &mut RehearsalBuffer, batch: &[BufferItem], sims: &[f64], rng: &mut R) -> usize {
    buffer.offer_reservoir(batch, sims, rng)
}
