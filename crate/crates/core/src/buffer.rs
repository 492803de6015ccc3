//! Rehearsal buffer with Retain-Drop updates driven by rank probabilities of
//! fingerprint similarity, plus the rank-1 MMD used to check how well the
//! buffer represents everything seen so far.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::math::argsort_desc;

/// One stored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferItem {
    /// Stream-wide sample id.
    pub id: u64,
    pub label: usize,
    /// `L × D` token embeddings, row-major.
    pub tokens: Vec<f64>,
    /// Similarity to the fingerprints when last scored.
    pub similarity: f64,
}

/// What one call to [`RehearsalBuffer::update`] did.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct UpdateOutcome {
    /// Batch samples appended while the buffer had free space.
    pub filled: usize,
    /// Retain-Drop replacements (ν).
    pub replaced: usize,
    /// Buffer positions that received a new sample.
    pub positions: Vec<usize>,
    /// Batch indices written into those positions.
    pub retained: Vec<usize>,
}

/// How residents are weighted when choosing which ones to drop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropWeights {
    /// `1 − π`: the most similar (redundant) residents go first.
    #[default]
    Complement,
    /// `π`: the same rank weights used to retain batch samples.
    Rank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalBuffer {
    capacity: usize,
    n_seen: u64,
    items: Vec<BufferItem>,
    drop_weights: DropWeights,
}

impl RehearsalBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::domain("buffer capacity must be at least 1"));
        }
        Ok(Self { capacity, n_seen: 0, items: Vec::with_capacity(capacity), drop_weights: DropWeights::default() })
    }

    pub fn with_drop_weights(mut self, drop_weights: DropWeights) -> Self {
        self.drop_weights = drop_weights;
        self
    }

    pub fn drop_weights(&self) -> DropWeights {
        self.drop_weights
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    pub fn items(&self) -> &[BufferItem] {
        &self.items
    }

    pub fn stored_similarities(&self) -> Vec<f64> {
        self.items.iter().map(|it| it.similarity).collect()
    }

    /// Overwrites the stored similarities, e.g. after re-scoring against
    /// updated fingerprints.
    pub fn refresh_similarities(&mut self, sims: &[f64]) -> Result<()> {
        if sims.len() != self.items.len() {
            return Err(Error::dim("refresh_similarities", self.items.len(), sims.len()));
        }
        for (it, &s) in self.items.iter_mut().zip(sims) {
            it.similarity = s;
        }
        Ok(())
    }

    /// `k` distinct uniformly random resident positions (capped by occupancy).
    pub fn sample_uniform<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        let k = k.min(self.items.len());
        if k == 0 {
            return Vec::new();
        }
        rand::seq::index::sample(rng, self.items.len(), k).into_vec()
    }

    /// Fill-then-Retain-Drop update with the whole batch.
    ///
    /// `s_buffer` holds the current residents' similarities (same order as
    /// [`items`](Self::items)); `s_batch` the batch's. Batch samples are
    /// appended while there is room; the rest go through Retain-Drop with
    /// `n_seen` already counting the appended ones. The replacement count is
    /// capped at the number of residents. `n_seen` grows by the
    /// batch size.
    pub fn update<R: Rng>(
        &mut self,
        batch: &[BufferItem],
        s_batch: &[f64],
        s_buffer: &[f64],
        rng: &mut R,
    ) -> Result<UpdateOutcome> {
        if s_batch.len() != batch.len() {
            return Err(Error::dim("update_buffer (batch similarities)", batch.len(), s_batch.len()));
        }
        if s_buffer.len() != self.items.len() {
            return Err(Error::dim("update_buffer (buffer similarities)", self.items.len(), s_buffer.len()));
        }
        self.refresh_similarities(s_buffer)?;

        let room = self.capacity - self.items.len();
        let filled = room.min(batch.len());
        for (item, &s) in batch.iter().zip(s_batch).take(filled) {
            self.items.push(BufferItem { similarity: s, ..item.clone() });
        }
        self.n_seen += filled as u64;

        let rest = &batch[filled..];
        let mut outcome = UpdateOutcome { filled, ..Default::default() };
        if !rest.is_empty() {
            // a buffer smaller than half a batch cannot absorb ⌊b/2⌋ swaps
            let nu = compute_update_count(rest.len(), self.capacity, self.n_seen, rng).min(self.items.len());
            let residents = self.stored_similarities();
            let part = self.retain_drop(rest, &s_batch[filled..], &residents, nu, rng)?;
            outcome.replaced = part.replaced;
            outcome.positions = part.positions;
            outcome.retained = part.retained.into_iter().map(|i| i + filled).collect();
        }
        self.n_seen += rest.len() as u64;
        Ok(outcome)
    }

    /// Replaces exactly `nu` residents: batch samples are retained with
    /// rank-probability weights (novel first), residents dropped according to
    /// [`DropWeights`] (by default the complementary weights, redundant
    /// first). Does not touch `n_seen`.
    pub fn retain_drop<R: Rng>(
        &mut self,
        batch: &[BufferItem],
        s_batch: &[f64],
        s_buffer: &[f64],
        nu: usize,
        rng: &mut R,
    ) -> Result<UpdateOutcome> {
        if nu == 0 {
            return Ok(UpdateOutcome::default());
        }
        if nu > batch.len() || nu > self.items.len() {
            return Err(Error::domain(format!(
                "cannot replace {nu} samples (batch {}, buffer {})",
                batch.len(),
                self.items.len()
            )));
        }
        let keep_w = rank_probabilities(s_batch)?;
        let drop_w: Vec<f64> = match self.drop_weights {
            DropWeights::Complement => rank_probabilities(s_buffer)?.into_iter().map(|p| 1.0 - p).collect(),
            DropWeights::Rank => rank_probabilities(s_buffer)?,
        };
        let retained = weighted_sample_without_replacement(&keep_w, nu, rng)?;
        let positions = weighted_sample_without_replacement(&drop_w, nu, rng)?;
        for (&pos, &src) in positions.iter().zip(&retained) {
            self.items[pos] = BufferItem { similarity: s_batch[src], ..batch[src].clone() };
        }
        Ok(UpdateOutcome { filled: 0, replaced: nu, positions, retained })
    }

    /// Keep-first-m baseline: store until full, then ignore everything.
    pub fn offer_keep_first(&mut self, batch: &[BufferItem], s_batch: &[f64]) -> usize {
        let room = self.capacity - self.items.len();
        let filled = room.min(batch.len());
        for (item, &s) in batch.iter().zip(s_batch).take(filled) {
            self.items.push(BufferItem { similarity: s, ..item.clone() });
        }
        self.n_seen += batch.len() as u64;
        filled
    }

    /// Classic reservoir sampling over the stream (each offered sample ends up
    /// resident with probability `m / n_seen`).
    pub fn offer_reservoir<R: Rng>(&mut self, batch: &[BufferItem], s_batch: &[f64], rng: &mut R) -> usize {
        let mut written = 0;
        for (item, &s) in batch.iter().zip(s_batch) {
            self.n_seen += 1;
            let stored = BufferItem { similarity: s, ..item.clone() };
            if self.items.len() < self.capacity {
                self.items.push(stored);
                written += 1;
            } else {
                let j = rng.random_range(0..self.n_seen);
                if (j as usize) < self.capacity {
                    self.items[j as usize] = stored;
                    written += 1;
                }
            }
        }
        written
    }

    /// Debug dump, one `sample_id label similarity` row per resident.
    pub fn dump(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "# capacity={} n_seen={}", self.capacity, self.n_seen)?;
        writeln!(w, "# sample_id\tlabel\tsimilarity")?;
        for it in &self.items {
            writeln!(w, "{}\t{}\t{}", it.id, it.label, it.similarity)?;
        }
        Ok(())
    }
}

/// Number of Retain-Drop replacements for a batch of `b` offered to a buffer
/// of capacity `m` that has seen `n_seen` samples.
///
/// `n_left = b − max(0, m − n_seen)` positions are drawn uniformly from
/// `[0, n_seen)`; the hits below `m` are counted and the count clamped to
/// `[1, ⌊b/2⌋]` (the lower bound collapses to 0 when `b = 1`). When
/// `n_seen ≤ m` every draw is a hit, so no randomness is consumed.
pub fn compute_update_count<R: Rng>(b: usize, m: usize, n_seen: u64, rng: &mut R) -> usize {
    let free = (m as u64).saturating_sub(n_seen);
    let n_left = (b as u64).saturating_sub(free);
    let hits = if n_seen <= m as u64 {
        n_left
    } else {
        (0..n_left).filter(|_| rng.random_range(0..n_seen) < m as u64).count() as u64
    };
    (b / 2).min(hits.max(1) as usize)
}

/// Rank-based weights `π_i = 1 − (1/r_i) / Σ_j 1/r_j`, where rank 1 is the
/// most similar sample (ties broken by index). Returned in input order.
/// The weights sum to `n − 1`; a single element gets weight 0.
pub fn rank_probabilities(similarity: &[f64]) -> Result<Vec<f64>> {
    let n = similarity.len();
    if n == 0 {
        return Err(Error::domain("rank probabilities of an empty set"));
    }
    let harmonic: f64 = (1..=n).map(|r| 1.0 / r as f64).sum();
    let mut pi = vec![0.0; n];
    for (rank0, idx) in argsort_desc(similarity).into_iter().enumerate() {
        pi[idx] = 1.0 - (1.0 / (rank0 + 1) as f64) / harmonic;
    }
    Ok(pi)
}

/// Draws `k` distinct indices, each draw proportional to the weights of the
/// indices not yet taken. If the positive weight runs out before `k` draws,
/// the remainder is drawn uniformly from what is left.
pub fn weighted_sample_without_replacement<R: Rng>(weights: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = weights.len();
    if k > n {
        return Err(Error::domain(format!("cannot draw {k} of {n} without replacement")));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::domain("sampling weights must be finite and non-negative"));
    }
    let mut w = weights.to_vec();
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(k);
    let mut warned = false;
    while out.len() < k {
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut choice = None;
            for (i, &wi) in w.iter().enumerate() {
                if wi > 0.0 {
                    acc += wi;
                    choice = Some(i);
                    if target < acc {
                        break;
                    }
                }
            }
            choice.expect("positive total implies a positive weight")
        } else {
            if !warned {
                log::warn!("weighted sampling: {} draws fell back to uniform", k - out.len());
                warned = true;
            }
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        taken[pick] = true;
        w[pick] = 0.0;
        out.push(pick);
    }
    Ok(out)
}

/// Squared MMD under the kernel `k(x, y) = f(x)·f(y)`, which collapses to the
/// squared gap between the two means of `f`.
pub fn mmd_squared(f_buffer: &[f64], f_seen: &[f64]) -> Result<f64> {
    if f_buffer.is_empty() || f_seen.is_empty() {
        return Err(Error::domain("MMD of an empty sample"));
    }
    let mb = f_buffer.iter().sum::<f64>() / f_buffer.len() as f64;
    let ms = f_seen.iter().sum::<f64>() / f_seen.len() as f64;
    Ok((mb - ms) * (mb - ms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use proptest::prelude::*;

    fn items(ids: std::ops::Range<u64>) -> Vec<BufferItem> {
        ids.map(|id| BufferItem { id, label: (id % 3) as usize, tokens: vec![id as f64], similarity: 0.0 })
            .collect()
    }

    #[test]
    fn update_count_examples() {
        let mut rng = SeedTree::new(1).stream("nu");
        // buffer exactly full: every draw hits
        assert_eq!(compute_update_count(20, 102, 102, &mut rng), 10);
        assert_eq!(compute_update_count(7, 50, 50, &mut rng), 3);
        for _ in 0..100 {
            assert_eq!(compute_update_count(2, 5, 1000, &mut rng), 1);
            let nu = compute_update_count(20, 102, 10_000, &mut rng);
            assert!((1..=10).contains(&nu));
        }
        assert_eq!(compute_update_count(1, 5, 1000, &mut rng), 0);
    }

    #[test]
    fn rank_probability_examples() {
        let p = rank_probabilities(&[0.9, 0.1]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);
        let p = rank_probabilities(&[0.2, 0.7, -0.4]).unwrap();
        // ranks: idx1 -> 1, idx0 -> 2, idx2 -> 3
        assert!((p[1] - 5.0 / 11.0).abs() < 1e-15);
        assert!((p[0] - 8.0 / 11.0).abs() < 1e-15);
        assert!((p[2] - 9.0 / 11.0).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert_eq!(rank_probabilities(&[0.3]).unwrap(), vec![0.0]);
        let c = rank_probabilities(&[0.5; 4]).unwrap();
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(rank_probabilities(&[]).is_err());
    }

    #[test]
    fn sampler_edge_cases() {
        let mut rng = SeedTree::new(2).stream("s");
        let mut all = weighted_sample_without_replacement(&[1.0; 6], 6, &mut rng).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert!(weighted_sample_without_replacement(&[1.0; 2], 3, &mut rng).is_err());
        assert!(weighted_sample_without_replacement(&[1.0, -1.0], 1, &mut rng).is_err());
        // one positive weight, two draws: the second falls back to uniform
        let s = weighted_sample_without_replacement(&[0.0, 5.0, 0.0], 2, &mut rng).unwrap();
        assert_eq!(s[0], 1);
        assert_ne!(s[1], 1);
        // single-element rank weights are all zero; uniform fallback still works
        let w = rank_probabilities(&[0.1]).unwrap();
        assert_eq!(weighted_sample_without_replacement(&w, 1, &mut rng).unwrap(), vec![0]);
    }

    #[test]
    fn sampler_skewed_frequency() {
        let mut rng = SeedTree::new(3).stream("freq");
        let trials = 20_000;
        let hits = (0..trials)
            .filter(|_| weighted_sample_without_replacement(&[0.75, 0.25], 1, &mut rng).unwrap()[0] == 0)
            .count();
        let p = hits as f64 / trials as f64;
        let sd = (0.75f64 * 0.25 / trials as f64).sqrt();
        assert!((p - 0.75).abs() < 3.0 * sd, "p = {p}");
    }

    #[test]
    fn fill_phase() {
        let mut buf = RehearsalBuffer::new(10).unwrap();
        let mut rng = SeedTree::new(4).stream("buf");
        let batch = items(0..6);
        let out = buf.update(&batch, &[0.1; 6], &[], &mut rng).unwrap();
        assert_eq!(out.filled, 6);
        assert_eq!(buf.len(), 6);
        assert_eq!(buf.n_seen(), 6);
        // straddling batch: 4 appended, 4 go through Retain-Drop
        let batch = items(6..14);
        let sb = buf.stored_similarities();
        let out = buf.update(&batch, &[0.2; 8], &sb, &mut rng).unwrap();
        assert_eq!(out.filled, 4);
        assert_eq!(buf.len(), 10);
        assert_eq!(buf.n_seen(), 14);
        assert!((1..=2).contains(&out.replaced));
        assert!(out.retained.iter().all(|&i| i >= 4));
    }

    #[test]
    fn full_buffer_conservation() {
        let mut buf = RehearsalBuffer::new(8).unwrap();
        let mut rng = SeedTree::new(5).stream("buf");
        buf.update(&items(0..8), &[0.0; 8], &[], &mut rng).unwrap();
        for t in 1..20u64 {
            let batch = items(t * 100..t * 100 + 6);
            let sb: Vec<f64> = (0..6).map(|i| (i as f64 * 0.3).cos()).collect();
            let res = buf.stored_similarities();
            let out = buf.update(&batch, &sb, &res, &mut rng).unwrap();
            assert_eq!(buf.len(), 8);
            assert_eq!(out.positions.len(), out.replaced);
            for (&pos, &src) in out.positions.iter().zip(&out.retained) {
                assert_eq!(buf.items()[pos].id, batch[src].id);
            }
        }
    }

    #[test]
    fn retain_drop_probabilities() {
        // residents [0.99, -0.9]: drop weights (1 − π) = [2/3, 1/3]
        // batch [-0.8, 0.95]: keep weights π = [2/3, 1/3]
        let base = {
            let mut b = RehearsalBuffer::new(2).unwrap();
            let mut rng = SeedTree::new(0).stream("x");
            b.update(&items(0..2), &[0.99, -0.9], &[], &mut rng).unwrap();
            b
        };
        let batch = items(10..12);
        let trials = 10_000;
        let (mut dropped0, mut kept0) = (0, 0);
        let mut rng = SeedTree::new(6).stream("rd");
        for _ in 0..trials {
            let mut b = base.clone();
            let out = b.retain_drop(&batch, &[-0.8, 0.95], &[0.99, -0.9], 1, &mut rng).unwrap();
            dropped0 += usize::from(out.positions[0] == 0);
            kept0 += usize::from(out.retained[0] == 0);
        }
        let sd = ((2.0 / 9.0) / trials as f64).sqrt();
        for count in [dropped0, kept0] {
            let p = count as f64 / trials as f64;
            assert!((p - 2.0 / 3.0).abs() < 3.0 * sd, "p = {p}");
        }
    }

    #[test]
    fn rank_drop_weights_prefer_novel_residents() {
        let mut rng = SeedTree::new(2).stream("x");
        let mut b = RehearsalBuffer::new(2).unwrap().with_drop_weights(DropWeights::Rank);
        b.update(&items(0..2), &[0.99, -0.9], &[], &mut rng).unwrap();
        let trials = 10_000;
        let mut dropped0 = 0;
        for _ in 0..trials {
            let out = b.clone().retain_drop(&items(10..12), &[-0.8, 0.95], &[0.99, -0.9], 1, &mut rng).unwrap();
            dropped0 += usize::from(out.positions[0] == 0);
        }
        let p = dropped0 as f64 / trials as f64;
        assert!((p - 1.0 / 3.0).abs() < 3.0 * ((2.0 / 9.0) / trials as f64).sqrt(), "p = {p}");
    }

    #[test]
    fn keep_first_and_reservoir() {
        let mut rng = SeedTree::new(7).stream("r");
        let mut kf = RehearsalBuffer::new(3).unwrap();
        kf.offer_keep_first(&items(0..2), &[0.0; 2]);
        kf.offer_keep_first(&items(2..6), &[0.0; 4]);
        assert_eq!(kf.items().iter().map(|i| i.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(kf.n_seen(), 6);

        let mut rs = RehearsalBuffer::new(3).unwrap();
        for t in 0..10 {
            rs.offer_reservoir(&items(t * 5..t * 5 + 5), &[0.0; 5], &mut rng);
            assert!(rs.len() <= 3);
        }
        assert_eq!(rs.n_seen(), 50);
        assert!(RehearsalBuffer::new(0).is_err());
    }

    #[test]
    fn mismatched_similarities_rejected() {
        let mut buf = RehearsalBuffer::new(4).unwrap();
        let mut rng = SeedTree::new(8).stream("m");
        assert!(buf.update(&items(0..2), &[0.0], &[], &mut rng).is_err());
        assert!(buf.update(&items(0..2), &[0.0; 2], &[0.1], &mut rng).is_err());
    }

    #[test]
    fn mmd_examples() {
        assert_eq!(mmd_squared(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        assert!((mmd_squared(&[0.4, 0.6], &[0.3, 0.3, 0.3]).unwrap() - 0.04).abs() < 1e-15);
        assert!(mmd_squared(&[], &[1.0]).is_err());
    }

    #[test]
    fn dump_format() {
        let mut buf = RehearsalBuffer::new(2).unwrap();
        buf.offer_keep_first(&items(4..6), &[0.5, -0.25]);
        let mut out = Vec::new();
        buf.dump(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.ends_with("4\t1\t0.5\n5\t2\t-0.25\n"));
    }

    proptest! {
        #[test]
        fn rank_probabilities_monotone_invariant(s in prop::collection::vec(-1.0f64..1.0, 1..50)) {
            let t: Vec<f64> = s.iter().map(|x| x * x * x + 7.0).collect();
            prop_assert_eq!(rank_probabilities(&s).unwrap(), rank_probabilities(&t).unwrap());
        }

        #[test]
        fn deterministic_updates(seed in any::<u64>(), sims in prop::collection::vec(-1.0f64..1.0, 12)) {
            let run = || {
                let mut b = RehearsalBuffer::new(5).unwrap();
                let mut rng = SeedTree::new(seed).stream("det");
                for t in 0..4u64 {
                    let res = b.stored_similarities();
                    b.update(&items(t * 3..t * 3 + 3), &sims[t as usize * 3..t as usize * 3 + 3], &res, &mut rng).unwrap();
                }
                b
            };
            prop_assert_eq!(run(), run());
        }
    }
}
