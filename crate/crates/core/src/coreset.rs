//! Median-window coreset selection over fingerprint similarities, plus the
//! angular-cost measurement used to check how well a coreset preserves the
//! batch's cost.

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::fingerprints::FingerprintPool;
use crate::math::{angular_cost, argsort_desc, similarity_scores, Tensor3};

/// A chosen subset of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CoresetSelection {
    /// Batch indices in descending-similarity order.
    pub indices: Vec<usize>,
    pub sigma: f64,
    /// Per-sample similarities the selection was made from.
    pub similarity: Vec<f64>,
}

impl CoresetSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.similarity.len()
    }

    pub fn selected_similarities(&self) -> Vec<f64> {
        self.indices.iter().map(|&i| self.similarity[i]).collect()
    }
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(Error::domain(format!("coreset ratio {sigma} outside (0, 1]")));
    }
    Ok(())
}

/// `max(1, ⌊σ·b⌋)`. The 1e-9 slack keeps products such as `0.57 · 100`
/// from flooring to 56.
pub fn coreset_size(batch: usize, sigma: f64) -> usize {
    let raw = (sigma * batch as f64 + 1e-9).floor() as usize;
    raw.clamp(1, batch.max(1))
}

/// Sorted positions `[⌊b/2⌋ − ⌊c/2⌋, ⌊b/2⌋ + ⌊c/2⌋)`, widened by one slot on
/// the right when `c` is odd.
pub fn selection_window(batch: usize, c: usize) -> Range<usize> {
    let start = batch / 2 - c / 2;
    start..start + c
}

/// Picks the `c` samples around the median of the descending similarity order.
pub fn select_coreset(similarity: &[f64], sigma: f64) -> Result<CoresetSelection> {
    if similarity.is_empty() {
        return Err(Error::domain("cannot select a coreset from an empty batch"));
    }
    check_sigma(sigma)?;
    let b = similarity.len();
    let c = coreset_size(b, sigma);
    let order = argsort_desc(similarity);
    let indices = order[selection_window(b, c)].to_vec();
    Ok(CoresetSelection { indices, sigma, similarity: similarity.to_vec() })
}

/// Scores the batch against the aggregated fingerprints and selects.
pub fn select_with_fingerprints(
    emd: &Tensor3,
    pool: &FingerprintPool,
    sigma: f64,
    policy: ExecPolicy,
) -> Result<CoresetSelection> {
    let scores = similarity_scores(emd, &pool.aggregate(), policy)?;
    select_coreset(&scores, sigma)
}

/// Average angular distance of a set of similarities.
pub fn coreset_cost(similarity: &[f64]) -> Result<f64> {
    angular_cost(similarity)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    /// `|cost(C) − cost(B)| / cost(B)`, or 0 when `cost(B) = 0`.
    pub deviation: f64,
    pub sigma_b: f64,
}

pub fn check_quality_bound(batch_similarity: &[f64], selection: &CoresetSelection) -> Result<BoundReport> {
    let whole = coreset_cost(batch_similarity)?;
    let subset: Vec<f64> = selection.indices.iter().map(|&i| batch_similarity[i]).collect();
    let part = coreset_cost(&subset)?;
    let deviation = if whole > 0.0 { (part - whole).abs() / whole } else { 0.0 };
    Ok(BoundReport { deviation, sigma_b: selection.sigma * batch_similarity.len() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_3;

    #[test]
    fn window_arithmetic() {
        assert_eq!(coreset_size(20, 0.5), 10);
        assert_eq!(selection_window(20, 10), 5..15);
        assert_eq!(coreset_size(5, 0.4), 2);
        assert_eq!(selection_window(5, 2), 1..3);
        assert_eq!(selection_window(8, 8), 0..8);
        assert_eq!(coreset_size(100, 0.57), 57);
        assert_eq!(coreset_size(3, 0.1), 1);
        // odd c widens to the right
        assert_eq!(selection_window(10, 3), 4..7);
        assert_eq!(selection_window(7, 7), 0..7);
    }

    #[test]
    fn select_examples() {
        let s: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let sel = select_coreset(&s, 0.5).unwrap();
        let order = argsort_desc(&s);
        assert_eq!(sel.indices, order[5..15].to_vec());

        let full = select_coreset(&s, 1.0).unwrap();
        assert_eq!(full.indices, order);

        assert!(select_coreset(&[], 0.5).is_err());
        assert!(select_coreset(&[1.0], 0.0).is_err());
        assert!(select_coreset(&[1.0], 1.5).is_err());
        assert_eq!(select_coreset(&[0.2], 0.1).unwrap().indices, vec![0]);
    }

    #[test]
    fn cost_examples() {
        assert_eq!(coreset_cost(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((coreset_cost(&[0.5, 0.5]).unwrap() - FRAC_PI_3).abs() < 1e-15);
    }

    #[test]
    fn bound_examples() {
        let s = [0.3, -0.2, 0.8, 0.1];
        let sel = select_coreset(&s, 1.0).unwrap();
        assert_eq!(check_quality_bound(&s, &sel).unwrap().deviation, 0.0);

        let s = [0.4; 9];
        let sel = select_coreset(&s, 0.3).unwrap();
        assert_eq!(check_quality_bound(&s, &sel).unwrap().deviation, 0.0);

        let s = [1.0; 4];
        let sel = select_coreset(&s, 0.5).unwrap();
        assert_eq!(check_quality_bound(&s, &sel).unwrap().deviation, 0.0);

        // window picks {0.5, 0.1}; cost(B) = 1.2110855623591228, cost(C) = 1.2589132284149673
        let s = [0.9, 0.5, 0.1, -0.3];
        let sel = select_coreset(&s, 0.5).unwrap();
        assert_eq!(sel.indices, vec![1, 2]);
        let r = check_quality_bound(&s, &sel).unwrap();
        assert!((r.deviation - 0.039_491_566_527_041_32).abs() < 1e-12);
        assert_eq!(r.sigma_b, 2.0);
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(s in prop::collection::vec(-1.0f64..1.0, 1..60), sigma in 0.01f64..=1.0) {
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() + 2.0).collect();
            prop_assert_eq!(select_coreset(&s, sigma).unwrap().indices, select_coreset(&t, sigma).unwrap().indices);
        }

        #[test]
        fn even_windows_nest(s in prop::collection::vec(-1.0f64..1.0, 2..80), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let n = s.len();
            let half = n / 2;
            // even coreset sizes 2k for k in 1..=n/2
            let k1 = 1 + (a * half as f64) as usize % half;
            let k2 = 1 + (b * half as f64) as usize % half;
            let (lo, hi) = (k1.min(k2), k1.max(k2));
            let (s_lo, s_hi) = (2.0 * lo as f64 / n as f64, 2.0 * hi as f64 / n as f64);
            prop_assert_eq!(coreset_size(n, s_lo), 2 * lo);
            let small = select_coreset(&s, s_lo).unwrap().indices;
            let big = select_coreset(&s, s_hi).unwrap().indices;
            prop_assert!(small.iter().all(|i| big.contains(i)));
        }

        #[test]
        fn median_window_avoids_extremes(s in prop::collection::vec(-1.0f64..1.0, 4..80), sigma in 0.01f64..=1.0) {
            let n = s.len();
            prop_assume!(coreset_size(n, sigma) <= n - 2);
            let sel = select_coreset(&s, sigma).unwrap();
            let order = argsort_desc(&s);
            prop_assert!(!sel.indices.contains(&order[0]));
            prop_assert!(!sel.indices.contains(&order[n - 1]));
            let mut d = sel.indices.clone();
            d.sort_unstable();
            d.dedup();
            prop_assert_eq!(d.len(), sel.len());
            prop_assert!(sel.indices.iter().all(|&i| i < n));
        }
    }
}
