//! Arrival-rate arithmetic: how much slower than the stream the learner is,
//! and which batches survive when it cannot keep up.

use rand::Rng;

use crate::error::{Error, Result};

/// Expected training time over total stream duration:
/// `C_S = t_batch · (n / b) / (n / λ)`.
pub fn relative_complexity(batch_time: f64, lambda: f64, dataset_size: usize, batch_size: usize) -> Result<f64> {
    if !(batch_time > 0.0) || !(lambda > 0.0) || dataset_size == 0 || batch_size == 0 {
        return Err(Error::domain(format!(
            "relative complexity needs positive inputs (batch_time={batch_time}, lambda={lambda}, \
             dataset_size={dataset_size}, batch_size={batch_size})"
        )));
    }
    let total_duration = dataset_size as f64 / lambda;
    let expected_train = batch_time * (dataset_size as f64 / batch_size as f64);
    Ok(expected_train / total_duration)
}

/// Batches kept when the learner is `c_s` times slower than the stream:
/// all of them when `c_s ≤ 1`, else a uniform `⌈n / c_s⌉`-subset in stream order.
pub fn skip_schedule<R: Rng>(num_batches: usize, c_s: f64, rng: &mut R) -> Vec<usize> {
    if c_s <= 1.0 || num_batches == 0 {
        return (0..num_batches).collect();
    }
    let keep = ((num_batches as f64 / c_s).ceil() as usize).clamp(1, num_batches);
    let mut kept = rand::seq::index::sample(rng, num_batches, keep).into_vec();
    kept.sort_unstable();
    kept
}
