//! Numerical verification suites behind `streamfp verify`: coreset deviation
//! scaling, buffer MMD and drift, analytic gradients, sampler frequencies.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::buffer::{compute_update_count, DropWeights, mmd_squared, weighted_sample_without_replacement, BufferItem, RehearsalBuffer};
use crate::coreset::{check_quality_bound, select_coreset};
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::fingerprints::{gate_forward, AttunementParams, FingerprintPool};
use crate::learner::{BatchSpec, Embedder, EmbeddingBatch, PrototypeModel, SyntheticEmbedder};
use crate::math::{similarity_scores, Tensor3};
use crate::rng::SeedTree;

/// Smallest accepted `trials` value.
pub const MIN_TRIALS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Coreset,
    Buffer,
    Gradients,
    Sampler,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Coreset, Suite::Buffer, Suite::Gradients, Suite::Sampler];

    /// Trials used when the caller does not choose.
    pub fn default_trials(self) -> usize {
        match self {
            Suite::Coreset => 200,
            Suite::Buffer => 50,
            Suite::Gradients => 20,
            Suite::Sampler => 100_000,
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coreset" => Ok(Suite::Coreset),
            "buffer" => Ok(Suite::Buffer),
            "gradients" => Ok(Suite::Gradients),
            "sampler" => Ok(Suite::Sampler),
            other => Err(Error::Config(vec![format!(
                "unknown suite `{other}` (expected coreset, buffer, gradients or sampler)"
            )])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Runs one suite. `trials` is interpreted per suite (see [`Suite::default_trials`]).
pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    if trials < MIN_TRIALS {
        return Err(Error::Config(vec![format!("trials must be >= {MIN_TRIALS} (got {trials})")]));
    }
    let seeds = SeedTree::new(seed);
    Ok(match suite {
        Suite::Coreset => vec![coreset_scaling(trials, &seeds)?],
        Suite::Buffer => vec![
            mmd_oracle(100, &seeds)?,
            drift_comparison(1..=trials as u64)?,
            update_count_expectation(trials.max(1000) * 100, &seeds),
        ],
        Suite::Gradients => vec![gradient_check(trials, &seeds)?],
        Suite::Sampler => sampler_frequencies(trials, &seeds)?,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Median relative cost deviation of the coreset over `trials` batches of
/// Gaussian embeddings scored against a Gaussian fingerprint pool.
pub fn coreset_deviation_median(batch: usize, sigma: f64, trials: usize, seeds: &SeedTree) -> Result<f64> {
    let (tokens, dim, n, lp) = (4, 32, 10, 2);
    let mut devs = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = seeds.indexed("coreset.trial", &[batch as u64, t as u64]);
        let pool = FingerprintPool::random(n, lp, dim, 1.0, &mut rng)?;
        let emd = Tensor3::from_vec(batch, tokens, dim, gaussian(&mut rng, batch * tokens * dim, 1.0))?;
        let sims = similarity_scores(&emd, &pool.aggregate(), ExecPolicy::default())?;
        let sel = select_coreset(&sims, sigma)?;
        devs.push(check_quality_bound(&sims, &sel)?.deviation);
    }
    Ok(median(devs))
}

/// Deviation at σb = 800 must be at most 0.8× the deviation at σb = 200.
pub fn coreset_scaling(trials: usize, seeds: &SeedTree) -> Result<CheckResult> {
    let sigma = 0.5;
    let small = coreset_deviation_median(400, sigma, trials, seeds)?;
    let large = coreset_deviation_median(1600, sigma, trials, seeds)?;
    let ratio = large / small;
    Ok(CheckResult::new(
        "coreset deviation scaling",
        ratio <= 0.8,
        format!("median deviation {small:.3e} at σb=200, {large:.3e} at σb=800, ratio {ratio:.3} (limit 0.8)"),
    ))
}

/// Brute-force MMD² with the rank-1 kernel `k(x, y) = x·y`.
pub fn mmd_brute_force(a: &[f64], b: &[f64]) -> f64 {
    let mean_k = |x: &[f64], y: &[f64]| {
        let mut s = 0.0;
        for &p in x {
            for &q in y {
                s += p * q;
            }
        }
        s / (x.len() * y.len()) as f64
    };
    mean_k(a, a) + mean_k(b, b) - 2.0 * mean_k(a, b)
}

pub fn mmd_oracle(instances: usize, seeds: &SeedTree) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = seeds.indexed("mmd.instance", &[i as u64]);
        let na = rng.random_range(1..=200);
        let nb = rng.random_range(1..=200);
        let a: Vec<f64> = (0..na).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.random_range(-1.0..=1.0)).collect();
        worst = worst.max((mmd_squared(&a, &b)? - mmd_brute_force(&a, &b)).abs());
    }
    Ok(CheckResult::new(
        "mmd closed form vs double sum",
        worst <= 1e-12,
        format!("max |difference| {worst:.3e} over {instances} instances (limit 1e-12)"),
    ))
}

/// Shape of the drifting stream used for buffer comparisons.
#[derive(Debug, Clone, Copy)]
pub struct DriftStream {
    pub tasks: usize,
    pub batches_per_task: usize,
    pub batch: usize,
    pub capacity: usize,
    pub dim: usize,
    pub tokens: usize,
    pub classes: usize,
    pub drift_scale: f64,
    pub drop_weights: DropWeights,
}

impl Default for DriftStream {
    fn default() -> Self {
        Self {
            tasks: 5,
            batches_per_task: 20,
            batch: 20,
            capacity: 102,
            dim: 16,
            tokens: 2,
            classes: 10,
            drift_scale: 1.0,
            drop_weights: DropWeights::Complement,
        }
    }
}

/// Final MMD² to the seen stream for a Retain-Drop buffer and a keep-first
/// buffer fed the same drifting stream, scored against a fixed random pool.
pub fn drift_mmd(stream: &DriftStream, seed: u64) -> Result<(f64, f64)> {
    let seeds = SeedTree::new(seed);
    let emb = Embedder::Synthetic(SyntheticEmbedder::generate(
        stream.classes,
        stream.dim,
        stream.tokens,
        stream.tasks,
        1.0,
        stream.drift_scale,
        seeds.stream("drift.data").random(),
    )?);
    let pool = FingerprintPool::random(4, 2, stream.dim, 1.0, &mut seeds.stream("drift.pool"))?.aggregate();
    let per_task = stream.classes / stream.tasks;
    let mut retain = RehearsalBuffer::new(stream.capacity)?.with_drop_weights(stream.drop_weights);
    let mut keep = RehearsalBuffer::new(stream.capacity)?;
    let mut seen = Vec::new();
    let mut rng = seeds.stream("drift.buffer");
    let mut id = 0u64;
    for task in 0..stream.tasks {
        let classes: Vec<usize> = (task * per_task..(task + 1) * per_task).collect();
        for _ in 0..stream.batches_per_task {
            let ids: Vec<u64> = (id..id + stream.batch as u64).collect();
            id += stream.batch as u64;
            let batch = emb.embed(&BatchSpec { task, ids, classes: classes.clone() })?;
            let sims = similarity_scores(&batch.tokens, &pool, ExecPolicy::default())?;
            let items = to_items(&batch, &sims);
            let resident = retain.stored_similarities();
            retain.update(&items, &sims, &resident, &mut rng)?;
            keep.offer_keep_first(&items, &sims);
            seen.extend_from_slice(&sims);
        }
    }
    Ok((mmd_squared(&retain.stored_similarities(), &seen)?, mmd_squared(&keep.stored_similarities(), &seen)?))
}

fn to_items(batch: &EmbeddingBatch, sims: &[f64]) -> Vec<BufferItem> {
    (0..batch.len())
        .map(|i| BufferItem {
            id: batch.ids[i],
            label: batch.labels[i],
            tokens: batch.tokens.outer(i).to_vec(),
            similarity: sims[i],
        })
        .collect()
}

/// Retain-Drop must match or beat keep-first in at least 80% of seeds.
pub fn drift_comparison(seeds: std::ops::RangeInclusive<u64>) -> Result<CheckResult> {
    drift_comparison_on(&DriftStream::default(), seeds)
}

pub fn drift_comparison_on(stream: &DriftStream, seeds: std::ops::RangeInclusive<u64>) -> Result<CheckResult> {
    let mut wins = 0;
    let mut total = 0;
    let mut ratios = Vec::new();
    for s in seeds {
        let (rd, kf) = drift_mmd(stream, s)?;
        total += 1;
        if rd <= kf {
            wins += 1;
        }
        ratios.push(if kf > 0.0 { rd / kf } else { 0.0 });
    }
    let share = wins as f64 / total as f64;
    Ok(CheckResult::new(
        "retain-drop vs keep-first MMD under drift",
        share >= 0.8,
        format!("retain-drop ≤ keep-first in {wins}/{total} seeds ({:.0}%, need 80%), median MMD ratio {:.3}", share * 100.0, median(ratios)),
    ))
}

/// `E[min(⌊b/2⌋, max(1, Binomial(n_left, m/n_seen)))]`.
pub fn expected_update_count(b: usize, m: usize, n_seen: u64) -> f64 {
    let free = (m as u64).saturating_sub(n_seen);
    let n = (b as u64).saturating_sub(free) as usize;
    let p = (m as f64 / n_seen as f64).min(1.0);
    let cap = b / 2;
    if p >= 1.0 {
        return cap.min(n.max(1)) as f64;
    }
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut e = 0.0;
    for k in 0..=n {
        e += pmf * cap.min(k.max(1)) as f64;
        if k < n {
            pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
        }
    }
    e
}

/// Settings `(b, m, n_seen)` for the update-count expectation check.
pub const UPDATE_COUNT_SETTINGS: [(usize, usize, u64); 5] =
    [(20, 102, 150), (20, 102, 500), (20, 102, 5000), (64, 200, 400), (10, 30, 31)];

pub fn update_count_expectation(trials: usize, seeds: &SeedTree) -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (i, &(b, m, n)) in UPDATE_COUNT_SETTINGS.iter().enumerate() {
        let mut rng = seeds.indexed("nu", &[i as u64]);
        let mc = (0..trials).map(|_| compute_update_count(b, m, n, &mut rng) as f64).sum::<f64>() / trials as f64;
        let exact = expected_update_count(b, m, n);
        let rel = (mc - exact).abs() / exact;
        worst = worst.max(rel);
        parts.push(format!("b={b} m={m} n={n}: {mc:.4} vs {exact:.4}"));
    }
    CheckResult::new(
        "update count expectation",
        worst < 0.01,
        format!("max relative gap {:.3}% ({})", worst * 100.0, parts.join("; ")),
    )
}

fn params_mut(m: &mut PrototypeModel, group: usize) -> &mut [f64] {
    match group {
        0 => m.pool.params_mut().as_mut_slice(),
        1 => m.attn.gate.as_mut_slice(),
        _ => m.prototypes.as_mut_slice(),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Random small model whose gate has no near-ties, plus a labelled batch.
fn gradient_case(seeds: &SeedTree, case: usize) -> Result<(PrototypeModel, EmbeddingBatch)> {
    for attempt in 0u64.. {
        let mut rng = seeds.indexed("gradients.case", &[case as u64, attempt]);
        let dim = rng.random_range(2..=5);
        let n = rng.random_range(1..=3);
        let lp = 2 * rng.random_range(1..=2);
        let experts = rng.random_range(1..=4);
        let top_r = rng.random_range(1..=experts);
        let classes = rng.random_range(2..=4);
        let (b, l) = (rng.random_range(1..=4), rng.random_range(1..=3));
        let pool = FingerprintPool::random(n, lp, dim, 1.0, &mut rng)?;
        let attn = AttunementParams::random(dim, experts, top_r, 0.5, &mut rng)?;
        let gate = gate_forward(&pool, &attn, experts)?;
        let mut sorted: Vec<Vec<f64>> = (0..n).map(|i| gate.scores.row(i).to_vec()).collect();
        let tie = top_r < experts
            && sorted.iter_mut().any(|row| {
                row.sort_by(|a, b| b.total_cmp(a));
                row[top_r - 1] - row[top_r] < 1e-3
            });
        if tie {
            continue;
        }
        let protos = PrototypeModel::random_prototypes(classes, dim, 0.5, &mut rng);
        let model = PrototypeModel::new(protos, pool, attn, 0.1, 1)?;
        let tokens = Tensor3::from_vec(b, l, dim, gaussian(&mut rng, b * l * dim, 1.0))?;
        let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
        return Ok((model, EmbeddingBatch { tokens, labels, ids: (0..b as u64).collect() }));
    }
    unreachable!()
}

/// Max relative error between analytic and central-difference gradients
/// over one model, for every entry of the pool, gate and prototypes.
pub fn gradient_error(model: &PrototypeModel, batch: &EmbeddingBatch, h: f64) -> Result<f64> {
    let (_, g) = model.loss_and_gradients(batch)?;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    let loss = |m: &PrototypeModel| m.forward_loss(batch).map(|o| o.loss);

    for (group, analytic) in [g.pool.as_slice(), g.gate.as_slice(), g.prototypes.as_slice()].into_iter().enumerate() {
        for (k, &a) in analytic.iter().enumerate() {
            let x = params_mut(&mut probe, group)[k];
            params_mut(&mut probe, group)[k] = x + h;
            let up = loss(&probe)?;
            params_mut(&mut probe, group)[k] = x - h;
            let down = loss(&probe)?;
            params_mut(&mut probe, group)[k] = x;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

pub fn gradient_check(configs: usize, seeds: &SeedTree) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for case in 0..configs {
        let (model, batch) = gradient_case(seeds, case)?;
        worst = worst.max(gradient_error(&model, &batch, 1e-5)?);
    }
    Ok(CheckResult::new(
        "analytic vs finite-difference gradients",
        worst < 1e-4,
        format!("max relative error {worst:.3e} over {configs} configurations (limit 1e-4)"),
    ))
}

/// First-draw frequencies of the weighted sampler against normalized weights,
/// within three binomial standard deviations per index.
pub fn sampler_frequencies(draws: usize, seeds: &SeedTree) -> Result<Vec<CheckResult>> {
    let cases: [(&str, Vec<f64>); 2] = [("uniform", vec![1.0; 5]), ("skewed", vec![0.75, 0.25])];
    let mut out = Vec::new();
    for (name, w) in cases {
        let mut rng = seeds.stream(&format!("sampler.{name}"));
        let mut counts = vec![0usize; w.len()];
        for _ in 0..draws {
            counts[weighted_sample_without_replacement(&w, 1, &mut rng)?[0]] += 1;
        }
        let total: f64 = w.iter().sum();
        let mut ok = true;
        let mut table = Vec::new();
        for (i, (&c, &wi)) in counts.iter().zip(&w).enumerate() {
            let p = wi / total;
            let freq = c as f64 / draws as f64;
            let sd = (p * (1.0 - p) / draws as f64).sqrt();
            ok &= (freq - p).abs() <= 3.0 * sd;
            table.push(format!("[{i}] {freq:.4} (p={p:.4} ±{:.4})", 3.0 * sd));
        }
        out.push(CheckResult::new(&format!("sampler first-draw frequencies, {name}"), ok, table.join(" ")));
    }
    Ok(out)
}

/// Scores a random Gaussian batch against a random pool; shared by the bench
/// command and tests so every selector sees identical inputs.
pub fn random_selection_inputs(
    b: usize,
    tokens: usize,
    dim: usize,
    n: usize,
    seed: u64,
) -> Result<(Tensor3, FingerprintPool)> {
    let seeds = SeedTree::new(seed);
    let mut rng = seeds.stream("bench.inputs");
    let emd = Tensor3::from_vec(b, tokens, dim, gaussian(&mut rng, b * tokens * dim, 1.0))?;
    let pool = FingerprintPool::random(n, 2, dim, 1.0, &mut rng)?;
    Ok((emd, pool))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names() {
        assert_eq!("buffer".parse::<Suite>().unwrap(), Suite::Buffer);
        assert!("everything".parse::<Suite>().is_err());
        assert!(run_suite(Suite::Coreset, 0, 1).is_err());
    }

    #[test]
    fn brute_force_mmd_examples() {
        assert!(mmd_brute_force(&[0.5, 0.5], &[0.5]).abs() < 1e-15);
        assert!((mmd_brute_force(&[1.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn expected_count_edges() {
        // p = 1: every draw hits, so the cap binds
        assert!((expected_update_count(20, 100, 100) - 10.0).abs() < 1e-12);
        // p → 0: the floor of one binds
        assert!((expected_update_count(20, 1, 1_000_000_000) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_suite_small() {
        let r = gradient_check(5, &SeedTree::new(9)).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn rank_drop_weights_track_the_seen_stream() {
        let stream = DriftStream { drop_weights: DropWeights::Rank, ..Default::default() };
        let r = drift_comparison_on(&stream, 1..=20).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn sampler_suite_small() {
        for r in sampler_frequencies(20_000, &SeedTree::new(4)).unwrap() {
            assert!(r.passed, "{r}");
        }
    }
}
