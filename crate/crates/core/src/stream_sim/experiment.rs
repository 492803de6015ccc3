//! Experiment driver: plans the stream, measures per-batch cost on a warm-up
//! copy, derives the skip schedule and runs select → train → buffer update on
//! every retained batch, evaluating at each task boundary.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::buffer::{mmd_squared, BufferItem, RehearsalBuffer};
use crate::coreset::{coreset_size, select_coreset};
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::fingerprints::{load_weights, AttunementParams, FingerprintPool};
use crate::learner::{
    average_accuracy, average_forgetting, AccuracyMatrix, BatchSpec, Embedder, EmbeddingBatch, FileEmbedder,
    PrototypeModel, SyntheticEmbedder,
};
use crate::math::{similarity_scores, Tensor3};
use crate::rng::SeedTree;
use crate::stream_sim::arrival::{relative_complexity, skip_schedule};
use crate::stream_sim::baselines::{kcenter_coreset, random_coreset};
use crate::stream_sim::config::{
    BufferPolicy, ClockKind, DataSource, Selector, SimilarityRefresh, SkipMode, StreamConfig,
};
use crate::stream_sim::report::{MetricsReport, StageTimings};

/// Evaluation sample ids live far above any stream id.
const EVAL_ID_BASE: u64 = 1 << 40;

/// Permutation of `0..classes` for a class-order id; 0 is the identity.
pub fn class_permutation(classes: usize, order: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..classes).collect();
    if order != 0 {
        perm.shuffle(&mut SeedTree::new(order).stream("class_order"));
    }
    perm
}

/// Splits a class order into `tasks` contiguous groups whose sizes differ by
/// at most one.
pub fn task_classes(perm: &[usize], tasks: usize) -> Vec<Vec<usize>> {
    (0..tasks)
        .map(|t| perm[t * perm.len() / tasks..(t + 1) * perm.len() / tasks].to_vec())
        .collect()
}

/// Which samples arrive in which batch, and which samples evaluate each task.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPlan {
    pub batches: Vec<BatchSpec>,
    pub eval: Vec<BatchSpec>,
    pub task_classes: Vec<Vec<usize>>,
}

impl StreamPlan {
    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    /// Index of the last batch of each task.
    pub fn task_ends(&self) -> Vec<usize> {
        let mut ends = vec![0; self.task_classes.len()];
        for (i, b) in self.batches.iter().enumerate() {
            ends[b.task] = i;
        }
        ends
    }

    /// Synthetic stream: batch `i` belongs to task `⌊i·T/num_batches⌋`.
    pub fn synthetic(cfg: &StreamConfig) -> Self {
        let (n, b, t) = (cfg.stream.dataset_size, cfg.stream.batch_size, cfg.stream.tasks);
        let groups = task_classes(&class_permutation(cfg.data.classes, cfg.data.class_order), t);
        let num = cfg.num_batches();
        let batches = (0..num)
            .map(|i| {
                let task = i * t / num;
                let lo = (i * b) as u64;
                let hi = ((i + 1) * b).min(n) as u64;
                BatchSpec { task, ids: (lo..hi).collect(), classes: groups[task].clone() }
            })
            .collect();
        let e = cfg.data.eval_per_task as u64;
        let eval = (0..t)
            .map(|task| {
                let lo = EVAL_ID_BASE + task as u64 * e;
                BatchSpec { task, ids: (lo..lo + e).collect(), classes: groups[task].clone() }
            })
            .collect();
        StreamPlan { batches, eval, task_classes: groups }
    }

    /// File stream: rows are grouped by the task of their label (file order
    /// kept within a task). The last `eval_per_task` rows of each task are
    /// held out, capped at half the task. If more training rows remain than
    /// `dataset_size`, each task keeps a proportional prefix.
    pub fn from_file(cfg: &StreamConfig, file: &FileEmbedder) -> Result<Self> {
        let classes = file.labels.iter().copied().max().map_or(0, |c| c + 1);
        let t = cfg.stream.tasks;
        if classes < t {
            return Err(Error::Config(vec![format!(
                "embedding file has {classes} classes, fewer than stream.tasks ({t})"
            )]));
        }
        let groups = task_classes(&class_permutation(classes, cfg.data.class_order), t);
        let mut task_of = vec![0; classes];
        for (task, g) in groups.iter().enumerate() {
            for &c in g {
                task_of[c] = task;
            }
        }
        let mut rows: Vec<Vec<u64>> = vec![Vec::new(); t];
        for (i, &y) in file.labels.iter().enumerate() {
            rows[task_of[y]].push(i as u64);
        }
        let mut train = Vec::with_capacity(t);
        let mut eval = Vec::with_capacity(t);
        for (task, r) in rows.into_iter().enumerate() {
            let hold = cfg.data.eval_per_task.min(r.len() / 2);
            if hold == 0 {
                return Err(Error::Config(vec![format!("task {task} has too few rows to hold out an evaluation set")]));
            }
            let split = r.len() - hold;
            eval.push(BatchSpec { task, ids: r[split..].to_vec(), classes: groups[task].clone() });
            train.push(r[..split].to_vec());
        }
        let available: usize = train.iter().map(Vec::len).sum();
        let want = cfg.stream.dataset_size;
        if available < want {
            return Err(Error::Config(vec![format!(
                "stream.dataset_size ({want}) exceeds the {available} training rows in the embedding file"
            )]));
        }
        let mut keep: Vec<usize> = train.iter().map(|r| r.len() * want / available).collect();
        let mut short = want - keep.iter().sum::<usize>();
        for (k, r) in keep.iter_mut().zip(&train) {
            let extra = short.min(r.len() - *k);
            *k += extra;
            short -= extra;
        }
        let b = cfg.stream.batch_size;
        let mut batches = Vec::new();
        for (task, (r, &k)) in train.iter().zip(&keep).enumerate() {
            for chunk in r[..k].chunks(b) {
                batches.push(BatchSpec { task, ids: chunk.to_vec(), classes: groups[task].clone() });
            }
        }
        Ok(StreamPlan { batches, eval, task_classes: groups })
    }
}

/// Stage timer: either a deterministic multiply-add count or the host clock.
#[derive(Debug, Clone, Copy)]
struct Clock {
    kind: ClockKind,
    seconds_per_op: f64,
}

impl Clock {
    fn time<T>(&self, ops: f64, f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
        match self.kind {
            ClockKind::Virtual => Ok((f()?, ops * self.seconds_per_op)),
            ClockKind::Wall => {
                let start = Instant::now();
                let out = f()?;
                Ok((out, start.elapsed().as_secs_f64()))
            }
        }
    }
}

/// Mutable learning state plus the stream pieces it needs.
#[derive(Clone)]
struct Pipeline<'a> {
    cfg: &'a StreamConfig,
    embedder: &'a Embedder,
    seeds: SeedTree,
    /// Prefix for per-batch rng labels, so warm-up never shares draws with
    /// the measured run.
    prefix: &'static str,
    clock: Clock,
    policy: ExecPolicy,
    model: PrototypeModel,
    buffer: Option<RehearsalBuffer>,
    timings: StageTimings,
    samples_trained: u64,
    selection_samples: u64,
    seen_similarity: Vec<f64>,
}

impl<'a> Pipeline<'a> {
    fn new(cfg: &'a StreamConfig, embedder: &'a Embedder, seeds: SeedTree, classes: usize, policy: ExecPolicy) -> Result<Self> {
        let m = &cfg.model;
        let dim = embedder.dim();
        let pool = FingerprintPool::random(
            m.fingerprints,
            m.fingerprint_length,
            dim,
            m.fingerprint_init_std,
            &mut seeds.stream("init.pool"),
        )?;
        let attn = match &m.weights_file {
            Some(path) => AttunementParams::from_experts(
                load_weights(path)?,
                m.top_r,
                m.gate_init_std,
                &mut seeds.stream("init.gate"),
            )?,
            None => AttunementParams::random(dim, m.experts, m.top_r, m.gate_init_std, &mut seeds.stream("init.gate"))?,
        };
        let protos =
            PrototypeModel::random_prototypes(classes, dim, m.prototype_init_std, &mut seeds.stream("init.prototypes"));
        let model = PrototypeModel::new(protos, pool, attn, m.learning_rate, m.steps)?;
        let buffer = match cfg.buffer.policy {
            BufferPolicy::None => None,
            _ => Some(RehearsalBuffer::new(cfg.buffer.size)?.with_drop_weights(cfg.buffer.drop_weights)),
        };
        Ok(Self {
            cfg,
            embedder,
            seeds,
            prefix: "",
            clock: Clock { kind: cfg.stream.clock, seconds_per_op: cfg.stream.seconds_per_op },
            policy,
            model,
            buffer,
            timings: StageTimings::default(),
            samples_trained: 0,
            selection_samples: 0,
            seen_similarity: Vec::new(),
        })
    }

    fn rng(&self, label: &str, batch: usize) -> crate::rng::StreamRng {
        self.seeds.indexed(&format!("{}{label}", self.prefix), &[batch as u64])
    }

    fn needs_similarity(&self) -> bool {
        self.cfg.selection.selector == Selector::Streamfp
            || self.cfg.buffer.policy == BufferPolicy::Streamfp
            || self.cfg.run.check_mmd
    }

    /// Multiply-adds for scoring `b` samples against the aggregated pool.
    fn similarity_ops(&self, b: usize) -> f64 {
        let (l, d) = (self.embedder.tokens(), self.embedder.dim());
        let p = self.model.pool.params().shape();
        (b * l * d + p.0 * p.1 * d + b * d) as f64
    }

    fn train_ops(&self, n: usize) -> f64 {
        let (l, d) = (self.embedder.tokens(), self.embedder.dim());
        let (np, lp, _) = self.model.pool.params().shape();
        let k = self.model.classes();
        let r = self.model.attn.expert_count();
        let experts = self.model.attn.top_r() * 2 * d * d + d * r;
        // forward + backward ≈ 3 forwards
        3.0 * self.cfg.model.steps as f64 * (n * d * (l + k) + np * lp * experts) as f64
    }

    fn process(&mut self, index: usize, spec: &BatchSpec, sigma: f64) -> Result<()> {
        let (l, d) = (self.embedder.tokens(), self.embedder.dim());
        let (batch, t) = self.clock.time((spec.ids.len() * l * d) as f64, || self.embedder.embed(spec))?;
        self.timings.embed += t;
        let b = batch.len();
        let c = coreset_size(b, sigma);

        // selection (similarity scoring counts toward selection time)
        let sel_ops = match self.cfg.selection.selector {
            Selector::Streamfp => self.similarity_ops(b) + (b as f64) * (b as f64).log2().max(1.0),
            Selector::Random => b as f64,
            Selector::Kcenter => (b * l * d + b * c * d) as f64,
            Selector::None => 0.0,
        };
        let needs_sim = self.needs_similarity();
        let sim_ops = if needs_sim && self.cfg.selection.selector != Selector::Streamfp { self.similarity_ops(b) } else { 0.0 };
        let mut rng = self.rng("selection", index);
        let pool_agg = self.model.pool.aggregate();
        let policy = self.policy;
        let selector = self.cfg.selection.selector;
        let ((sims, chosen), t) = self.clock.time(sel_ops + sim_ops, || {
            let sims = if needs_sim { similarity_scores(&batch.tokens, &pool_agg, policy)? } else { Vec::new() };
            let chosen = match selector {
                Selector::Streamfp => select_coreset(&sims, sigma)?.indices,
                Selector::Random => random_coreset(b, sigma, &mut rng)?,
                Selector::Kcenter => kcenter_coreset(&batch.tokens, sigma, policy)?,
                Selector::None => (0..b).collect(),
            };
            Ok((sims, chosen))
        })?;
        self.timings.selection += t;
        if selector != Selector::None {
            self.selection_samples += b as u64;
        }

        // train on coreset ∪ equal-size uniform buffer minibatch
        let mut train = batch.select(&chosen);
        if let Some(buf) = &self.buffer {
            let picks = buf.sample_uniform(chosen.len(), &mut self.rng("replay", index));
            if !picks.is_empty() {
                train = train.concat(&replay_batch(buf, &picks, l, d)?)?;
            }
        }
        let n_train = train.len();
        let ops = self.train_ops(n_train);
        let model = &mut self.model;
        let ((), t) = self.clock.time(ops, || model.train_step(&train).map(|_| ()))?;
        self.timings.train += t;
        self.samples_trained += n_train as u64;

        // buffer update with the whole batch
        if self.cfg.run.check_mmd {
            self.seen_similarity.extend_from_slice(&sims);
        }
        let Some(buf) = self.buffer.as_mut() else { return Ok(()) };
        let items: Vec<BufferItem> = (0..b)
            .map(|i| BufferItem {
                id: batch.ids[i],
                label: batch.labels[i],
                tokens: batch.tokens.outer(i).to_vec(),
                similarity: sims.get(i).copied().unwrap_or(0.0),
            })
            .collect();
        let mut rng = self.seeds.indexed(&format!("{}buffer", self.prefix), &[index as u64]);
        let policy_kind = self.cfg.buffer.policy;
        let fresh = self.cfg.buffer.refresh == SimilarityRefresh::Fresh;
        let agg = self.model.pool.aggregate();
        let ops = match policy_kind {
            BufferPolicy::Streamfp if fresh => {
                let (np, lp, _) = self.model.pool.params().shape();
                ((b + buf.len()) * (l * d + d) + np * lp * d) as f64 + (b + buf.len()) as f64 * 8.0
            }
            BufferPolicy::Streamfp => (b + buf.len()) as f64 * 8.0,
            _ => b as f64,
        };
        let ((), t) = self.clock.time(ops, || {
            match policy_kind {
                BufferPolicy::Streamfp => {
                    let (s_batch, s_buffer) = if fresh {
                        let s_batch = similarity_scores(&batch.tokens, &agg, policy)?;
                        let s_buffer = if buf.is_empty() {
                            Vec::new()
                        } else {
                            let all: Vec<usize> = (0..buf.len()).collect();
                            similarity_scores(&replay_batch(buf, &all, l, d)?.tokens, &agg, policy)?
                        };
                        (s_batch, s_buffer)
                    } else {
                        (sims.clone(), buf.stored_similarities())
                    };
                    buf.update(&items, &s_batch, &s_buffer, &mut rng)?;
                }
                BufferPolicy::Reservoir => {
                    let s: Vec<f64> = items.iter().map(|it| it.similarity).collect();
                    buf.offer_reservoir(&items, &s, &mut rng);
                }
                BufferPolicy::KeepFirst => {
                    let s: Vec<f64> = items.iter().map(|it| it.similarity).collect();
                    buf.offer_keep_first(&items, &s);
                }
                BufferPolicy::None => {}
            }
            Ok(())
        })?;
        self.timings.buffer_update += t;
        Ok(())
    }

    fn evaluate(&mut self, plan: &StreamPlan, through: usize) -> Result<Vec<f64>> {
        let (l, d) = (self.embedder.tokens(), self.embedder.dim());
        let n: usize = plan.eval[..=through].iter().map(|s| s.ids.len()).sum();
        let fwd = self.train_ops(n) / (3.0 * self.cfg.model.steps as f64);
        let (embedder, model) = (self.embedder, &self.model);
        let (row, t) = self.clock.time((n * l * d) as f64 + fwd, || {
            plan.eval[..=through].iter().map(|spec| model.evaluate(&embedder.embed(spec)?)).collect::<Result<Vec<f64>>>()
        })?;
        self.timings.evaluation += t;
        Ok(row)
    }
}

/// Rebuilds an embedding batch from buffer residents.
fn replay_batch(buf: &RehearsalBuffer, picks: &[usize], l: usize, d: usize) -> Result<EmbeddingBatch> {
    let items = buf.items();
    let mut data = Vec::with_capacity(picks.len() * l * d);
    for &p in picks {
        data.extend_from_slice(&items[p].tokens);
    }
    Ok(EmbeddingBatch {
        tokens: Tensor3::from_vec(picks.len(), l, d, data)?,
        labels: picks.iter().map(|&p| items[p].label).collect(),
        ids: picks.iter().map(|&p| items[p].id).collect(),
    })
}

/// Builds the embedder described by the config for one seed.
pub fn build_embedder(cfg: &StreamConfig, seeds: &SeedTree) -> Result<(Embedder, StreamPlan, usize)> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let d = &cfg.data;
            let data_seed: u64 = seeds.stream("data").random();
            let emb = SyntheticEmbedder::generate(
                d.classes,
                d.dim,
                d.tokens,
                cfg.stream.tasks,
                d.noise_std,
                d.drift_scale,
                data_seed,
            )?;
            Ok((Embedder::Synthetic(emb), StreamPlan::synthetic(cfg), d.classes))
        }
        DataSource::File => {
            let path = cfg.data.path.as_ref().ok_or_else(|| Error::Config(vec!["data.path is required".into()]))?;
            let file = FileEmbedder::load(path)?;
            let plan = StreamPlan::from_file(cfg, &file)?;
            let classes = file.labels.iter().copied().max().map_or(0, |c| c + 1);
            Ok((Embedder::File(file), plan, classes))
        }
    }
}

/// Runs one configuration under one master seed.
pub fn run_experiment(cfg: &StreamConfig, seed: u64) -> Result<MetricsReport> {
    run_experiment_with(cfg, seed, ExecPolicy::default())
}

pub fn run_experiment_with(cfg: &StreamConfig, seed: u64, policy: ExecPolicy) -> Result<MetricsReport> {
    cfg.validate()?;
    let seeds = SeedTree::new(seed);
    let (embedder, plan, classes) = build_embedder(cfg, &seeds)?;
    let base = Pipeline::new(cfg, &embedder, seeds, classes, policy)?;
    let sigma = cfg.selection.sigma;

    // per-batch cost, measured on a throwaway copy over the first batches
    let (batch_time, warmup_time) = match cfg.stream.measured_batch_time {
        Some(t) => (t, 0.0),
        None => {
            let mut warm = base.clone();
            warm.prefix = "warmup.";
            let w = cfg.stream.warmup_batches.clamp(1, plan.num_batches());
            for (i, spec) in plan.batches[..w].iter().enumerate() {
                warm.process(i, spec, sigma)?;
            }
            let total = warm.timings.batch_total();
            (total / w as f64, total)
        }
    };
    if !(batch_time > 0.0) {
        return Err(Error::domain("measured batch time is zero; use a positive seconds_per_op"));
    }
    let c_s = relative_complexity(batch_time, cfg.stream.lambda, cfg.stream.dataset_size, cfg.stream.batch_size)?;
    let (retained, sigma_eff) = match cfg.stream.skip_mode {
        SkipMode::SkipBatches => (skip_schedule(plan.num_batches(), c_s, &mut seeds.stream("skip")), sigma),
        SkipMode::LowerRatio => ((0..plan.num_batches()).collect(), if c_s > 1.0 { sigma / c_s } else { sigma }),
    };
    log::info!(
        "seed {seed}: C_S = {c_s:.4}, retaining {}/{} batches, sigma {sigma_eff:.4}",
        retained.len(),
        plan.num_batches()
    );

    let mut pipe = base;
    let started = Instant::now();
    let ends = plan.task_ends();
    let mut acc = AccuracyMatrix::new();
    let mut next = retained.iter().peekable();
    for (i, spec) in plan.batches.iter().enumerate() {
        if next.peek() == Some(&&i) {
            next.next();
            pipe.process(i, spec, sigma_eff)?;
        }
        if ends[spec.task] == i {
            let row = pipe.evaluate(&plan, spec.task)?;
            acc.push_row(row)?;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();

    let mut timings = pipe.timings.clone();
    timings.warmup = warmup_time;
    let total_runtime_s = match cfg.stream.clock {
        ClockKind::Virtual => timings.run_total(),
        ClockKind::Wall => elapsed,
    };
    let selection_throughput_sps =
        if timings.selection > 0.0 { pipe.selection_samples as f64 / timings.selection } else { 0.0 };
    let buffer_mmd = match (&pipe.buffer, cfg.run.check_mmd) {
        (Some(buf), true) if !buf.is_empty() && !pipe.seen_similarity.is_empty() => {
            Some(mmd_squared(&buf.stored_similarities(), &pipe.seen_similarity)?)
        }
        _ => None,
    };
    Ok(MetricsReport {
        run_id: cfg.run_id(seed),
        selector: cfg.selection.selector.to_string(),
        buffer_policy: cfg.buffer.policy.to_string(),
        lambda: cfg.stream.lambda,
        c_s,
        sigma,
        m: cfg.buffer.size,
        k: cfg.model.steps,
        seed,
        class_order: cfg.data.class_order,
        avg_accuracy: average_accuracy(&acc)?,
        avg_forgetting: average_forgetting(&acc)?,
        selection_throughput_sps,
        total_runtime_s,
        clock: match cfg.stream.clock {
            ClockKind::Virtual => "virtual".into(),
            ClockKind::Wall => "wall".into(),
        },
        measured_batch_time: batch_time,
        batches_total: plan.num_batches(),
        batches_retained: retained.len(),
        samples_trained: pipe.samples_trained,
        timings,
        acc_matrix: acc.rows().to_vec(),
        buffer_mmd,
    })
}

/// One report per configured seed, in order.
pub fn run_all(cfg: &StreamConfig) -> Result<Vec<MetricsReport>> {
    cfg.run.seeds.iter().map(|&s| run_experiment(cfg, s)).collect()
}
