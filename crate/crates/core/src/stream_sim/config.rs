//! Experiment configuration: a sectioned TOML document with defaults for
//! everything except the arrival rate and dataset size.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use crate::buffer::DropWeights;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Streamfp,
    Random,
    Kcenter,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferPolicy {
    Streamfp,
    Reservoir,
    KeepFirst,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Drop whole batches, keeping a `1/C_S` fraction.
    SkipBatches,
    /// Keep every batch but shrink the coreset ratio to `σ/C_S`.
    LowerRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    /// Deterministic operation-count cost model.
    Virtual,
    /// Host wall clock.
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityRefresh {
    /// Re-score residents against the current fingerprints before each update.
    Fresh,
    /// Use the similarity stored when each resident was written.
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    File,
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Selector::Streamfp => "streamfp",
            Selector::Random => "random",
            Selector::Kcenter => "kcenter",
            Selector::None => "none",
        })
    }
}

impl std::fmt::Display for BufferPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BufferPolicy::Streamfp => "streamfp",
            BufferPolicy::Reservoir => "reservoir",
            BufferPolicy::KeepFirst => "keep_first",
            BufferPolicy::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    /// Arrival rate in samples per second.
    pub lambda: f64,
    pub dataset_size: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::tasks")]
    pub tasks: usize,
    #[serde(default = "defaults::skip_mode")]
    pub skip_mode: SkipMode,
    #[serde(default = "defaults::warmup_batches")]
    pub warmup_batches: usize,
    /// Seconds per batch; when set, the warm-up measurement is skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_batch_time: Option<f64>,
    #[serde(default = "defaults::clock")]
    pub clock: ClockKind,
    /// Cost of one multiply-add under the virtual clock.
    #[serde(default = "defaults::seconds_per_op")]
    pub seconds_per_op: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    #[serde(default = "defaults::selector")]
    pub selector: Selector,
    #[serde(default = "defaults::sigma")]
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSection {
    #[serde(default = "defaults::buffer_policy")]
    pub policy: BufferPolicy,
    #[serde(default = "defaults::buffer_size")]
    pub size: usize,
    #[serde(default = "defaults::refresh")]
    pub refresh: SimilarityRefresh,
    #[serde(default)]
    pub drop_weights: DropWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "defaults::fingerprints")]
    pub fingerprints: usize,
    #[serde(default = "defaults::fingerprint_length")]
    pub fingerprint_length: usize,
    #[serde(default = "defaults::experts")]
    pub experts: usize,
    #[serde(default = "defaults::top_r")]
    pub top_r: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::fingerprint_init_std")]
    pub fingerprint_init_std: f64,
    #[serde(default = "defaults::gate_init_std")]
    pub gate_init_std: f64,
    #[serde(default = "defaults::prototype_init_std")]
    pub prototype_init_std: f64,
    /// Optional `SFPW` file with frozen expert weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "defaults::source")]
    pub source: DataSource,
    /// `SFPE` embedding file, required when `source = "file"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::dim")]
    pub dim: usize,
    #[serde(default = "defaults::tokens")]
    pub tokens: usize,
    #[serde(default = "defaults::noise_std")]
    pub noise_std: f64,
    #[serde(default = "defaults::drift_scale")]
    pub drift_scale: f64,
    #[serde(default = "defaults::eval_per_task")]
    pub eval_per_task: usize,
    /// 0 keeps classes in index order; 1..=5 are the built-in seeded orders
    /// (any other value seeds its own permutation).
    #[serde(default)]
    pub class_order: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    /// Log seen-sample similarities and report buffer MMD².
    #[serde(default)]
    pub check_mmd: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub stream: StreamSection,
    #[serde(default = "defaults::selection")]
    pub selection: SelectionSection,
    #[serde(default = "defaults::buffer")]
    pub buffer: BufferSection,
    #[serde(default = "defaults::model")]
    pub model: ModelSection,
    #[serde(default = "defaults::data")]
    pub data: DataSection,
    #[serde(default = "defaults::run")]
    pub run: RunSection,
}

mod defaults {
    use super::*;

    pub fn batch_size() -> usize { 20 }
    pub fn tasks() -> usize { 5 }
    pub fn skip_mode() -> SkipMode { SkipMode::SkipBatches }
    pub fn warmup_batches() -> usize { 50 }
    pub fn clock() -> ClockKind { ClockKind::Virtual }
    pub fn seconds_per_op() -> f64 { 1e-9 }
    pub fn selector() -> Selector { Selector::Streamfp }
    pub fn sigma() -> f64 { 0.5 }
    pub fn buffer_policy() -> BufferPolicy { BufferPolicy::Streamfp }
    pub fn buffer_size() -> usize { 102 }
    pub fn refresh() -> SimilarityRefresh { SimilarityRefresh::Fresh }
    pub fn fingerprints() -> usize { 10 }
    pub fn fingerprint_length() -> usize { 8 }
    pub fn experts() -> usize { 3 }
    pub fn top_r() -> usize { 3 }
    pub fn learning_rate() -> f64 { 0.001 }
    pub fn steps() -> usize { 1 }
    pub fn fingerprint_init_std() -> f64 { 1.0 }
    pub fn gate_init_std() -> f64 { 0.1 }
    pub fn prototype_init_std() -> f64 { 0.01 }
    pub fn source() -> DataSource { DataSource::Synthetic }
    pub fn classes() -> usize { 10 }
    pub fn dim() -> usize { 32 }
    pub fn tokens() -> usize { 4 }
    pub fn noise_std() -> f64 { 1.0 }
    pub fn drift_scale() -> f64 { 0.5 }
    pub fn eval_per_task() -> usize { 200 }
    pub fn seeds() -> Vec<u64> { vec![1] }

    pub fn selection() -> SelectionSection {
        SelectionSection { selector: selector(), sigma: sigma() }
    }
    pub fn buffer() -> BufferSection {
        BufferSection {
            policy: buffer_policy(),
            size: buffer_size(),
            refresh: refresh(),
            drop_weights: DropWeights::default(),
        }
    }
    pub fn model() -> ModelSection {
        ModelSection {
            fingerprints: fingerprints(),
            fingerprint_length: fingerprint_length(),
            experts: experts(),
            top_r: top_r(),
            learning_rate: learning_rate(),
            steps: steps(),
            fingerprint_init_std: fingerprint_init_std(),
            gate_init_std: gate_init_std(),
            prototype_init_std: prototype_init_std(),
            weights_file: None,
        }
    }
    pub fn data() -> DataSection {
        DataSection {
            source: source(),
            path: None,
            classes: classes(),
            dim: dim(),
            tokens: tokens(),
            noise_std: noise_std(),
            drift_scale: drift_scale(),
            eval_per_task: eval_per_task(),
            class_order: 0,
        }
    }
    pub fn run() -> RunSection {
        RunSection { seeds: seeds(), run_id: None, check_mmd: false }
    }
}

/// Keys that have no default.
pub const REQUIRED_KEYS: &[&str] = &["stream.lambda", "stream.dataset_size"];

impl StreamConfig {
    /// A config with every default filled in.
    pub fn with_defaults(lambda: f64, dataset_size: usize) -> Self {
        StreamConfig {
            stream: StreamSection {
                lambda,
                dataset_size,
                batch_size: defaults::batch_size(),
                tasks: defaults::tasks(),
                skip_mode: defaults::skip_mode(),
                warmup_batches: defaults::warmup_batches(),
                measured_batch_time: None,
                clock: defaults::clock(),
                seconds_per_op: defaults::seconds_per_op(),
            },
            selection: defaults::selection(),
            buffer: defaults::buffer(),
            model: defaults::model(),
            data: defaults::data(),
            run: defaults::run(),
        }
    }

    /// Parses TOML text, applies `key=value` overrides (dotted keys), checks
    /// required keys and validates. All problems are reported together.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("parse error: {}", e.message())]))?;
        // run manifests carry extra metadata next to the config sections
        table.remove("manifest");
        let mut problems = Vec::new();
        for ov in overrides {
            if let Err(msg) = apply_override(&mut table, ov) {
                problems.push(msg);
            }
        }
        for key in REQUIRED_KEYS {
            if lookup(&table, key).is_none() {
                problems.push(format!("missing required key `{key}`"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let cfg: StreamConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_batches(&self) -> usize {
        self.stream.dataset_size.div_ceil(self.stream.batch_size.max(1))
    }

    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let s = &self.stream;
        if !(s.lambda > 0.0 && s.lambda.is_finite()) {
            v.push(format!("stream.lambda must be > 0 (got {})", s.lambda));
        }
        if s.dataset_size == 0 {
            v.push("stream.dataset_size must be >= 1".into());
        }
        if s.batch_size == 0 {
            v.push("stream.batch_size must be >= 1".into());
        }
        if s.tasks == 0 {
            v.push("stream.tasks must be >= 1".into());
        } else if s.batch_size > 0 && s.dataset_size > 0 && self.num_batches() < s.tasks {
            v.push(format!("stream.tasks ({}) exceeds the number of batches ({})", s.tasks, self.num_batches()));
        }
        if let Some(t) = s.measured_batch_time {
            if !(t > 0.0 && t.is_finite()) {
                v.push(format!("stream.measured_batch_time must be > 0 (got {t})"));
            }
        }
        if !(s.seconds_per_op > 0.0 && s.seconds_per_op.is_finite()) {
            v.push("stream.seconds_per_op must be > 0".into());
        }
        if !(self.selection.sigma > 0.0 && self.selection.sigma <= 1.0) {
            v.push(format!("selection.sigma must be in (0, 1] (got {})", self.selection.sigma));
        }
        if self.buffer.policy != BufferPolicy::None && self.buffer.size == 0 {
            v.push("buffer.size must be >= 1".into());
        }
        let m = &self.model;
        if m.fingerprints == 0 {
            v.push("model.fingerprints must be >= 1".into());
        }
        if m.fingerprint_length < 2 || !m.fingerprint_length.is_multiple_of(2) {
            v.push(format!("model.fingerprint_length must be even and >= 2 (got {})", m.fingerprint_length));
        }
        if m.experts == 0 {
            v.push("model.experts must be >= 1".into());
        }
        if m.top_r == 0 || m.top_r > m.experts {
            v.push(format!("model.top_r must be in [1, experts] (got {})", m.top_r));
        }
        if !(m.learning_rate >= 0.0 && m.learning_rate.is_finite()) {
            v.push(format!("model.learning_rate must be finite and >= 0 (got {})", m.learning_rate));
        }
        if m.steps == 0 {
            v.push("model.steps must be >= 1".into());
        }
        for (name, x) in [
            ("model.fingerprint_init_std", m.fingerprint_init_std),
            ("model.gate_init_std", m.gate_init_std),
            ("model.prototype_init_std", m.prototype_init_std),
            ("data.noise_std", self.data.noise_std),
            ("data.drift_scale", self.data.drift_scale),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(format!("{name} must be finite and >= 0 (got {x})"));
            }
        }
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.classes == 0 {
                    v.push("data.classes must be >= 1".into());
                } else if d.classes < s.tasks {
                    v.push(format!("data.classes ({}) must be >= stream.tasks ({})", d.classes, s.tasks));
                }
                if d.dim == 0 {
                    v.push("data.dim must be >= 1".into());
                }
                if d.tokens == 0 {
                    v.push("data.tokens must be >= 1".into());
                }
            }
            DataSource::File => {
                if d.path.is_none() {
                    v.push("data.path is required when data.source = \"file\"".into());
                }
            }
        }
        if d.eval_per_task == 0 {
            v.push("data.eval_per_task must be >= 1".into());
        }
        if self.run.seeds.is_empty() {
            v.push("run.seeds must list at least one seed".into());
        }
        if let Some(id) = &self.run.run_id {
            if id.is_empty() || id.contains([',', '"', '\n']) {
                v.push("run.run_id must be non-empty without commas, quotes or newlines".into());
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Identifier for the run with the given seed.
    pub fn run_id(&self, seed: u64) -> String {
        match &self.run.run_id {
            Some(id) if self.run.seeds.len() == 1 => id.clone(),
            Some(id) => format!("{id}-s{seed}"),
            None => format!("{}-{}-s{seed}", self.selection.selector, self.buffer.policy),
        }
    }
}

fn lookup<'a>(table: &'a toml::Table, dotted: &str) -> Option<&'a toml::Value> {
    let mut parts = dotted.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> std::result::Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not KEY=VALUE"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override key `{key}` is malformed"));
    }
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("override key `{key}`: `{p}` is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
