//! Command-line front end: `run`, `verify`, `bench` and `dump-config`.
//!
//! Exit codes: 0 success, 1 runtime failure or failed check, 2 invalid
//! configuration or usage.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checks::{random_selection_inputs, run_suite, Suite};
use crate::coreset::select_with_fingerprints;
use crate::error::{Error, Result};
use crate::exec::{init_thread_pool, ExecPolicy};
use crate::rng::SeedTree;
use crate::stream_sim::baselines::{kcenter_coreset, random_coreset};
use crate::stream_sim::config::{Selector, StreamConfig};
use crate::stream_sim::{run_all, write_csv, write_json, MetricsReport};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Environment variable bounding worker threads.
pub const THREADS_ENV: &str = "STREAMFP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "streamfp", version, about = "Fingerprint-guided coreset selection and buffer management for stream learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment(s) described by a config file.
    Run(RunArgs),
    /// Run a numerical verification suite (coreset, buffer, gradients, sampler).
    Verify(VerifyArgs),
    /// Time coreset selectors on identical random inputs.
    Bench(BenchArgs),
    /// Print a fully resolved config.
    DumpConfig(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted `section.key=value` override; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for metrics.csv, metrics.json and manifest.toml.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// coreset | buffer | gradients | sampler
    pub suite: String,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated selectors: streamfp, kcenter, random.
    #[arg(long, value_delimiter = ',', default_values_t = ["streamfp".to_string(), "kcenter".to_string(), "random".to_string()])]
    pub selectors: Vec<String>,
    #[arg(long = "b", default_value_t = 512)]
    pub batch: usize,
    #[arg(long = "dim", default_value_t = 768)]
    pub dim: usize,
    /// Number of fingerprints.
    #[arg(long = "n", default_value_t = 100)]
    pub fingerprints: usize,
    #[arg(long, default_value_t = 1)]
    pub tokens: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 9)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the table to this CSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to reproduce a run; written as `manifest.toml`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    #[serde(flatten)]
    pub config: StreamConfig,
    pub manifest: ManifestInfo,
}

#[derive(Debug, Serialize)]
pub struct ManifestInfo {
    pub engine_version: String,
    pub master_seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub created_unix_s: u64,
    /// Per-seed batch time fed into the relative-complexity computation.
    pub measured_batch_times: Vec<f64>,
}

/// Resolves threads from the environment (default 1) and sizes the pool.
fn configure_threads() -> ExecPolicy {
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(1).max(1);
    init_thread_pool(threads);
    ExecPolicy::default()
}

pub fn load_config(args: &ConfigArgs) -> Result<StreamConfig> {
    let text = match &args.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", path.display())]))?,
        None => String::new(),
    };
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("run.seeds=[{seed}]"));
    }
    StreamConfig::from_toml_str(&text, &overrides)
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn report_error(err: &Error) -> u8 {
    match err {
        Error::Config(msgs) => {
            eprintln!("invalid configuration:");
            for m in msgs {
                eprintln!("  - {m}");
            }
        }
        other => eprintln!("error: {other}"),
    }
    exit_for(err)
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::DumpConfig(a) => cmd_dump_config(&a),
    };
    outcome.unwrap_or_else(|e| report_error(&e))
}

pub fn cmd_run(args: &RunArgs) -> Result<u8> {
    let cfg = load_config(&args.config)?;
    configure_threads();
    let reports = run_all(&cfg)?;
    write_outputs(&cfg, &reports, &args.out)?;
    for r in &reports {
        println!(
            "{}: avg_accuracy={:.4} avg_forgetting={:.4} C_S={:.3} retained {}/{} batches",
            r.run_id, r.avg_accuracy, r.avg_forgetting, r.c_s, r.batches_retained, r.batches_total
        );
    }
    Ok(EXIT_OK)
}

/// Writes `metrics.csv`, `metrics.json` and `manifest.toml` into `out`.
pub fn write_outputs(cfg: &StreamConfig, reports: &[MetricsReport], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_csv(fs::File::create(out.join("metrics.csv"))?, reports)?;
    write_json(fs::File::create(out.join("metrics.json"))?, reports)?;
    let manifest = RunManifest {
        config: cfg.clone(),
        manifest: ManifestInfo {
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seeds: cfg.run.seeds.clone(),
            outputs: ["metrics.csv", "metrics.json"].iter().map(|f| out.join(f).display().to_string()).collect(),
            created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            measured_batch_times: reports.iter().map(|r| r.measured_batch_time).collect(),
        },
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    fs::write(out.join("manifest.toml"), text)?;
    Ok(())
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<u8> {
    let suite: Suite = args.suite.parse()?;
    configure_threads();
    let trials = args.trials.unwrap_or(suite.default_trials());
    let results = run_suite(suite, trials, args.seed)?;
    for r in &results {
        println!("{r}");
    }
    Ok(if results.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_FAILURE })
}

/// One line of the bench table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub selector: String,
    pub b: usize,
    pub dim: usize,
    pub fingerprints: usize,
    pub tokens: usize,
    pub repeats: usize,
    pub median_latency_s: f64,
    pub min_latency_s: f64,
    pub max_latency_s: f64,
    pub samples_per_sec: f64,
}

fn parse_selectors(raw: &[String]) -> Result<Vec<Selector>> {
    let names: Vec<&str> = raw.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::Config(vec!["selector list is empty".into()]));
    }
    names
        .iter()
        .map(|n| match *n {
            "streamfp" => Ok(Selector::Streamfp),
            "kcenter" => Ok(Selector::Kcenter),
            "random" => Ok(Selector::Random),
            other => Err(Error::Config(vec![format!("unknown selector `{other}`")])),
        })
        .collect()
}

/// Median, min and max wall-clock latency of selecting one coreset.
pub fn time_selector(
    selector: Selector,
    args: &BenchArgs,
    policy: ExecPolicy,
) -> Result<(f64, f64, f64)> {
    let (emd, pool) = random_selection_inputs(args.batch, args.tokens, args.dim, args.fingerprints, args.seed)?;
    let mut rng = SeedTree::new(args.seed).stream("bench.random");
    let mut times = Vec::with_capacity(args.repeats);
    for _ in 0..args.repeats {
        let start = Instant::now();
        let n = match selector {
            Selector::Streamfp => select_with_fingerprints(&emd, &pool, args.sigma, policy)?.len(),
            Selector::Kcenter => kcenter_coreset(&emd, args.sigma, policy)?.len(),
            Selector::Random => random_coreset(args.batch, args.sigma, &mut rng)?.len(),
            Selector::None => 0,
        };
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(n);
    }
    times.sort_by(f64::total_cmp);
    let med = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2])
    };
    Ok((med, times[0], times[times.len() - 1]))
}

pub fn bench_rows(args: &BenchArgs, policy: ExecPolicy) -> Result<Vec<BenchRow>> {
    let selectors = parse_selectors(&args.selectors)?;
    let mut bad = Vec::new();
    for (name, v) in [("b", args.batch), ("dim", args.dim), ("n", args.fingerprints), ("tokens", args.tokens), ("repeats", args.repeats)] {
        if v == 0 {
            bad.push(format!("--{name} must be >= 1"));
        }
    }
    if !(args.sigma > 0.0 && args.sigma <= 1.0) {
        bad.push(format!("--sigma must be in (0, 1] (got {})", args.sigma));
    }
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    selectors
        .into_iter()
        .map(|s| {
            let (med, lo, hi) = time_selector(s, args, policy)?;
            Ok(BenchRow {
                selector: s.to_string(),
                b: args.batch,
                dim: args.dim,
                fingerprints: args.fingerprints,
                tokens: args.tokens,
                repeats: args.repeats,
                median_latency_s: med,
                min_latency_s: lo,
                max_latency_s: hi,
                samples_per_sec: if med > 0.0 { args.batch as f64 / med } else { f64::INFINITY },
            })
        })
        .collect()
}

pub fn cmd_bench(args: &BenchArgs) -> Result<u8> {
    let policy = configure_threads();
    let rows = bench_rows(args, policy)?;
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in &rows {
            w.serialize(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
        }
        w.flush()?;
    }
    std::io::stdout().write_all(&buf)?;
    if let Some(path) = &args.out {
        fs::write(path, &buf)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_dump_config(args: &ConfigArgs) -> Result<u8> {
    let cfg = if args.config.is_none() && args.overrides.is_empty() {
        // a template: required keys get placeholder values
        let mut c = StreamConfig::with_defaults(500.0, 10_000);
        if let Some(seed) = args.seed {
            c.run.seeds = vec![seed];
        }
        c
    } else {
        load_config(args)?
    };
    print!("{}", cfg.to_toml_string());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_parsing() {
        assert!(parse_selectors(&[]).is_err());
        assert!(parse_selectors(&["".into()]).is_err());
        assert!(parse_selectors(&["bogus".into()]).is_err());
        assert_eq!(parse_selectors(&["streamfp".into(), " kcenter".into()]).unwrap(), vec![Selector::Streamfp, Selector::Kcenter]);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["streamfp", "verify", "coreset", "--trials", "0"]), EXIT_USAGE);
        assert_eq!(run(["streamfp", "verify", "nonsense"]), EXIT_USAGE);
        assert_eq!(run(["streamfp", "bench", "--selectors", ""]), EXIT_USAGE);
        assert_eq!(run(["streamfp", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn seed_flag_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[stream]\nlambda = 10.0\ndataset_size = 100\n[run]\nseeds = [3, 4]\n").unwrap();
        let args = ConfigArgs { config: Some(path), seed: Some(7), overrides: vec!["run.seeds=[9]".into()] };
        assert_eq!(load_config(&args).unwrap().run.seeds, vec![7]);
    }
}
