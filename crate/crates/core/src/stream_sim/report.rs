//! Run results and their CSV / JSON serializations.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulated or measured seconds spent in each pipeline stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub warmup: f64,
    pub embed: f64,
    pub selection: f64,
    pub train: f64,
    pub buffer_update: f64,
    pub evaluation: f64,
}

impl StageTimings {
    /// Sum of the stages that make up a run (warm-up excluded).
    pub fn run_total(&self) -> f64 {
        self.embed + self.selection + self.train + self.buffer_update + self.evaluation
    }

    /// Per-batch cost as measured during warm-up: everything but evaluation.
    pub fn batch_total(&self) -> f64 {
        self.embed + self.selection + self.train + self.buffer_update
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub selector: String,
    pub buffer_policy: String,
    pub lambda: f64,
    pub c_s: f64,
    pub sigma: f64,
    pub m: usize,
    pub k: usize,
    pub seed: u64,
    pub class_order: u64,
    pub avg_accuracy: f64,
    pub avg_forgetting: f64,
    /// Samples scored per second of selection time; 0 when no selector ran.
    pub selection_throughput_sps: f64,
    pub total_runtime_s: f64,
    pub clock: String,
    pub measured_batch_time: f64,
    pub batches_total: usize,
    pub batches_retained: usize,
    pub samples_trained: u64,
    pub timings: StageTimings,
    /// `a[i][j]`: accuracy on task `j` after training through task `i`.
    pub acc_matrix: Vec<Vec<f64>>,
    /// MMD² between the final buffer and every sample seen, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_mmd: Option<f64>,
}

/// One CSV row; column names are part of the output contract.
#[derive(Serialize)]
struct CsvRow<'a> {
    run_id: &'a str,
    selector: &'a str,
    buffer_policy: &'a str,
    lambda: f64,
    #[serde(rename = "C_S")]
    c_s: f64,
    sigma: f64,
    m: usize,
    #[serde(rename = "K")]
    k: usize,
    seed: u64,
    class_order: u64,
    avg_accuracy: f64,
    avg_forgetting: f64,
    selection_throughput_sps: f64,
    total_runtime_s: f64,
}

pub const CSV_COLUMNS: [&str; 14] = [
    "run_id",
    "selector",
    "buffer_policy",
    "lambda",
    "C_S",
    "sigma",
    "m",
    "K",
    "seed",
    "class_order",
    "avg_accuracy",
    "avg_forgetting",
    "selection_throughput_sps",
    "total_runtime_s",
];

impl<'a> From<&'a MetricsReport> for CsvRow<'a> {
    fn from(r: &'a MetricsReport) -> Self {
        CsvRow {
            run_id: &r.run_id,
            selector: &r.selector,
            buffer_policy: &r.buffer_policy,
            lambda: r.lambda,
            c_s: r.c_s,
            sigma: r.sigma,
            m: r.m,
            k: r.k,
            seed: r.seed,
            class_order: r.class_order,
            avg_accuracy: r.avg_accuracy,
            avg_forgetting: r.avg_forgetting,
            selection_throughput_sps: r.selection_throughput_sps,
            total_runtime_s: r.total_runtime_s,
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Header plus one row per report.
pub fn write_csv(w: impl Write, reports: &[MetricsReport]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if reports.is_empty() {
        wr.write_record(CSV_COLUMNS).map_err(csv_err)?;
    }
    for r in reports {
        wr.serialize(CsvRow::from(r)).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Pretty-printed JSON array of full reports.
pub fn write_json(mut w: impl Write, reports: &[MetricsReport]) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, reports).map_err(|e| Error::Format(format!("json: {e}")))?;
    writeln!(w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        MetricsReport {
            run_id: "r".into(),
            selector: "streamfp".into(),
            buffer_policy: "reservoir".into(),
            lambda: 100.0,
            c_s: 2.0,
            sigma: 0.5,
            m: 10,
            k: 1,
            seed: 3,
            class_order: 0,
            avg_accuracy: 0.5,
            avg_forgetting: 0.1,
            selection_throughput_sps: 1e6,
            total_runtime_s: 1.5,
            clock: "virtual".into(),
            measured_batch_time: 0.01,
            batches_total: 10,
            batches_retained: 5,
            samples_trained: 50,
            timings: StageTimings::default(),
            acc_matrix: vec![vec![0.5]],
            buffer_mmd: None,
        }
    }

    #[test]
    fn csv_header_matches_contract() {
        let mut out = Vec::new();
        write_csv(&mut out, &[sample()]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        assert!(lines.next().unwrap().starts_with("r,streamfp,reservoir,100.0,2.0,0.5,10,1,3,0,"));
        let mut empty = Vec::new();
        write_csv(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim_end(), CSV_COLUMNS.join(","));
    }

    #[test]
    fn json_round_trip() {
        let mut out = Vec::new();
        write_json(&mut out, &[sample()]).unwrap();
        let back: Vec<MetricsReport> = serde_json::from_slice(&out).unwrap();
        assert_eq!(back, vec![sample()]);
    }
}
