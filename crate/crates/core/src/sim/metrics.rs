//! Per-interval metrics, logs, and the run summary.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scaling::PlanLogEntry;

/// One metrics record. The first ten columns are the stable trace format;
/// the rest are diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct IntervalMetrics {
    pub time_s: f64,
    pub arrived: u64,
    pub served: u64,
    pub violations: u64,
    pub violation_ratio: f64,
    pub cost_cumulative: f64,
    pub util_cpu: f64,
    pub util_gpu: f64,
    pub util_accel: f64,
    pub active_workers: u64,
    pub rejected: u64,
    pub in_flight: u64,
    pub arrived_total: u64,
    pub served_total: u64,
    pub rejected_total: u64,
    pub served_cpu: u64,
    pub served_gpu: u64,
    pub served_accel: u64,
    /// Largest online utilization seen by a throttle check in the interval.
    pub online_util_max: f64,
    pub offline_chunks: u64,
    pub offline_processed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingLogEntry {
    pub time_s: f64,
    /// `model`, `vm`, `query`, or `mitigation`.
    pub level: String,
    pub worker: String,
    pub action: String,
    pub target: String,
    pub reason: String,
}

/// One offline-throttle decision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThrottleEntry {
    pub time_s: f64,
    pub worker: String,
    pub job: u32,
    pub online_util: f64,
    /// Largest online mean latency over profiled latency, 0 without samples.
    pub latency_ratio: f64,
    pub paused: bool,
    pub processed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Summary {
    pub policy: String,
    pub seed: u64,
    pub horizon_s: f64,
    pub arrived: u64,
    pub served: u64,
    pub rejected: u64,
    pub in_flight: u64,
    pub violations: u64,
    pub violation_ratio: f64,
    pub mean_interval_violation_ratio: f64,
    pub max_interval_violation_ratio: f64,
    pub total_cost: f64,
    pub mean_util_cpu: f64,
    pub mean_util_gpu: f64,
    pub mean_util_accel: f64,
    pub served_cpu: u64,
    pub served_gpu: u64,
    pub served_accel: u64,
    pub offline_processed: u64,
    pub offline_total: u64,
    pub plans: u64,
    pub vm_actions: u64,
    /// Total cost of a named baseline run divided by this run's.
    #[serde(default)]
    pub baseline_cost_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimOutput {
    pub metrics: Vec<IntervalMetrics>,
    pub scaling_log: Vec<ScalingLogEntry>,
    pub plan_log: Vec<PlanLogEntry>,
    pub throttle_log: Vec<ThrottleEntry>,
    /// Time of every offline chunk start, with its worker index.
    pub chunk_starts: Vec<(f64, u32)>,
    pub summary: Summary,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SCALING_LOG_FILE: &str = "scaling_log.csv";
pub const PLAN_LOG_FILE: &str = "plan_log.csv";
pub const THROTTLE_LOG_FILE: &str = "throttle_log.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Serialize rows as CSV with a header, even when there are no rows.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], header: &[&str], out: W) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

pub const METRICS_HEADER: [&str; 21] = [
    "time_s",
    "arrived",
    "served",
    "violations",
    "violation_ratio",
    "cost_cumulative",
    "util_cpu",
    "util_gpu",
    "util_accel",
    "active_workers",
    "rejected",
    "in_flight",
    "arrived_total",
    "served_total",
    "rejected_total",
    "served_cpu",
    "served_gpu",
    "served_accel",
    "online_util_max",
    "offline_chunks",
    "offline_processed",
];

const SCALING_HEADER: [&str; 6] = ["time_s", "level", "worker", "action", "target", "reason"];
const PLAN_HEADER: [&str; 7] = ["time_s", "worker", "arch", "actions", "labels", "objective", "trigger"];
const THROTTLE_HEADER: [&str; 7] = ["time_s", "worker", "job", "online_util", "latency_ratio", "paused", "processed"];

pub fn metrics_csv(rows: &[IntervalMetrics]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(rows, &METRICS_HEADER, &mut buf).expect("writing to memory");
    buf
}

pub fn read_metrics<R: std::io::Read>(source: R) -> Result<Vec<IntervalMetrics>, csv::Error> {
    csv::Reader::from_reader(source).deserialize().collect()
}

impl SimOutput {
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(METRICS_FILE), metrics_csv(&self.metrics))?;
        let file = |name: &str| std::fs::File::create(dir.join(name));
        write_csv(&self.scaling_log, &SCALING_HEADER, file(SCALING_LOG_FILE)?)?;
        write_csv(&self.plan_log, &PLAN_HEADER, file(PLAN_LOG_FILE)?)?;
        write_csv(&self.throttle_log, &THROTTLE_HEADER, file(THROTTLE_LOG_FILE)?)?;
        let json = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        std::fs::write(dir.join(SUMMARY_FILE), json + "\n")
    }
}
