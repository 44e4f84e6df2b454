//! Deterministic discrete-event simulation of the serving cluster.
//!
//! Each instance is a FIFO single server: a query occupies the instance for
//! `batch / saturation_qps` seconds and completes `inf_latency(batch)` after
//! it starts, both scaled by the instance's current latency multiplier.
//! Queries dispatched to a loading instance wait until the load completes.

mod engine;
pub mod metrics;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::VmConfig;
use crate::ids::{ArchId, VariantId};
use crate::resources::{Hardware, PerHardware, Resources};
use crate::scaling::ScalingParams;
use crate::store::MetadataStore;
use crate::workload::ArrivalTrace;

pub use engine::run;
pub use metrics::{IntervalMetrics, ScalingLogEntry, SimOutput, Summary, ThrottleEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Requirement-driven selection with model- and VM-level autoscaling.
    #[default]
    Modelless,
    /// Pinned CPU instances, no scaling.
    StaticCpu,
    /// One pinned GPU instance, no scaling.
    StaticGpu,
    /// Replicas of one GPU variant, added and removed by the autoscaler.
    HorizontalOnly,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Modelless => "modelless",
            Policy::StaticCpu => "static_cpu",
            Policy::StaticGpu => "static_gpu",
            Policy::HorizontalOnly => "horizontal_only",
        }
    }

    /// The pinned variant suffix and count used when the config names none.
    pub fn default_pin(self) -> Option<(&'static str, u32)> {
        match self {
            Policy::Modelless => None,
            Policy::StaticCpu => Some(("cpu-base-b1", 2)),
            Policy::StaticGpu => Some(("gpu-opt-b8", 1)),
            Policy::HorizontalOnly => Some(("gpu-opt-b1", 1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalerKind {
    #[default]
    Greedy,
    Ilp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub lambda: f64,
    pub slack_threshold: f64,
    pub interference_factor: f64,
    pub offline_util_threshold: f64,
    /// Offline work pauses when an online instance's mean latency exceeds
    /// this multiple of its profiled latency.
    pub offline_latency_factor: f64,
    pub ewma_alpha: f64,
    pub monitor_period_s: f64,
    pub model_autoscale_period_s: f64,
    pub vm_autoscale_period_s: f64,
    /// Window over which the model autoscaler measures load.
    pub load_window_s: f64,
    pub metrics_interval_s: f64,
    pub cost_tick_s: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            slack_threshold: 1.05,
            interference_factor: 1.2,
            offline_util_threshold: 0.4,
            offline_latency_factor: 1.2,
            ewma_alpha: 0.3,
            monitor_period_s: 2.0,
            model_autoscale_period_s: 1.0,
            vm_autoscale_period_s: 2.0,
            load_window_s: 2.0,
            metrics_interval_s: 4.0,
            cost_tick_s: 1.0,
        }
    }
}

impl Thresholds {
    pub fn scaling(&self) -> ScalingParams {
        ScalingParams {
            lambda: self.lambda,
            slack_threshold: self.slack_threshold,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |name: &str, reason: &str| Err(SimError::Invalid(format!("{name} {reason}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be >= 0");
        }
        if !(self.slack_threshold >= 1.0 && self.slack_threshold.is_finite()) {
            return bad("slack_threshold", "must be >= 1");
        }
        if !(self.interference_factor > 1.0) {
            return bad("interference_factor", "must be > 1");
        }
        if !(self.offline_latency_factor >= 1.0) {
            return bad("offline_latency_factor", "must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.offline_util_threshold) {
            return bad("offline_util_threshold", "must be in [0, 1]");
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return bad("ewma_alpha", "must be in (0, 1]");
        }
        for (name, v) in [
            ("monitor_period_s", self.monitor_period_s),
            ("model_autoscale_period_s", self.model_autoscale_period_s),
            ("vm_autoscale_period_s", self.vm_autoscale_period_s),
            ("load_window_s", self.load_window_s),
            ("metrics_interval_s", self.metrics_interval_s),
            ("cost_tick_s", self.cost_tick_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, "must be positive");
            }
        }
        Ok(())
    }
}

/// Shape of a worker of each hardware type.
pub fn default_worker_shape(h: Hardware) -> Resources {
    match h {
        Hardware::Cpu => Resources {
            cpu_cores: 16.0,
            cpu_mem_gb: 64.0,
            ..Resources::ZERO
        },
        Hardware::Gpu => Resources {
            cpu_cores: 8.0,
            cpu_mem_gb: 61.0,
            gpu_mem_gb: 16.0,
            ..Resources::ZERO
        },
        Hardware::Accel => Resources {
            cpu_cores: 8.0,
            cpu_mem_gb: 16.0,
            accel_cores: 4.0,
            ..Resources::ZERO
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSpec {
    pub hardware: Hardware,
    pub resources: Resources,
}

impl WorkerSpec {
    pub fn default_for(hardware: Hardware) -> Self {
        Self {
            hardware,
            resources: default_worker_shape(hardware),
        }
    }
}

/// Instances loaded and Active at time zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStart {
    pub variant: VariantId,
    #[serde(default = "one")]
    pub count: u32,
    /// Index into the initial worker list; bin-packed when absent.
    #[serde(default)]
    pub worker: Option<u32>,
}

fn one() -> u32 {
    1
}

/// A fixed latency multiplier on every online instance of a worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub worker: u32,
    pub start_s: f64,
    pub end_s: f64,
    pub multiplier: f64,
}

/// Co-located GPU instances: once their combined load passes
/// `load_fraction` of combined saturation, every instance with a smaller
/// footprint than the largest one is slowed by `multiplier`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpuInterference {
    pub enabled: bool,
    pub load_fraction: f64,
    pub multiplier: f64,
}

impl Default for GpuInterference {
    fn default() -> Self {
        Self {
            enabled: true,
            load_fraction: 0.7,
            multiplier: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineJobSpec {
    pub worker: u32,
    pub model: ArchId,
    /// Variant to run; the cheapest one that fits the worker when absent.
    #[serde(default)]
    pub variant: Option<VariantId>,
    pub total_inputs: u64,
    #[serde(default = "default_chunk")]
    pub chunk_size: u64,
    /// Online slowdown while a chunk runs is `1 + coupling * online_util`.
    #[serde(default = "default_coupling")]
    pub coupling: f64,
}

fn default_chunk() -> u64 {
    10
}

fn default_coupling() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub horizon_s: f64,
    pub policy: Policy,
    pub scaler: ScalerKind,
    pub thresholds: Thresholds,
    pub vm: VmConfig,
    pub workers: Vec<WorkerSpec>,
    /// Shapes used when the VM autoscaler adds a worker.
    pub worker_shapes: PerHardware<Resources>,
    pub warm_start: Vec<WarmStart>,
    /// Instances the static and horizontal baselines start from.
    pub pinned: Vec<WarmStart>,
    pub injections: Vec<Injection>,
    pub gpu_interference: GpuInterference,
    pub offline: Vec<OfflineJobSpec>,
}

impl SimConfig {
    pub fn new(workers: Vec<WorkerSpec>, horizon_s: f64, seed: u64) -> Self {
        Self {
            seed,
            horizon_s,
            policy: Policy::Modelless,
            scaler: ScalerKind::Greedy,
            thresholds: Thresholds::default(),
            vm: VmConfig::default(),
            workers,
            worker_shapes: PerHardware::from_fn(default_worker_shape),
            warm_start: Vec::new(),
            pinned: Vec::new(),
            injections: Vec::new(),
            gpu_interference: GpuInterference::default(),
            offline: Vec::new(),
        }
    }

    pub fn validate(&self, store: &MetadataStore, trace: &ArrivalTrace) -> Result<(), SimError> {
        self.thresholds.validate()?;
        if !(self.horizon_s >= 0.0 && self.horizon_s.is_finite()) {
            return Err(SimError::Invalid("horizon_s must be >= 0".into()));
        }
        if store.variants().next().is_none() {
            return Err(SimError::Invalid("catalog is empty".into()));
        }
        if self.workers.is_empty() {
            return Err(SimError::Invalid("no workers".into()));
        }
        if trace.last_time() > crate::time::from_secs(self.horizon_s) {
            return Err(SimError::Invalid("workload extends past the horizon".into()));
        }
        for q in &trace.arrivals {
            if !store.has_app(q.app_id.as_str()) {
                return Err(SimError::Invalid(format!("query references unknown app `{}`", q.app_id)));
            }
            if let Some(m) = &q.model {
                if store.arch(m.as_str()).is_none() {
                    return Err(SimError::Invalid(format!("query references unknown model `{m}`")));
                }
            }
            q.validate().map_err(|e| SimError::Invalid(e.to_string()))?;
        }
        let n = self.workers.len() as u32;
        for w in self.warm_start.iter().chain(&self.pinned) {
            if store.variant(w.variant.as_str()).is_none() {
                return Err(SimError::Invalid(format!("unknown variant `{}`", w.variant)));
            }
            if w.worker.is_some_and(|i| i >= n) {
                return Err(SimError::Invalid(format!("warm start worker index out of range for `{}`", w.variant)));
            }
        }
        for j in &self.injections {
            if j.worker >= n || !(j.multiplier >= 1.0) || j.end_s < j.start_s {
                return Err(SimError::Invalid("bad interference injection".into()));
            }
        }
        for o in &self.offline {
            if o.worker >= n || o.chunk_size == 0 || store.arch(o.model.as_str()).is_none() || !(o.coupling >= 0.0) {
                return Err(SimError::Invalid(format!("bad offline job for `{}`", o.model)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot place `{0}` at startup")]
    Startup(VariantId),
}
