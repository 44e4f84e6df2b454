//! Experiment configs, runs, and run-to-run comparison.
//!
//! A config is a TOML file naming the catalog, the worker fleet, the
//! workload, the policy and every threshold. Relative paths inside it resolve
//! against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{builtin_catalog, load_profiles_from_path, Catalog};
use crate::cluster::VmConfig;
use crate::ids::{AppId, ArchId, VariantId};
use crate::resources::{Hardware, PerHardware, Resources};
use crate::sim::metrics::{read_metrics, IntervalMetrics, Summary, METRICS_FILE, SUMMARY_FILE};
use crate::sim::{
    self, default_worker_shape, GpuInterference, Injection, OfflineJobSpec, Policy, ScalerKind, SimConfig, SimOutput,
    Thresholds, WarmStart, WorkerSpec,
};
use crate::store::MetadataStore;
use crate::workload::{
    assign_popularity, default_slo_ms, gen_pattern, read_arrivals, replay_trace, ArrivalTrace, BucketTrace, PatternKind,
    PatternParams, RequestTemplate,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl ExperimentError {
    /// 1 for config problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            ExperimentError::Runtime(_) => 2,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Runtime(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogSource {
    /// `builtin`, or a path to a profile CSV.
    pub source: String,
    /// Restrict the builtin catalog to these architectures.
    pub archs: Option<Vec<String>>,
    pub app: AppId,
}

impl Default for CatalogSource {
    fn default() -> Self {
        Self {
            source: "builtin".into(),
            archs: None,
            app: AppId::from("app"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerEntry {
    pub hardware: Hardware,
    #[serde(default = "one")]
    pub count: u32,
    /// Overrides the default shape for `hardware`.
    #[serde(default)]
    pub resources: Option<Resources>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default)]
    pub pattern: Option<PatternKind>,
    #[serde(default)]
    pub params: PatternParams,
    /// Bucketed count trace to replay onto `[qps_min, qps_max]`.
    #[serde(default)]
    pub trace_file: Option<PathBuf>,
    #[serde(default)]
    pub qps_min: Option<f64>,
    #[serde(default)]
    pub qps_max: Option<f64>,
    /// Exact per-arrival file.
    #[serde(default)]
    pub arrivals_file: Option<PathBuf>,
    /// Defaults to 1.5x the fastest CPU variant's batch-1 latency.
    #[serde(default)]
    pub slo_ms: Option<f64>,
    #[serde(default)]
    pub min_accuracy: f64,
    /// Send by-model queries for this architecture.
    #[serde(default)]
    pub model: Option<ArchId>,
    /// Send by-model queries with models drawn from this popular set.
    #[serde(default)]
    pub popular: Vec<ArchId>,
    #[serde(default)]
    pub popular_share: Option<f64>,
    #[serde(default = "one")]
    pub batch: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            pattern: Some(PatternKind::FlatLow),
            params: PatternParams::default(),
            trace_file: None,
            qps_min: None,
            qps_max: None,
            arrivals_file: None,
            slo_ms: None,
            min_accuracy: 0.0,
            model: None,
            popular: Vec::new(),
            popular_share: None,
            batch: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "one_u64")]
    pub seed: u64,
    pub horizon_s: f64,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub scaler: ScalerKind,
    #[serde(default)]
    pub catalog: CatalogSource,
    pub workers: Vec<WorkerEntry>,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub vm: VmConfig,
    #[serde(default)]
    pub warm_start: Vec<WarmStart>,
    /// Baseline instances; derived from the policy when absent.
    #[serde(default)]
    pub pinned: Option<Vec<WarmStart>>,
    #[serde(default)]
    pub injections: Vec<Injection>,
    #[serde(default)]
    pub gpu_interference: GpuInterference,
    #[serde(default)]
    pub offline: Vec<OfflineJobSpec>,
    /// A finished run to report the cost ratio against.
    #[serde(default)]
    pub baseline_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}

fn one_u64() -> u64 {
    1
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The architecture the workload targets first.
    fn primary_arch(&self, catalog: &Catalog) -> Option<ArchId> {
        self.workload
            .model
            .clone()
            .or_else(|| self.workload.popular.first().cloned())
            .or_else(|| catalog.archs().next().map(|a| a.arch_id.clone()))
    }
}

/// Everything a simulation run needs.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub store: MetadataStore,
    pub trace: ArrivalTrace,
    pub sim: SimConfig,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn build_catalog(src: &CatalogSource, base: &Path) -> Result<Catalog, ExperimentError> {
    let catalog = if src.source == "builtin" {
        let only: Option<Vec<&str>> = src.archs.as_ref().map(|v| v.iter().map(String::as_str).collect());
        let c = builtin_catalog(only.as_deref());
        if let Some(want) = &src.archs {
            if let Some(missing) = want.iter().find(|a| c.arch(a).is_none()) {
                return Err(config_err(format!("unknown builtin architecture `{missing}`")));
            }
        }
        c
    } else {
        load_profiles_from_path(&resolve(base, Path::new(&src.source))).map_err(config_err)?
    };
    if catalog.is_empty() {
        return Err(config_err("catalog is empty"));
    }
    Ok(catalog)
}

/// Generate the configured arrival trace.
pub fn build_trace(cfg: &ExperimentConfig, catalog: &Catalog, base: &Path) -> Result<ArrivalTrace, ExperimentError> {
    let w = &cfg.workload;
    let sources = [w.pattern.is_some(), w.trace_file.is_some(), w.arrivals_file.is_some()];
    if sources.iter().filter(|&&s| s).count() != 1 {
        return Err(config_err("workload needs exactly one of pattern, trace_file, arrivals_file"));
    }
    let arch = cfg.primary_arch(catalog).ok_or_else(|| config_err("no architecture to target"))?;
    if catalog.arch(arch.as_str()).is_none() {
        return Err(config_err(format!("workload targets unknown architecture `{arch}`")));
    }
    let slo = match w.slo_ms {
        Some(s) if s > 0.0 => s,
        Some(s) => return Err(config_err(format!("slo_ms must be positive, got {s}"))),
        None => default_slo_ms(catalog, arch.as_str()).ok_or_else(|| config_err(format!("`{arch}` has no CPU variant to derive an SLO from")))?,
    };
    let mut template = RequestTemplate::requirements(cfg.catalog.app.clone(), slo, w.min_accuracy);
    template.batch = w.batch;
    if w.model.is_some() {
        template.model = w.model.clone();
    }
    let mut trace = if let Some(kind) = w.pattern {
        gen_pattern(kind, &w.params, cfg.horizon_s, &template, cfg.seed).map_err(config_err)?
    } else if let Some(path) = &w.trace_file {
        let path = resolve(base, path);
        let file = std::fs::File::open(&path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let buckets = BucketTrace::parse(file).map_err(config_err)?;
        let (lo, hi) = w
            .qps_min
            .zip(w.qps_max)
            .ok_or_else(|| config_err("trace replay needs qps_min and qps_max"))?;
        replay_trace(&buckets, lo, hi, Some(cfg.horizon_s), &template, cfg.seed).map_err(config_err)?
    } else {
        let path = resolve(base, w.arrivals_file.as_ref().expect("checked above"));
        let file = std::fs::File::open(&path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        read_arrivals(file, cfg.seed).map_err(config_err)?
    };
    if !w.popular.is_empty() || w.popular_share.is_some() {
        let models: Vec<ArchId> = catalog.archs().map(|a| a.arch_id.clone()).collect();
        let sampler = assign_popularity(&models, &w.popular, w.popular_share.unwrap_or(0.8)).map_err(config_err)?;
        sampler.apply(&mut trace, cfg.seed);
    }
    Ok(trace)
}

pub fn build_scenario(cfg: &ExperimentConfig, base: &Path) -> Result<Scenario, ExperimentError> {
    let catalog = build_catalog(&cfg.catalog, base)?;
    let trace = build_trace(cfg, &catalog, base)?;
    let mut store = MetadataStore::new();
    store.register_catalog(&catalog, cfg.catalog.app.clone()).map_err(config_err)?;

    let mut workers = Vec::new();
    for w in &cfg.workers {
        for _ in 0..w.count {
            workers.push(WorkerSpec {
                hardware: w.hardware,
                resources: w.resources.unwrap_or_else(|| default_worker_shape(w.hardware)),
            });
        }
    }
    let pinned = match &cfg.pinned {
        Some(p) => p.clone(),
        None => match cfg.policy.default_pin() {
            Some((suffix, count)) => {
                let arch = cfg.primary_arch(&catalog).expect("trace built");
                vec![WarmStart {
                    variant: VariantId::from(format!("{arch}-{suffix}")),
                    count,
                    worker: None,
                }]
            }
            None => Vec::new(),
        },
    };
    let sim = SimConfig {
        seed: cfg.seed,
        horizon_s: cfg.horizon_s,
        policy: cfg.policy,
        scaler: cfg.scaler,
        thresholds: cfg.thresholds.clone(),
        vm: cfg.vm,
        workers,
        worker_shapes: PerHardware::from_fn(default_worker_shape),
        warm_start: cfg.warm_start.clone(),
        pinned,
        injections: cfg.injections.clone(),
        gpu_interference: cfg.gpu_interference.clone(),
        offline: cfg.offline.clone(),
    };
    sim.validate(&store, &trace).map_err(config_err)?;
    Ok(Scenario { store, trace, sim })
}

/// Build and simulate without touching the filesystem (beyond inputs).
pub fn simulate(cfg: &ExperimentConfig, base: &Path) -> Result<SimOutput, ExperimentError> {
    let s = build_scenario(cfg, base)?;
    sim::run(&s.sim, s.store, &s.trace).map_err(runtime_err)
}

/// Run a config and write its artifacts to `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path, out_dir: &Path) -> Result<Summary, ExperimentError> {
    let mut out = simulate(cfg, base)?;
    if let Some(dir) = &cfg.baseline_dir {
        let base_summary = read_summary(&resolve(base, dir))?;
        out.summary.baseline_cost_ratio = ratio(base_summary.total_cost, out.summary.total_cost);
    }
    out.write_dir(out_dir).map_err(runtime_err)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()).map_err(runtime_err)?;
    Ok(out.summary)
}

pub fn read_summary(dir: &Path) -> Result<Summary, ExperimentError> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| runtime_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(runtime_err)
}

pub fn read_run_metrics(dir: &Path) -> Result<Vec<IntervalMetrics>, ExperimentError> {
    let path = dir.join(METRICS_FILE);
    let file = std::fs::File::open(&path).map_err(|e| runtime_err(format!("{}: {e}", path.display())))?;
    read_metrics(file).map_err(runtime_err)
}

/// `a / b`, 1 when both are zero, `None` when only `b` is.
pub fn ratio(a: f64, b: f64) -> Option<f64> {
    if b != 0.0 {
        Some(a / b)
    } else if a == 0.0 {
        Some(1.0)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalComparison {
    pub time_s: f64,
    pub cost_ratio: Option<f64>,
    pub violation_ratio_delta: f64,
    pub throughput_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    /// Total cost of run A over run B.
    pub cost_ratio: Option<f64>,
    /// Violation ratio of A minus that of B.
    pub violation_ratio_delta: f64,
    /// Queries served by A over those served by B.
    pub throughput_ratio: Option<f64>,
    pub intervals: Vec<IntervalComparison>,
}

pub fn compare_runs(
    a: (&Summary, &[IntervalMetrics]),
    b: (&Summary, &[IntervalMetrics]),
) -> Result<Comparison, ExperimentError> {
    let (sa, ma) = a;
    let (sb, mb) = b;
    if sa.horizon_s != sb.horizon_s || ma.len() != mb.len() || ma.iter().zip(mb).any(|(x, y)| x.time_s != y.time_s) {
        return Err(runtime_err(format!(
            "mismatched horizons: {} s vs {} s",
            sa.horizon_s, sb.horizon_s
        )));
    }
    let mut prev = (0.0, 0.0);
    let intervals = ma
        .iter()
        .zip(mb)
        .map(|(x, y)| {
            let dc = (x.cost_cumulative - prev.0, y.cost_cumulative - prev.1);
            prev = (x.cost_cumulative, y.cost_cumulative);
            IntervalComparison {
                time_s: x.time_s,
                cost_ratio: ratio(dc.0, dc.1),
                violation_ratio_delta: x.violation_ratio - y.violation_ratio,
                throughput_ratio: ratio(x.served as f64, y.served as f64),
            }
        })
        .collect();
    Ok(Comparison {
        cost_ratio: ratio(sa.total_cost, sb.total_cost),
        violation_ratio_delta: sa.violation_ratio - sb.violation_ratio,
        throughput_ratio: ratio(sa.served as f64, sb.served as f64),
        intervals,
    })
}

/// Compare two run directories and write `comparison.json` into `out`.
pub fn compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<Comparison, ExperimentError> {
    let (sa, ma) = (read_summary(a)?, read_run_metrics(a)?);
    let (sb, mb) = (read_summary(b)?, read_run_metrics(b)?);
    let c = compare_runs((&sa, &ma), (&sb, &mb))?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(runtime_err)?;
        let json = serde_json::to_string_pretty(&c).expect("comparison serializes");
        std::fs::write(dir.join("comparison.json"), json + "\n").map_err(runtime_err)?;
    }
    Ok(c)
}

/// One worker carrying every hardware type.
pub fn mixed_worker() -> WorkerEntry {
    WorkerEntry {
        hardware: Hardware::Accel,
        count: 1,
        resources: Some(Resources {
            cpu_cores: 16.0,
            cpu_mem_gb: 64.0,
            gpu_mem_gb: 16.0,
            accel_cores: 4.0,
        }),
    }
}

pub const PRESETS: [&str; 4] = ["flat_low", "steady_high", "fluctuating", "colocation"];

/// Built-in scenarios. Each is also shipped as `configs/<name>.toml`.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let resnet = CatalogSource {
        source: "builtin".into(),
        archs: Some(vec!["resnet50".into()]),
        app: AppId::from("classify"),
    };
    let warm = vec![WarmStart {
        variant: VariantId::from("resnet50-cpu-base-b1"),
        count: 1,
        worker: Some(0),
    }];
    let base = ExperimentConfig {
        name: name.to_string(),
        seed: 7,
        horizon_s: 120.0,
        policy: Policy::Modelless,
        scaler: ScalerKind::Greedy,
        catalog: resnet,
        workers: vec![mixed_worker()],
        workload: WorkloadSpec {
            pattern: Some(PatternKind::FlatLow),
            slo_ms: Some(300.0),
            min_accuracy: 0.7,
            ..WorkloadSpec::default()
        },
        thresholds: Thresholds::default(),
        vm: VmConfig::default(),
        warm_start: warm,
        pinned: None,
        injections: Vec::new(),
        gpu_interference: GpuInterference::default(),
        offline: Vec::new(),
        baseline_dir: None,
    };
    match name {
        "flat_low" => Some(base),
        "steady_high" => Some(ExperimentConfig {
            horizon_s: 60.0,
            workload: WorkloadSpec {
                pattern: Some(PatternKind::SteadyHigh),
                ..base.workload.clone()
            },
            ..base
        }),
        "fluctuating" => Some(ExperimentConfig {
            horizon_s: 240.0,
            workload: WorkloadSpec {
                pattern: Some(PatternKind::Fluctuating),
                ..base.workload.clone()
            },
            ..base
        }),
        "colocation" => Some(ExperimentConfig {
            horizon_s: 120.0,
            policy: Policy::StaticCpu,
            workers: vec![WorkerEntry {
                hardware: Hardware::Cpu,
                count: 1,
                resources: Some(Resources {
                    cpu_cores: 12.0,
                    cpu_mem_gb: 48.0,
                    ..Resources::ZERO
                }),
            }],
            workload: WorkloadSpec {
                pattern: Some(PatternKind::Fluctuating),
                params: PatternParams {
                    low: 4.0,
                    high: 30.0,
                    spikes: vec![(20.0, 40.0), (70.0, 90.0)],
                    ..PatternParams::default()
                },
                slo_ms: Some(500.0),
                ..base.workload.clone()
            },
            warm_start: Vec::new(),
            offline: vec![OfflineJobSpec {
                worker: 0,
                model: ArchId::from("resnet50"),
                variant: None,
                total_inputs: 5000,
                chunk_size: 10,
                coupling: 0.5,
            }],
            ..base
        }),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn here() -> PathBuf {
        PathBuf::from(".")
    }

    #[test]
    fn presets_build() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            build_scenario(&cfg, &here()).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn config_round_trips_through_toml() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn malformed_configs_are_config_errors() {
        let e = ExperimentConfig::parse("horizon_s = \"x\"").unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let mut text = preset("flat_low").unwrap().to_toml();
        text.push_str("\nsurprise = 1\n");
        assert!(ExperimentConfig::parse(&text).is_err());

        let mut cfg = preset("flat_low").unwrap();
        cfg.workload.trace_file = Some("missing.trace".into());
        assert_eq!(build_scenario(&cfg, &here()).unwrap_err().exit_code(), 1);

        let mut cfg = preset("flat_low").unwrap();
        cfg.pattern_free_replay("missing.trace");
        assert!(matches!(build_scenario(&cfg, &here()), Err(ExperimentError::Config(_))));

        let mut cfg = preset("flat_low").unwrap();
        cfg.thresholds.slack_threshold = 0.5;
        assert!(build_scenario(&cfg, &here()).is_err());
    }

    impl ExperimentConfig {
        fn pattern_free_replay(&mut self, file: &str) {
            self.workload.pattern = None;
            self.workload.trace_file = Some(file.into());
            self.workload.qps_min = Some(1.0);
            self.workload.qps_max = Some(5.0);
        }
    }

    #[test]
    fn comparison_against_self_is_unity() {
        let out = simulate(&ExperimentConfig { horizon_s: 20.0, ..preset("flat_low").unwrap() }, &here()).unwrap();
        let c = compare_runs((&out.summary, &out.metrics), (&out.summary, &out.metrics)).unwrap();
        assert_eq!(c.cost_ratio, Some(1.0));
        assert_eq!(c.throughput_ratio, Some(1.0));
        assert_eq!(c.violation_ratio_delta, 0.0);
        assert!(c.intervals.iter().all(|i| i.cost_ratio == Some(1.0) && i.violation_ratio_delta == 0.0));

        let mut short = out.summary.clone();
        short.horizon_s = 10.0;
        assert!(compare_runs((&short, &out.metrics[..2]), (&out.summary, &out.metrics)).is_err());
    }

    #[test]
    fn ratio_edge_cases() {
        assert_eq!(ratio(0.0, 0.0), Some(1.0));
        assert_eq!(ratio(1.0, 0.0), None);
        assert_eq!(ratio(3.0, 2.0), Some(1.5));
    }
}
