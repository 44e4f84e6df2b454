//! Model architectures, their variants, and variant profiles.
//!
//! Variants are produced either by [`generate_variants`], which enumerates
//! the (hardware, optimizer, batch) grid and fills each profile from a
//! parametric latency/cost model, or by [`load_profiles`], which ingests a
//! profile file. Either way every profile passes [`VariantProfile::validate`]
//! before it enters a [`Catalog`].
//!
//! Parametric model, per hardware spec `h` and architecture base latency `L0`:
//!
//! ```text
//! latency(b)     = L0 / speedup_h / opt_speedup * (a_h + (1 - a_h) * b)
//! saturation(B)  = B / latency(B) * pipeline_h          (latency in seconds)
//! memory(B)      = overhead_h + footprint * (1 + growth_h * (B - 1))
//! cost_rate(B)   = cost_per_gb_s_h * memory(B)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AppId, ArchId, VariantId};
use crate::resources::{Hardware, ResourceKind, Resources};

/// Largest batch size a variant may be optimized for.
pub const MAX_BATCH: u32 = 64;

#[derive(Debug, Error, PartialEq)]
pub enum CatalogError {
    #[error("no hardware")]
    NoHardware,
    #[error("invalid batch {0}: must be a power of two between 1 and {MAX_BATCH}")]
    InvalidBatch(u32),
    #[error("invalid batch: no batch sizes given")]
    NoBatchSizes,
    #[error("variant `{variant}`: invalid field `{field}`: {reason}")]
    InvalidField {
        variant: String,
        field: &'static str,
        reason: String,
    },
    #[error("duplicate variant_id `{0}`")]
    DuplicateVariant(VariantId),
    #[error("duplicate arch_id `{0}`")]
    DuplicateArch(ArchId),
    #[error("variant `{variant}` references unknown architecture `{arch}`")]
    UnknownArch { variant: VariantId, arch: ArchId },
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Translation,
    #[default]
    Other,
}

/// Inputs to the parametric profile model that belong to an architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchShape {
    /// Batch-1 latency of the unoptimized CPU variant.
    pub base_latency_ms: f64,
    /// Weights plus per-batch working set, in GB.
    pub footprint_gb: f64,
    /// Loading latency of the unoptimized CPU variant.
    pub base_load_latency_ms: f64,
}

impl Default for ArchShape {
    fn default() -> Self {
        Self {
            base_latency_ms: 100.0,
            footprint_gb: 1.0,
            base_load_latency_ms: 1000.0,
        }
    }
}

/// A registered, already-trained model from which variants derive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchitecture {
    pub arch_id: ArchId,
    #[serde(default)]
    pub task: Task,
    #[serde(default)]
    pub app_ids: BTreeSet<AppId>,
    pub declared_accuracy: f64,
    #[serde(default)]
    pub shape: ArchShape,
}

impl ModelArchitecture {
    pub fn new(arch_id: impl Into<ArchId>, declared_accuracy: f64, shape: ArchShape) -> Self {
        Self {
            arch_id: arch_id.into(),
            task: Task::Classification,
            app_ids: BTreeSet::new(),
            declared_accuracy,
            shape,
        }
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        if !(0.0..=1.0).contains(&self.declared_accuracy) {
            return Err(CatalogError::InvalidField {
                variant: self.arch_id.to_string(),
                field: "declared_accuracy",
                reason: format!("{} not in [0, 1]", self.declared_accuracy),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    None,
    GraphOptimized,
}

impl Optimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::None => "none",
            Optimizer::GraphOptimized => "graph_optimized",
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "none" => Ok(Optimizer::None),
            "graph_optimized" => Ok(Optimizer::GraphOptimized),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

/// Static per-variant profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantProfile {
    pub variant_id: VariantId,
    pub arch_id: ArchId,
    pub hardware: Hardware,
    pub optimizer: Optimizer,
    pub max_batch: u32,
    pub accuracy: f64,
    /// Profiled inference latency per batch size.
    pub inf_latency_ms: BTreeMap<u32, f64>,
    pub load_latency_ms: f64,
    pub saturation_qps: f64,
    /// Dollars per second while the instance is loaded.
    pub cost_rate: f64,
    pub resources: Resources,
}

pub fn is_valid_batch(b: u32) -> bool {
    b >= 1 && b <= MAX_BATCH && b.is_power_of_two()
}

impl VariantProfile {
    /// Profiled latency for a batch size, if that batch was profiled.
    pub fn latency_ms(&self, batch: u32) -> Option<f64> {
        self.inf_latency_ms.get(&batch).copied()
    }

    pub fn batch1_latency_ms(&self) -> f64 {
        self.inf_latency_ms[&1]
    }

    /// Inactive-path ordering key: loading plus batch-1 inference latency.
    pub fn cold_latency_ms(&self) -> f64 {
        self.load_latency_ms + self.batch1_latency_ms()
    }

    pub fn load_latency_s(&self) -> f64 {
        self.load_latency_ms / 1000.0
    }

    pub fn supports_batch(&self, batch: u32) -> bool {
        batch <= self.max_batch && self.inf_latency_ms.contains_key(&batch)
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        let bad = |field: &'static str, reason: String| CatalogError::InvalidField {
            variant: self.variant_id.to_string(),
            field,
            reason,
        };
        if !is_valid_batch(self.max_batch) {
            return Err(bad("max_batch", format!("{} is not a power of two <= {MAX_BATCH}", self.max_batch)));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(bad("accuracy", format!("{} not in [0, 1]", self.accuracy)));
        }
        if !self.inf_latency_ms.contains_key(&1) {
            return Err(bad("inf_latency_ms", "batch 1 latency missing".into()));
        }
        let mut prev = 0.0_f64;
        for (&b, &ms) in &self.inf_latency_ms {
            if !is_valid_batch(b) || b > self.max_batch {
                return Err(bad("inf_latency_ms", format!("batch {b} not profiled for max_batch {}", self.max_batch)));
            }
            if !ms.is_finite() || ms <= 0.0 {
                return Err(bad("inf_latency_ms", format!("latency {ms} at batch {b} must be positive")));
            }
            if ms < prev {
                return Err(bad("inf_latency_ms", format!("latency decreases at batch {b}")));
            }
            prev = ms;
        }
        if !(self.saturation_qps.is_finite() && self.saturation_qps > 0.0) {
            return Err(bad("saturation_qps", format!("{} must be > 0", self.saturation_qps)));
        }
        if !(self.cost_rate.is_finite() && self.cost_rate > 0.0) {
            return Err(bad("cost_rate", format!("{} must be > 0", self.cost_rate)));
        }
        if !(self.load_latency_ms.is_finite() && self.load_latency_ms >= 0.0) {
            return Err(bad("load_latency_ms", format!("{} must be >= 0", self.load_latency_ms)));
        }
        for (kind, amount) in self.resources.iter() {
            if !amount.is_finite() || amount < 0.0 {
                return Err(bad("resources", format!("{kind}={amount} must be >= 0")));
            }
            if amount > 0.0 && !resource_relevant(self.hardware, kind) {
                return Err(bad("resources", format!("{kind} is not used by {} variants", self.hardware)));
            }
        }
        Ok(())
    }
}

/// Host memory is usable by every hardware class; the rest is hardware specific.
fn resource_relevant(hw: Hardware, kind: ResourceKind) -> bool {
    kind == ResourceKind::CpuMemGb || kind.hardware() == hw
}

/// Parametric description of one hardware platform for variant generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub hardware: Hardware,
    /// Batch-1 speedup over the unoptimized CPU variant.
    pub speedup: f64,
    pub optimizers: Vec<Optimizer>,
    /// Extra speedup applied by the graph optimizer.
    pub graph_opt_speedup: f64,
    /// Fixed (batch-independent) fraction `a` of the latency.
    pub batch_fixed_fraction: f64,
    pub pipeline_factor: f64,
    pub cost_per_gb_s: f64,
    pub mem_overhead_gb: f64,
    pub activation_growth: f64,
    pub load_multiplier: f64,
    pub graph_opt_load_multiplier: f64,
    /// CPU cores or accelerator cores reserved per instance. Unused for GPU.
    pub cores_per_instance: f64,
    pub max_batch: u32,
}

impl HardwareSpec {
    /// Default platform model. Cost rates are dollars per GB-second of
    /// instance memory: 0.031 CPU, 0.190 accelerator, 0.498 GPU.
    pub fn default_for(hardware: Hardware) -> Self {
        match hardware {
            Hardware::Cpu => Self {
                hardware,
                speedup: 1.0,
                optimizers: vec![Optimizer::None],
                graph_opt_speedup: 1.0,
                batch_fixed_fraction: 0.1,
                pipeline_factor: 2.0,
                cost_per_gb_s: 0.031,
                mem_overhead_gb: 1.5,
                activation_growth: 0.1,
                load_multiplier: 1.0,
                graph_opt_load_multiplier: 1.0,
                cores_per_instance: 4.0,
                max_batch: MAX_BATCH,
            },
            Hardware::Gpu => Self {
                hardware,
                speedup: 12.0,
                optimizers: vec![Optimizer::None, Optimizer::GraphOptimized],
                graph_opt_speedup: 2.0,
                batch_fixed_fraction: 0.8,
                pipeline_factor: 2.0,
                cost_per_gb_s: 0.498,
                mem_overhead_gb: 0.5,
                activation_growth: 0.1,
                load_multiplier: 3.0,
                graph_opt_load_multiplier: 1.5,
                cores_per_instance: 0.0,
                max_batch: MAX_BATCH,
            },
            Hardware::Accel => Self {
                hardware,
                speedup: 10.0,
                optimizers: vec![Optimizer::GraphOptimized],
                graph_opt_speedup: 1.0,
                batch_fixed_fraction: 0.5,
                pipeline_factor: 2.0,
                cost_per_gb_s: 0.190,
                mem_overhead_gb: 0.3,
                activation_growth: 0.1,
                load_multiplier: 2.0,
                graph_opt_load_multiplier: 1.5,
                cores_per_instance: 1.0,
                max_batch: MAX_BATCH,
            },
        }
    }

    fn batch1_latency_ms(&self, arch: &ArchShape, opt: Optimizer) -> f64 {
        let opt_speedup = match opt {
            Optimizer::None => 1.0,
            Optimizer::GraphOptimized => self.graph_opt_speedup,
        };
        arch.base_latency_ms / self.speedup / opt_speedup
    }

    /// `latency(b) = latency(1) * (a + (1 - a) * b)`.
    pub fn latency_ms(&self, arch: &ArchShape, opt: Optimizer, batch: u32) -> f64 {
        let a = self.batch_fixed_fraction;
        self.batch1_latency_ms(arch, opt) * (a + (1.0 - a) * batch as f64)
    }

    pub fn saturation_qps(&self, arch: &ArchShape, opt: Optimizer, max_batch: u32) -> f64 {
        max_batch as f64 / (self.latency_ms(arch, opt, max_batch) / 1000.0) * self.pipeline_factor
    }

    pub fn memory_gb(&self, arch: &ArchShape, max_batch: u32) -> f64 {
        self.mem_overhead_gb + arch.footprint_gb * (1.0 + self.activation_growth * (max_batch as f64 - 1.0))
    }

    pub fn load_latency_ms(&self, arch: &ArchShape, opt: Optimizer) -> f64 {
        let m = match opt {
            Optimizer::None => 1.0,
            Optimizer::GraphOptimized => self.graph_opt_load_multiplier,
        };
        arch.base_load_latency_ms * self.load_multiplier * m
    }

    fn resources(&self, memory_gb: f64) -> Resources {
        let mut r = Resources::ZERO;
        match self.hardware {
            Hardware::Cpu => {
                r.cpu_cores = self.cores_per_instance;
                r.cpu_mem_gb = memory_gb;
            }
            Hardware::Gpu => r.gpu_mem_gb = memory_gb,
            Hardware::Accel => r.accel_cores = self.cores_per_instance,
        }
        r
    }
}

pub fn default_hardware() -> Vec<HardwareSpec> {
    Hardware::ALL.into_iter().map(HardwareSpec::default_for).collect()
}

/// Every power-of-two batch size from 1 to [`MAX_BATCH`].
pub fn all_batch_sizes() -> Vec<u32> {
    (0..=MAX_BATCH.trailing_zeros()).map(|p| 1 << p).collect()
}

pub fn variant_id_for(arch: &ArchId, hw: Hardware, opt: Optimizer, batch: u32) -> VariantId {
    let opt = match opt {
        Optimizer::None => "base",
        Optimizer::GraphOptimized => "opt",
    };
    VariantId(format!("{arch}-{hw}-{opt}-b{batch}"))
}

/// Enumerate one variant per valid (hardware, optimizer, batch) combination.
pub fn generate_variants(
    arch: &ModelArchitecture,
    hw_catalog: &[HardwareSpec],
    batch_sizes: &[u32],
) -> Result<Vec<VariantProfile>, CatalogError> {
    if hw_catalog.is_empty() {
        return Err(CatalogError::NoHardware);
    }
    if batch_sizes.is_empty() {
        return Err(CatalogError::NoBatchSizes);
    }
    if let Some(&b) = batch_sizes.iter().find(|&&b| !is_valid_batch(b)) {
        return Err(CatalogError::InvalidBatch(b));
    }
    arch.validate()?;
    let batches: BTreeSet<u32> = batch_sizes.iter().copied().collect();
    let shape = &arch.shape;

    let mut out = Vec::new();
    for spec in hw_catalog {
        for &opt in &spec.optimizers {
            for &max_batch in batches.iter().filter(|&&b| b <= spec.max_batch) {
                let inf_latency_ms = std::iter::once(1)
                    .chain(batches.iter().copied().filter(|&b| b <= max_batch))
                    .map(|b| (b, spec.latency_ms(shape, opt, b)))
                    .collect();
                let memory = spec.memory_gb(shape, max_batch);
                let profile = VariantProfile {
                    variant_id: variant_id_for(&arch.arch_id, spec.hardware, opt, max_batch),
                    arch_id: arch.arch_id.clone(),
                    hardware: spec.hardware,
                    optimizer: opt,
                    max_batch,
                    accuracy: arch.declared_accuracy,
                    inf_latency_ms,
                    load_latency_ms: spec.load_latency_ms(shape, opt),
                    saturation_qps: spec.saturation_qps(shape, opt, max_batch),
                    cost_rate: spec.cost_per_gb_s * memory,
                    resources: spec.resources(memory),
                };
                profile.validate()?;
                out.push(profile);
            }
        }
    }
    Ok(out)
}

/// Immutable-after-construction collection of architectures and variants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    archs: BTreeMap<ArchId, ModelArchitecture>,
    variants: BTreeMap<VariantId, VariantProfile>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_arch(&mut self, arch: ModelArchitecture) -> Result<(), CatalogError> {
        arch.validate()?;
        if self.archs.contains_key(&arch.arch_id) {
            return Err(CatalogError::DuplicateArch(arch.arch_id));
        }
        self.archs.insert(arch.arch_id.clone(), arch);
        Ok(())
    }

    pub fn add_variant(&mut self, v: VariantProfile) -> Result<(), CatalogError> {
        v.validate()?;
        if !self.archs.contains_key(&v.arch_id) {
            return Err(CatalogError::UnknownArch {
                variant: v.variant_id,
                arch: v.arch_id,
            });
        }
        if self.variants.contains_key(&v.variant_id) {
            return Err(CatalogError::DuplicateVariant(v.variant_id));
        }
        self.variants.insert(v.variant_id.clone(), v);
        Ok(())
    }

    /// Register an architecture together with its generated variants.
    pub fn add_generated(
        &mut self,
        arch: ModelArchitecture,
        hw_catalog: &[HardwareSpec],
        batch_sizes: &[u32],
    ) -> Result<(), CatalogError> {
        let variants = generate_variants(&arch, hw_catalog, batch_sizes)?;
        self.add_arch(arch)?;
        for v in variants {
            self.add_variant(v)?;
        }
        Ok(())
    }

    pub fn arch(&self, id: &str) -> Option<&ModelArchitecture> {
        self.archs.get(id)
    }

    pub fn variant(&self, id: &str) -> Option<&VariantProfile> {
        self.variants.get(id)
    }

    pub fn archs(&self) -> impl Iterator<Item = &ModelArchitecture> {
        self.archs.values()
    }

    pub fn variants(&self) -> impl Iterator<Item = &VariantProfile> {
        self.variants.values()
    }

    pub fn variants_of<'a>(&'a self, arch: &'a str) -> impl Iterator<Item = &'a VariantProfile> + 'a {
        self.variants.values().filter(move |v| v.arch_id.as_str() == arch)
    }

    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }
}

/// Architectures shipped with the crate, loosely modelled on common image
/// classifiers. Accuracies are top-1 fractions.
pub fn builtin_architectures() -> Vec<ModelArchitecture> {
    let rows: [(&str, f64, f64, f64, f64); 8] = [
        // id, accuracy, cpu batch-1 latency ms, footprint GB, load ms
        ("resnet50", 0.749, 100.0, 1.0, 1000.0),
        ("mobilenet_v1", 0.704, 25.0, 0.2, 590.0),
        ("densenet121", 0.750, 110.0, 0.4, 1200.0),
        ("inception_v3", 0.779, 120.0, 0.9, 1500.0),
        ("vgg16", 0.713, 300.0, 2.2, 2500.0),
        ("resnet152", 0.766, 280.0, 1.6, 2000.0),
        ("inception_resnet_v2", 0.803, 350.0, 1.8, 3000.0),
        ("nasnet_large", 0.825, 800.0, 3.2, 3600.0),
    ];
    rows.into_iter()
        .map(|(id, acc, lat, mem, load)| {
            ModelArchitecture::new(
                id,
                acc,
                ArchShape {
                    base_latency_ms: lat,
                    footprint_gb: mem,
                    base_load_latency_ms: load,
                },
            )
        })
        .collect()
}

/// Builtin architectures (optionally a subset) over the default hardware grid.
pub fn builtin_catalog(only: Option<&[&str]>) -> Catalog {
    let hw = default_hardware();
    let batches = all_batch_sizes();
    let mut catalog = Catalog::new();
    for arch in builtin_architectures() {
        if only.is_some_and(|ids| !ids.contains(&arch.arch_id.as_str())) {
            continue;
        }
        catalog
            .add_generated(arch, &hw, &batches)
            .expect("builtin architectures are valid");
    }
    catalog
}

// ---------------------------------------------------------------------------
// Profile file
// ---------------------------------------------------------------------------

const PROFILE_FIXED_COLUMNS: [&str; 9] = [
    "variant_id",
    "arch_id",
    "hardware",
    "optimizer",
    "max_batch",
    "accuracy",
    "load_latency_ms",
    "saturation_qps",
    "cost_rate",
];

/// Parse a profile file.
///
/// One record per line: the nine fixed columns of [`PROFILE_FIXED_COLUMNS`],
/// then `type=amount` resource pairs, then `batch:latency_ms` pairs. A header
/// line naming the fixed columns is required unless the file is empty. Lines
/// starting with `#` are comments.
pub fn load_profiles<R: Read>(source: R) -> Result<Catalog, CatalogError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source);

    let mut catalog = Catalog::new();
    let mut variants = Vec::new();
    let mut saw_header = false;
    for record in reader.records() {
        let record = record.map_err(|e| CatalogError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        if !saw_header {
            let fixed: Vec<&str> = record.iter().take(PROFILE_FIXED_COLUMNS.len()).collect();
            if fixed != PROFILE_FIXED_COLUMNS {
                return Err(CatalogError::Malformed {
                    line,
                    reason: format!("expected header starting with `{}`", PROFILE_FIXED_COLUMNS.join(",")),
                });
            }
            saw_header = true;
            continue;
        }
        variants.push(parse_profile_row(&record, line)?);
    }

    // Architectures are derived from the variants that reference them.
    let mut by_arch: BTreeMap<ArchId, Vec<&VariantProfile>> = BTreeMap::new();
    for v in &variants {
        by_arch.entry(v.arch_id.clone()).or_default().push(v);
    }
    for (arch_id, vs) in &by_arch {
        let accuracy = vs.iter().map(|v| v.accuracy).fold(0.0, f64::max);
        let cpu = vs.iter().filter(|v| v.hardware == Hardware::Cpu).collect::<Vec<_>>();
        let pool = if cpu.is_empty() { vs.iter().collect() } else { cpu };
        let shape = ArchShape {
            base_latency_ms: pool.iter().map(|v| v.batch1_latency_ms()).fold(f64::INFINITY, f64::min),
            footprint_gb: ArchShape::default().footprint_gb,
            base_load_latency_ms: pool.iter().map(|v| v.load_latency_ms).fold(f64::INFINITY, f64::min),
        };
        let mut arch = ModelArchitecture::new(arch_id.clone(), accuracy, shape);
        arch.task = Task::Other;
        catalog.add_arch(arch)?;
    }
    for v in variants {
        catalog.add_variant(v)?;
    }
    Ok(catalog)
}

pub fn load_profiles_from_path(path: &Path) -> Result<Catalog, CatalogError> {
    let file = std::fs::File::open(path).map_err(|e| CatalogError::Io(format!("{}: {e}", path.display())))?;
    load_profiles(file)
}

fn parse_profile_row(record: &csv::StringRecord, line: u64) -> Result<VariantProfile, CatalogError> {
    let malformed = |reason: String| CatalogError::Malformed { line, reason };
    if record.len() < PROFILE_FIXED_COLUMNS.len() {
        return Err(malformed(format!(
            "expected at least {} fields, found {}",
            PROFILE_FIXED_COLUMNS.len(),
            record.len()
        )));
    }
    fn num<T: FromStr>(raw: &str, col: &str, line: u64) -> Result<T, CatalogError> {
        raw.parse().map_err(|_| CatalogError::Malformed {
            line,
            reason: format!("column `{col}`: cannot parse `{raw}`"),
        })
    }

    let variant_id = VariantId::from(&record[0]);
    if variant_id.as_str().is_empty() {
        return Err(malformed("empty variant_id".into()));
    }
    let hardware = record[2].parse::<Hardware>().map_err(malformed)?;
    let optimizer = record[3].parse::<Optimizer>().map_err(malformed)?;

    let mut resources = Resources::ZERO;
    let mut inf_latency_ms = BTreeMap::new();
    for field in record.iter().skip(PROFILE_FIXED_COLUMNS.len()) {
        if let Some((kind, amount)) = field.split_once('=') {
            if !inf_latency_ms.is_empty() {
                return Err(malformed(format!("resource pair `{field}` after latency pairs")));
            }
            let kind = kind.parse::<ResourceKind>().map_err(malformed)?;
            resources.set(kind, num(amount.trim(), kind.as_str(), line)?);
        } else if let Some((batch, ms)) = field.split_once(':') {
            let batch: u32 = num(batch.trim(), "batch", line)?;
            if inf_latency_ms.insert(batch, num(ms.trim(), "latency", line)?).is_some() {
                return Err(malformed(format!("batch {batch} listed twice")));
            }
        } else {
            return Err(malformed(format!("expected `type=amount` or `batch:latency`, found `{field}`")));
        }
    }

    let profile = VariantProfile {
        variant_id,
        arch_id: ArchId::from(&record[1]),
        hardware,
        optimizer,
        max_batch: num(&record[4], "max_batch", line)?,
        accuracy: num(&record[5], "accuracy", line)?,
        inf_latency_ms,
        load_latency_ms: num(&record[6], "load_latency_ms", line)?,
        saturation_qps: num(&record[7], "saturation_qps", line)?,
        cost_rate: num(&record[8], "cost_rate", line)?,
        resources,
    };
    profile.validate()?;
    Ok(profile)
}

/// Write a catalog in the profile file format accepted by [`load_profiles`].
pub fn write_profiles<W: Write>(catalog: &Catalog, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{},resources,latencies", PROFILE_FIXED_COLUMNS.join(","))?;
    for v in catalog.variants() {
        write!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            v.variant_id,
            v.arch_id,
            v.hardware,
            v.optimizer,
            v.max_batch,
            v.accuracy,
            v.load_latency_ms,
            v.saturation_qps,
            v.cost_rate
        )?;
        for (kind, amount) in v.resources.iter().filter(|(_, a)| *a > 0.0) {
            write!(out, ",{kind}={amount}")?;
        }
        for (b, ms) in &v.inf_latency_ms {
            write!(out, ",{b}:{ms}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resnet() -> ModelArchitecture {
        builtin_architectures().into_iter().next().unwrap()
    }

    #[test]
    fn single_combination_yields_one_cpu_variant() {
        let vs = generate_variants(&resnet(), &[HardwareSpec::default_for(Hardware::Cpu)], &[1]).unwrap();
        assert_eq!(vs.len(), 1);
        assert_eq!(vs[0].hardware, Hardware::Cpu);
        assert_eq!(vs[0].max_batch, 1);
    }

    #[test]
    fn full_grid_count_matches_enumeration() {
        let hw = default_hardware();
        let batches = all_batch_sizes();
        let vs = generate_variants(&resnet(), &hw, &batches).unwrap();

        // Brute-force count of the combination grid.
        let mut expected = 0;
        for spec in &hw {
            for _opt in &spec.optimizers {
                for b in 1..=MAX_BATCH {
                    if b.is_power_of_two() && b <= spec.max_batch {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(vs.len(), expected);
        assert_eq!(expected, 28);
        // Tens of variants from one architecture.
        assert!((10..=100).contains(&vs.len()));
        let ids: BTreeSet<_> = vs.iter().map(|v| &v.variant_id).collect();
        assert_eq!(ids.len(), vs.len());
    }

    #[test]
    fn generation_errors() {
        let arch = resnet();
        assert_eq!(generate_variants(&arch, &[], &[1]), Err(CatalogError::NoHardware));
        assert_eq!(
            generate_variants(&arch, &default_hardware(), &[3]),
            Err(CatalogError::InvalidBatch(3))
        );
        assert_eq!(
            generate_variants(&arch, &default_hardware(), &[128]),
            Err(CatalogError::InvalidBatch(128))
        );
        assert_eq!(CatalogError::NoHardware.to_string(), "no hardware");
        assert!(CatalogError::InvalidBatch(3).to_string().starts_with("invalid batch"));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = builtin_catalog(None);
        let b = builtin_catalog(None);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        write_profiles(&a, &mut ba).unwrap();
        write_profiles(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn parametric_formulas_hold() {
        let arch = resnet();
        let hw = default_hardware();
        for v in generate_variants(&arch, &hw, &all_batch_sizes()).unwrap() {
            let spec = hw.iter().find(|s| s.hardware == v.hardware).unwrap();
            let a = spec.batch_fixed_fraction;
            let opt = if v.optimizer == Optimizer::GraphOptimized { spec.graph_opt_speedup } else { 1.0 };
            let l1 = arch.shape.base_latency_ms / spec.speedup / opt;
            for (&b, &ms) in &v.inf_latency_ms {
                assert!((ms - l1 * (a + (1.0 - a) * b as f64)).abs() < 1e-9);
            }
            let lb = l1 * (a + (1.0 - a) * v.max_batch as f64);
            let sat = v.max_batch as f64 / (lb / 1000.0) * spec.pipeline_factor;
            assert!((v.saturation_qps - sat).abs() < 1e-9);
            assert_eq!(v.accuracy, arch.declared_accuracy);
        }
    }

    #[test]
    fn saturation_is_monotone_in_max_batch() {
        let arch = resnet();
        for spec in default_hardware() {
            for &opt in &spec.optimizers {
                let sats: Vec<f64> = all_batch_sizes()
                    .into_iter()
                    .map(|b| spec.saturation_qps(&arch.shape, opt, b))
                    .collect();
                assert!(sats.windows(2).all(|w| w[1] >= w[0]), "{spec:?}");
                let lat1: Vec<f64> = all_batch_sizes().iter().map(|_| spec.latency_ms(&arch.shape, opt, 1)).collect();
                assert!(lat1.windows(2).all(|w| w[0] == w[1]));
            }
        }
    }

    #[test]
    fn default_cost_normalization() {
        let cat = builtin_catalog(Some(&["resnet50"]));
        let cpu = cat.variant("resnet50-cpu-base-b1").unwrap();
        assert!((cpu.cost_rate - 0.031 * 2.5).abs() < 1e-12);
        assert_eq!(cpu.resources.gpu_mem_gb, 0.0);
        let gpu = cat.variant("resnet50-gpu-opt-b8").unwrap();
        assert!((gpu.cost_rate - 0.498 * gpu.resources.gpu_mem_gb).abs() < 1e-12);
        let acc = cat.variant("resnet50-accel-opt-b1").unwrap();
        assert_eq!(acc.resources.cpu_cores, 0.0);
        assert_eq!(acc.resources.accel_cores, 1.0);
    }

    const ABC_CSV: &str = "\
variant_id,arch_id,hardware,optimizer,max_batch,accuracy,load_latency_ms,saturation_qps,cost_rate,resources,latencies
A,resnet50,cpu,none,1,0.75,0,5,1,cpu_cores=4,1:200
B,resnet50,accel,graph_optimized,1,0.75,0,100,3,accel_cores=1,1:20
C,resnet50,gpu,graph_optimized,1,0.75,0,800,16,gpu_mem_gb=16,1:15
";

    #[test]
    fn loads_three_table_variants() {
        let cat = load_profiles(ABC_CSV.as_bytes()).unwrap();
        assert_eq!(cat.len(), 3);
        let a = cat.variant("A").unwrap();
        assert_eq!(a.batch1_latency_ms(), 200.0);
        assert_eq!(a.saturation_qps, 5.0);
        assert_eq!(a.cost_rate, 1.0);
        let c = cat.variant("C").unwrap();
        assert_eq!((c.batch1_latency_ms(), c.saturation_qps, c.cost_rate), (15.0, 800.0, 16.0));
        assert_eq!(cat.archs().count(), 1);
    }

    #[test]
    fn empty_file_is_empty_catalog() {
        assert!(load_profiles("".as_bytes()).unwrap().is_empty());
        assert!(load_profiles("\n\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_variant_rejected() {
        let dup = format!("{ABC_CSV}A,resnet50,cpu,none,1,0.75,0,5,1,cpu_cores=4,1:200\n");
        assert_eq!(
            load_profiles(dup.as_bytes()).unwrap_err(),
            CatalogError::DuplicateVariant(VariantId::from("A"))
        );
    }

    #[test]
    fn malformed_row_reports_line() {
        let bad = format!("{ABC_CSV}D,resnet50,cpu,none,one,0.75,0,5,1,1:200\n");
        match load_profiles(bad.as_bytes()).unwrap_err() {
            CatalogError::Malformed { line, reason } => {
                assert_eq!(line, 5);
                assert!(reason.contains("max_batch"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let missing_header = "A,resnet50,cpu,none,1,0.75,0,5,1,cpu_cores=4,1:200\n";
        assert!(matches!(
            load_profiles(missing_header.as_bytes()),
            Err(CatalogError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn invariant_violation_names_field() {
        let bad = format!("{ABC_CSV}D,resnet50,cpu,none,1,1.5,0,5,1,1:200\n");
        match load_profiles(bad.as_bytes()).unwrap_err() {
            CatalogError::InvalidField { field, .. } => assert_eq!(field, "accuracy"),
            other => panic!("unexpected {other:?}"),
        }
        let gpu_mem_on_cpu = format!("{ABC_CSV}D,resnet50,cpu,none,1,0.5,0,5,1,gpu_mem_gb=2,1:200\n");
        match load_profiles(gpu_mem_on_cpu.as_bytes()).unwrap_err() {
            CatalogError::InvalidField { field, .. } => assert_eq!(field, "resources"),
            other => panic!("unexpected {other:?}"),
        }
        let decreasing = format!("{ABC_CSV}D,resnet50,cpu,none,2,0.5,0,5,1,1:200,2:100\n");
        match load_profiles(decreasing.as_bytes()).unwrap_err() {
            CatalogError::InvalidField { field, .. } => assert_eq!(field, "inf_latency_ms"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn written_profiles_reload_identically() {
        let cat = builtin_catalog(Some(&["resnet50", "mobilenet_v1"]));
        let mut buf = Vec::new();
        write_profiles(&cat, &mut buf).unwrap();
        let back = load_profiles(buf.as_slice()).unwrap();
        let a: Vec<_> = cat.variants().cloned().collect();
        let b: Vec<_> = back.variants().cloned().collect();
        assert_eq!(a, b);
    }
}
