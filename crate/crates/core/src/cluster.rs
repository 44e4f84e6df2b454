//! Worker-level autoscaling and bin-pack dispatch.
//!
//! A worker of hardware type `H` is added when
//!
//! * R1: every worker that has `H` runs above the utilization threshold on it;
//! * R2: every worker that has `H` hosts an Interfered instance on `H`;
//! * R3: more than the overload fraction of all workers host an Overloaded
//!   instance (the new worker gets the hardware type with the most
//!   Overloaded instances);
//! * R4: a load could not be placed anywhere for lack of `H` resources.
//!
//! At most one worker per hardware type is added per evaluation, and none
//! while a worker of that type is still starting. Idle workers are removed
//! after an idle window, never the last one.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::WorkerId;
use crate::resources::{Hardware, PerHardware, ResourceKind, Resources};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkerView {
    pub id: WorkerId,
    pub kind: Hardware,
    pub totals: Resources,
    pub free: Resources,
    pub util: PerHardware<f64>,
    /// Overloaded instances per hardware type.
    pub overloaded: PerHardware<u32>,
    /// Hosts at least one Interfered instance on that hardware.
    pub interfered: PerHardware<bool>,
    pub instances: usize,
    /// Start of the current run of zero instances and zero load.
    pub idle_since: Option<SimTime>,
    pub added_at: SimTime,
}

impl WorkerView {
    pub fn has(&self, h: Hardware) -> bool {
        self.totals.has(h)
    }

    pub fn has_overloaded(&self) -> bool {
        self.overloaded.iter().any(|(_, &n)| n > 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct ClusterView {
    pub workers: Vec<WorkerView>,
    /// Hardware types of workers that are starting, with their ready times.
    pub pending: Vec<(Hardware, SimTime)>,
    /// Hardware types for which a load found no room since the last evaluation.
    pub unplaceable: PerHardware<bool>,
}

impl ClusterView {
    pub fn with_hardware(&self, h: Hardware) -> impl Iterator<Item = &WorkerView> {
        self.workers.iter().filter(move |w| w.has(h))
    }

    /// Mean utilization over workers having each hardware type.
    pub fn mean_util(&self) -> PerHardware<f64> {
        PerHardware::from_fn(|h| {
            let (sum, n) = self
                .with_hardware(h)
                .fold((0.0, 0usize), |(s, n), w| (s + w.util[h], n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
    }

    pub fn overloaded_totals(&self) -> PerHardware<u32> {
        PerHardware::from_fn(|h| self.workers.iter().map(|w| w.overloaded[h]).sum())
    }

    pub fn workers_with_overload(&self) -> usize {
        self.workers.iter().filter(|w| w.has_overloaded()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmConfig {
    pub util_threshold: f64,
    /// R3 fires when strictly more than this fraction of workers is overloaded.
    pub overload_fraction: f64,
    pub startup_s: f64,
    pub idle_removal_s: f64,
    pub max_workers_per_hardware: usize,
}

impl Default for VmConfig {
    fn default() -> Self {
        Self {
            util_threshold: 0.8,
            overload_fraction: 0.8,
            startup_s: 30.0,
            idle_removal_s: 60.0,
            max_workers_per_hardware: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    R1Utilization,
    R2Interference,
    R3Overload,
    R4Unplaceable,
    IdleRemoval,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::R1Utilization => "r1_utilization",
            Rule::R2Interference => "r2_interference",
            Rule::R3Overload => "r3_overload",
            Rule::R4Unplaceable => "r4_unplaceable",
            Rule::IdleRemoval => "idle_removal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum VmAction {
    AddWorker { hardware: Hardware, rule: Rule },
    RemoveWorker { worker: WorkerId },
}

/// R1 for one hardware type.
pub fn r1_fires(view: &ClusterView, h: Hardware, threshold: f64) -> bool {
    let mut with = view.with_hardware(h).peekable();
    with.peek().is_some() && with.all(|w| w.util[h] > threshold)
}

/// R2 for one hardware type.
pub fn r2_fires(view: &ClusterView, h: Hardware) -> bool {
    let mut with = view.with_hardware(h).peekable();
    with.peek().is_some() && with.all(|w| w.interfered[h])
}

/// R3, returning the hardware type for the new worker.
pub fn r3_fires(view: &ClusterView, fraction: f64) -> Option<Hardware> {
    let n = view.workers.len();
    if n == 0 || (view.workers_with_overload() as f64) <= fraction * n as f64 {
        return None;
    }
    let totals = view.overloaded_totals();
    let mut best = Hardware::ALL[0];
    for h in Hardware::ALL {
        if totals[h] > totals[best] {
            best = h;
        }
    }
    Some(best)
}

pub fn vm_scale_decision(view: &ClusterView, now: SimTime, cfg: &VmConfig) -> Vec<VmAction> {
    let mut fired: Vec<(Hardware, Rule)> = Vec::new();
    for h in Hardware::ALL {
        if r1_fires(view, h, cfg.util_threshold) {
            fired.push((h, Rule::R1Utilization));
        }
        if r2_fires(view, h) {
            fired.push((h, Rule::R2Interference));
        }
    }
    if let Some(h) = r3_fires(view, cfg.overload_fraction) {
        fired.push((h, Rule::R3Overload));
    }
    for h in Hardware::ALL {
        if view.unplaceable[h] {
            fired.push((h, Rule::R4Unplaceable));
        }
    }

    let mut actions = Vec::new();
    let mut added = PerHardware::<bool>::default();
    for (h, rule) in fired {
        let pending = view.pending.iter().any(|(p, _)| *p == h);
        let count = view.workers.iter().filter(|w| w.kind == h).count();
        if added[h] || pending || count >= cfg.max_workers_per_hardware {
            continue;
        }
        added[h] = true;
        actions.push(VmAction::AddWorker { hardware: h, rule });
    }

    let idle = crate::time::from_secs(cfg.idle_removal_s);
    let startup = crate::time::from_secs(cfg.startup_s);
    let mut remaining = view.workers.len();
    for w in &view.workers {
        if remaining <= 1 {
            break;
        }
        let idle_long = w.instances == 0 && w.idle_since.is_some_and(|t| now.saturating_sub(t) >= idle);
        let settled = now >= w.added_at + startup + idle;
        if idle_long && settled {
            actions.push(VmAction::RemoveWorker { worker: w.id });
            remaining -= 1;
        }
    }
    actions
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no capacity")]
pub struct NoCapacity;

/// The resource a demand is packed on: the accelerator resource it needs, or
/// CPU cores, or host memory.
pub fn dominant_kind(demand: &Resources) -> ResourceKind {
    [ResourceKind::GpuMemGb, ResourceKind::AccelCores, ResourceKind::CpuCores]
        .into_iter()
        .find(|&k| demand.get(k) > 0.0)
        .unwrap_or(ResourceKind::CpuMemGb)
}

/// Best fit on the dominant resource: the worker left with the least of it
/// after placement. Every resource type must fit; ties go to the lowest id.
pub fn dispatch_bin_pack(candidates: &[(WorkerId, Resources)], demand: &Resources) -> Result<WorkerId, NoCapacity> {
    let kind = dominant_kind(demand);
    candidates
        .iter()
        .filter(|(_, free)| demand.fits_within(free))
        .map(|(id, free)| (free.get(kind) - demand.get(kind), *id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
        .map(|(_, id)| id)
        .ok_or(NoCapacity)
}
