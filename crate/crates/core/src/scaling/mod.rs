//! Model-level autoscaling.
//!
//! A scaling decision assigns every candidate variant an integer action
//! `delta`: positive loads that many instances, negative unloads, zero leaves
//! it alone. Plans are scored by
//!
//! ```text
//! Cost(delta) = C * (delta + lambda * T_load_seconds * max(delta, 0))
//! ```
//!
//! and must satisfy, with `N` the running counts:
//!
//! 1. `sum Q * (N + delta) >= L + slack` (serve the load),
//! 2. `T_inf <= S` for every variant with `delta > 0` (new instances meet the SLO),
//! 3. `sum R_type * (N + delta) <= R_type_total` for every resource type,
//! 4. `N + delta >= 0`.
//!
//! [`ilp::solve_ilp`] finds the exact optimum for small instances;
//! [`greedy`] is the online heuristic.

pub mod greedy;
pub mod ilp;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::catalog::VariantProfile;
use crate::ids::VariantId;
use crate::resources::Resources;

/// Tunables shared by the exact and greedy planners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    /// Weight on loading latency, per second.
    pub lambda: f64,
    /// Minimum ratio of capacity to load to maintain.
    pub slack_threshold: f64,
}

impl Default for ScalingParams {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            slack_threshold: 1.05,
        }
    }
}

impl ScalingParams {
    /// Additive slack equivalent to the ratio threshold at load `load`.
    pub fn slack(&self, load: f64) -> f64 {
        (self.slack_threshold - 1.0) * load
    }
}

pub fn action_cost(delta: i64, v: &VariantProfile, lambda: f64) -> f64 {
    v.cost_rate * (delta as f64 + lambda * v.load_latency_s() * delta.max(0) as f64)
}

/// Combined saturation throughput over combined served load. Zero load
/// yields `f64::INFINITY`.
pub fn headroom(instances: &[(f64, f64)]) -> f64 {
    let sat: f64 = instances.iter().map(|(q, _)| q).sum();
    let load: f64 = instances.iter().map(|(_, l)| l).sum();
    if load <= 0.0 {
        f64::INFINITY
    } else {
        sat / load
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Replicate,
    Upgrade,
    Downgrade,
    Unload,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Replicate => "replicate",
            ActionKind::Upgrade => "upgrade",
            ActionKind::Downgrade => "downgrade",
            ActionKind::Unload => "unload",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The variants one planning decision may touch, aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleContext {
    pub variants: Vec<VariantProfile>,
    /// Running (or loading) instance count per variant.
    pub running: Vec<u32>,
    /// Load currently served per variant, queries/second.
    pub served_qps: Vec<f64>,
    /// Resources the plan may occupy in total, including running instances.
    pub capacity: Resources,
}

impl ScaleContext {
    pub fn new(variants: Vec<VariantProfile>, capacity: Resources) -> Self {
        let n = variants.len();
        Self {
            variants,
            running: vec![0; n],
            served_qps: vec![0.0; n],
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.variants.iter().position(|v| v.variant_id.as_str() == id)
    }

    pub fn running_capacity(&self) -> f64 {
        self.variants
            .iter()
            .zip(&self.running)
            .map(|(v, &n)| v.saturation_qps * n as f64)
            .sum()
    }

    pub fn used(&self) -> Resources {
        self.variants
            .iter()
            .zip(&self.running)
            .fold(Resources::ZERO, |acc, (v, &n)| acc + v.resources * n as f64)
    }

    /// Capacity left after the running instances.
    pub fn free(&self) -> Resources {
        self.capacity.saturating_sub(&self.used())
    }

    /// The running variant serving the most load; ties go to the lower index.
    pub fn pivot(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for i in (0..self.len()).filter(|&i| self.running[i] > 0) {
            if best.is_none_or(|b| self.served_qps[i] > self.served_qps[b]) {
                best = Some(i);
            }
        }
        best
    }

    pub fn plan_cost(&self, deltas: &[i64], lambda: f64) -> f64 {
        self.variants
            .iter()
            .zip(deltas)
            .map(|(v, &d)| action_cost(d, v, lambda))
            .sum()
    }

    /// Check a delta vector against the four constraints, reporting the
    /// first one violated.
    pub fn check(&self, deltas: &[i64], load: f64, slack: f64, slo_ms: f64) -> Result<(), ConstraintClass> {
        assert_eq!(deltas.len(), self.len());
        let after = |i: usize| self.running[i] as i64 + deltas[i];
        let served: f64 = (0..self.len())
            .map(|i| self.variants[i].saturation_qps * after(i).max(0) as f64)
            .sum();
        if served + 1e-9 < load + slack {
            return Err(ConstraintClass::Load);
        }
        if (0..self.len()).any(|i| deltas[i] > 0 && self.variants[i].batch1_latency_ms() > slo_ms) {
            return Err(ConstraintClass::Slo);
        }
        let used = (0..self.len()).fold(Resources::ZERO, |acc, i| {
            acc + self.variants[i].resources * after(i).max(0) as f64
        });
        if !used.fits_within(&self.capacity) {
            return Err(ConstraintClass::Resources);
        }
        if (0..self.len()).any(|i| after(i) < 0) {
            return Err(ConstraintClass::NonNegative);
        }
        Ok(())
    }
}

/// Which constraint a plan (or problem) fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintClass {
    Load,
    Slo,
    Resources,
    NonNegative,
}

impl fmt::Display for ConstraintClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintClass::Load => "load",
            ConstraintClass::Slo => "slo",
            ConstraintClass::Resources => "resources",
            ConstraintClass::NonNegative => "non_negative",
        })
    }
}

/// A set of scaling actions with their labels and objective value.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct ScalingPlan {
    pub actions: BTreeMap<VariantId, i64>,
    pub labels: BTreeMap<VariantId, ActionKind>,
    pub total_cost: f64,
    /// The loads do not fit on the planning worker and need placing elsewhere.
    pub remote: bool,
}

impl ScalingPlan {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Build a plan from a delta vector over `ctx`, dropping zero entries.
    pub fn from_deltas(ctx: &ScaleContext, deltas: &[i64], lambda: f64) -> Self {
        let pivot_cost = ctx.pivot().map(|p| ctx.variants[p].cost_rate);
        let mut plan = ScalingPlan {
            total_cost: ctx.plan_cost(deltas, lambda),
            ..Default::default()
        };
        for (i, &d) in deltas.iter().enumerate().filter(|(_, d)| **d != 0) {
            let v = &ctx.variants[i];
            plan.actions.insert(v.variant_id.clone(), d);
            plan.labels
                .insert(v.variant_id.clone(), label_action(d, ctx.running[i] > 0, v.cost_rate, pivot_cost));
        }
        plan
    }

    pub fn deltas(&self, ctx: &ScaleContext) -> Vec<i64> {
        ctx.variants
            .iter()
            .map(|v| self.actions.get(&v.variant_id).copied().unwrap_or(0))
            .collect()
    }

    /// Compact `id:+n;id:-m` rendering used by the plan log.
    pub fn actions_string(&self) -> String {
        self.actions
            .iter()
            .map(|(id, d)| format!("{id}:{d:+}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn has_label(&self, kind: ActionKind) -> bool {
        self.labels.values().any(|&k| k == kind)
    }
}

/// Positive actions on a loaded variant replicate it; on an unloaded variant
/// they upgrade when it costs more than the serving (pivot) variant and
/// downgrade otherwise. Negative actions unload.
pub fn label_action(delta: i64, already_loaded: bool, cost_rate: f64, pivot_cost: Option<f64>) -> ActionKind {
    if delta < 0 {
        ActionKind::Unload
    } else if already_loaded {
        ActionKind::Replicate
    } else {
        match pivot_cost {
            Some(p) if cost_rate <= p => ActionKind::Downgrade,
            _ => ActionKind::Upgrade,
        }
    }
}

/// One line of the plan log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanLogEntry {
    pub time_s: f64,
    pub worker: String,
    pub arch: String,
    pub actions: String,
    pub labels: String,
    pub objective: f64,
    pub trigger: String,
}

impl PlanLogEntry {
    pub fn new(time_s: f64, worker: String, arch: String, plan: &ScalingPlan, trigger: &str) -> Self {
        Self {
            time_s,
            worker,
            arch,
            actions: plan.actions_string(),
            labels: plan
                .labels
                .iter()
                .map(|(id, k)| format!("{id}:{k}"))
                .collect::<Vec<_>>()
                .join(";"),
            objective: plan.total_cost,
            trigger: trigger.to_string(),
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::catalog::Optimizer;
    use crate::resources::Hardware;

    pub fn variant(id: &str, lat: f64, qps: f64, cost: f64, load_s: f64) -> VariantProfile {
        VariantProfile {
            variant_id: id.into(),
            arch_id: "m".into(),
            hardware: Hardware::Cpu,
            optimizer: Optimizer::None,
            max_batch: 1,
            accuracy: 0.75,
            inf_latency_ms: [(1, lat)].into_iter().collect(),
            load_latency_ms: load_s * 1000.0,
            saturation_qps: qps,
            cost_rate: cost,
            resources: Resources {
                cpu_cores: 1.0,
                ..Resources::ZERO
            },
        }
    }

    /// Variants A, B and C with zero loading latency and generous resources.
    pub fn abc_variants() -> ScaleContext {
        ScaleContext::new(
            vec![
                variant("A", 200.0, 5.0, 1.0, 0.0),
                variant("B", 20.0, 100.0, 3.0, 0.0),
                variant("C", 15.0, 800.0, 16.0, 0.0),
            ],
            Resources {
                cpu_cores: 1000.0,
                ..Resources::ZERO
            },
        )
    }
}
