//! Metadata store: registered variants, loaded instances, and worker state.
//!
//! Selection reads go through sorted per-app indexes so that finding the best
//! candidate is a walk from the front of an ordered set rather than a scan of
//! every variant:
//!
//! * the cold index orders every registered variant of an app by
//!   `load_latency + batch-1 inference latency`;
//! * one warm index per loaded state orders the variants that currently have
//!   at least one instance in that state by batch-1 inference latency.
//!
//! Equal latencies fall back to `variant_id` order. The store is driven by a
//! single writer; every mutation leaves the indexes consistent before
//! returning.

use std::collections::{BTreeMap, BTreeSet};

use ordered_float::OrderedFloat;
use serde::Serialize;
use thiserror::Error;

use crate::catalog::{Catalog, ModelArchitecture, VariantProfile};
use crate::ids::{AppId, ArchId, InstanceId, VariantId, WorkerId};
use crate::lifecycle::{next_state, InstanceState, LifecycleError, LifecycleEvent};
use crate::resources::{Hardware, PerHardware, Resources};
use crate::time::SimTime;

#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("architecture `{arch}` is already registered for app `{app}`")]
    DuplicateRegistration { app: AppId, arch: ArchId },
    #[error("variant `{variant}` references unknown architecture `{arch}`")]
    UnknownArch { variant: VariantId, arch: ArchId },
    #[error("variant `{0}` is already registered with a different profile")]
    ConflictingVariant(VariantId),
    #[error("unknown app `{0}`")]
    UnknownApp(AppId),
    #[error("unknown model `{0}`")]
    UnknownModel(ArchId),
    #[error("unknown variant `{0}`")]
    UnknownVariant(VariantId),
    #[error("unknown instance `{0}`")]
    UnknownInstance(InstanceId),
    #[error("unknown worker `{0}`")]
    UnknownWorker(WorkerId),
    #[error("worker `{0}` already exists")]
    DuplicateWorker(WorkerId),
    #[error("worker `{0}` still hosts instances")]
    WorkerBusy(WorkerId),
    #[error("no worker")]
    NoWorker,
    #[error("worker `{worker}` lacks free resources for `{variant}`")]
    InsufficientResources { worker: WorkerId, variant: VariantId },
    #[error("instance `{instance}`: {source}")]
    Lifecycle {
        instance: InstanceId,
        #[source]
        source: LifecycleError,
    },
}

/// A variant instance placed on a worker.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceRecord {
    pub id: InstanceId,
    pub variant_id: VariantId,
    pub arch_id: ArchId,
    pub worker_id: WorkerId,
    pub app_id: Option<AppId>,
    pub state: InstanceState,
    pub current_qps: f64,
    pub observed_latency_ms: Option<f64>,
    /// Last state change.
    pub since: SimTime,
    /// When the instance finishes (or finished) loading.
    pub ready_at: SimTime,
    /// Time at which the instance's queue drains.
    pub backlog_until: SimTime,
    /// Offline-job instances are invisible to online selection.
    pub offline: bool,
}

impl InstanceRecord {
    pub fn is_loading(&self) -> bool {
        self.state == InstanceState::Inactive
    }

    /// Queueing delay a query arriving at `now` would see.
    pub fn queue_delay(&self, now: SimTime) -> SimTime {
        self.backlog_until.max(self.ready_at).saturating_sub(now)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkerState {
    pub id: WorkerId,
    /// Hardware class the worker was provisioned for.
    pub kind: Hardware,
    pub totals: Resources,
    pub used: Resources,
    pub running: BTreeSet<InstanceId>,
    /// Busy fraction of the dominant resource, per hardware class.
    pub util: PerHardware<f64>,
    pub start_time: SimTime,
}

impl WorkerState {
    pub fn free(&self) -> Resources {
        self.totals.saturating_sub(&self.used)
    }

    pub fn can_host(&self, demand: &Resources) -> bool {
        demand.fits_within(&self.free())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegistrationReceipt {
    pub app_id: AppId,
    pub arch_id: ArchId,
    pub variants: usize,
}

type LatencyKey = (OrderedFloat<f64>, VariantId);

#[derive(Debug, Clone, Default)]
pub struct MetadataStore {
    archs: BTreeMap<ArchId, ModelArchitecture>,
    variants: BTreeMap<VariantId, VariantProfile>,
    apps: BTreeMap<AppId, BTreeSet<ArchId>>,
    arch_apps: BTreeMap<ArchId, BTreeSet<AppId>>,
    cold_idx: BTreeMap<AppId, BTreeSet<LatencyKey>>,
    warm_idx: BTreeMap<(AppId, InstanceState), BTreeMap<LatencyKey, u32>>,
    instances: BTreeMap<InstanceId, InstanceRecord>,
    by_state: [BTreeSet<InstanceId>; 4],
    by_variant: BTreeMap<VariantId, BTreeSet<InstanceId>>,
    workers: BTreeMap<WorkerId, WorkerState>,
    next_instance: u64,
}

fn warm_key(v: &VariantProfile) -> LatencyKey {
    (OrderedFloat(v.batch1_latency_ms()), v.variant_id.clone())
}

fn cold_key(v: &VariantProfile) -> LatencyKey {
    (OrderedFloat(v.cold_latency_ms()), v.variant_id.clone())
}

impl MetadataStore {
    pub fn new() -> Self {
        Self::default()
    }

    // -- registration ------------------------------------------------------

    pub fn register_model(
        &mut self,
        arch: ModelArchitecture,
        variants: Vec<VariantProfile>,
        app_id: impl Into<AppId>,
    ) -> Result<RegistrationReceipt, StoreError> {
        let app_id = app_id.into();
        if self.apps.get(&app_id).is_some_and(|a| a.contains(&arch.arch_id)) {
            return Err(StoreError::DuplicateRegistration {
                app: app_id,
                arch: arch.arch_id,
            });
        }
        for v in &variants {
            if v.arch_id != arch.arch_id {
                return Err(StoreError::UnknownArch {
                    variant: v.variant_id.clone(),
                    arch: v.arch_id.clone(),
                });
            }
            if self.variants.get(&v.variant_id).is_some_and(|old| old != v) {
                return Err(StoreError::ConflictingVariant(v.variant_id.clone()));
            }
        }

        let arch_id = arch.arch_id.clone();
        self.archs.entry(arch_id.clone()).or_insert(arch);
        for v in variants {
            self.variants.entry(v.variant_id.clone()).or_insert(v);
        }
        self.apps.entry(app_id.clone()).or_default().insert(arch_id.clone());
        self.arch_apps.entry(arch_id.clone()).or_default().insert(app_id.clone());

        let cold = self.cold_idx.entry(app_id.clone()).or_default();
        let arch_variants: Vec<&VariantProfile> =
            self.variants.values().filter(|v| v.arch_id == arch_id).collect();
        for v in &arch_variants {
            cold.insert(cold_key(v));
        }
        // Instances loaded before this registration become visible to the app.
        let loaded: Vec<(InstanceState, VariantId)> = self
            .instances
            .values()
            .filter(|r| r.arch_id == arch_id && !r.offline && r.state.is_loaded())
            .map(|r| (r.state, r.variant_id.clone()))
            .collect();
        for (state, vid) in loaded {
            let key = warm_key(&self.variants[&vid]);
            *self.warm_idx.entry((app_id.clone(), state)).or_default().entry(key).or_insert(0) += 1;
        }
        Ok(RegistrationReceipt {
            app_id,
            arch_id,
            variants: arch_variants.len(),
        })
    }

    /// Register every architecture of a catalog under one app.
    pub fn register_catalog(&mut self, catalog: &Catalog, app_id: impl Into<AppId>) -> Result<(), StoreError> {
        let app_id = app_id.into();
        for arch in catalog.archs() {
            let vs = catalog.variants_of(arch.arch_id.as_str()).cloned().collect();
            self.register_model(arch.clone(), vs, app_id.clone())?;
        }
        Ok(())
    }

    // -- lookups -------------------------------------------------------------

    pub fn variant(&self, id: &str) -> Option<&VariantProfile> {
        self.variants.get(id)
    }

    pub fn variants(&self) -> impl Iterator<Item = &VariantProfile> {
        self.variants.values()
    }

    pub fn arch(&self, id: &str) -> Option<&ModelArchitecture> {
        self.archs.get(id)
    }

    pub fn variants_of_arch<'a>(&'a self, arch: &'a str) -> impl Iterator<Item = &'a VariantProfile> + 'a {
        self.variants.values().filter(move |v| v.arch_id.as_str() == arch)
    }

    pub fn app_archs(&self, app: &str) -> Option<&BTreeSet<ArchId>> {
        self.apps.get(app)
    }

    pub fn has_app(&self, app: &str) -> bool {
        self.apps.contains_key(app)
    }

    /// Variants of `app` in ascending key-latency order for one state bucket,
    /// lazily. Inactive walks the cold index; loaded states walk their warm
    /// index and only yield variants with at least one instance in that state.
    pub fn ordered_candidates<'a>(
        &'a self,
        app: &str,
        state: InstanceState,
    ) -> Result<Box<dyn Iterator<Item = (f64, &'a VariantProfile)> + 'a>, StoreError> {
        let app_key = self
            .apps
            .get_key_value(app)
            .map(|(k, _)| k.clone())
            .ok_or_else(|| StoreError::UnknownApp(AppId::from(app)))?;
        let it: Box<dyn Iterator<Item = (f64, &VariantProfile)>> = if state == InstanceState::Inactive {
            match self.cold_idx.get(&app_key) {
                Some(set) => Box::new(set.iter().map(|(k, id)| (k.0, &self.variants[id]))),
                None => Box::new(std::iter::empty()),
            }
        } else {
            match self.warm_idx.get(&(app_key, state)) {
                Some(map) => Box::new(map.keys().map(|(k, id)| (k.0, &self.variants[id]))),
                None => Box::new(std::iter::empty()),
            }
        };
        Ok(it)
    }

    /// Variants of `app` meeting `min_accuracy` whose key latency is within
    /// `latency_budget_ms`, ascending by key latency then variant id. When
    /// the filter names several states a variant appears once, at its
    /// smallest key.
    pub fn candidates_by_requirements(
        &self,
        app: &str,
        min_accuracy: f64,
        latency_budget_ms: f64,
        state_filter: &[InstanceState],
    ) -> Result<Vec<(VariantId, f64)>, StoreError> {
        let mut out: Vec<(VariantId, f64)> = Vec::new();
        for &state in state_filter {
            let hits = self
                .ordered_candidates(app, state)?
                .take_while(|(k, _)| *k <= latency_budget_ms)
                .filter(|(_, v)| v.accuracy >= min_accuracy)
                .map(|(k, v)| (v.variant_id.clone(), k));
            out.extend(hits);
        }
        if state_filter.len() > 1 {
            out.sort_by(|a, b| OrderedFloat(a.1).cmp(&OrderedFloat(b.1)).then_with(|| a.0.cmp(&b.0)));
            let mut seen = BTreeSet::new();
            out.retain(|(id, _)| seen.insert(id.clone()));
        }
        Ok(out)
    }

    /// First (lowest key latency) candidate, without materializing the list.
    pub fn best_candidate(
        &self,
        app: &str,
        min_accuracy: f64,
        latency_budget_ms: f64,
        state: InstanceState,
    ) -> Result<Option<(VariantId, f64)>, StoreError> {
        Ok(self
            .ordered_candidates(app, state)?
            .take_while(|(k, _)| *k <= latency_budget_ms)
            .find(|(_, v)| v.accuracy >= min_accuracy)
            .map(|(k, v)| (v.variant_id.clone(), k)))
    }

    // -- instances -----------------------------------------------------------

    pub fn instance(&self, id: InstanceId) -> Option<&InstanceRecord> {
        self.instances.get(&id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.values()
    }

    pub fn instances_in(&self, state: InstanceState) -> impl Iterator<Item = &InstanceRecord> {
        self.by_state[state.index()].iter().map(|id| &self.instances[id])
    }

    pub fn instances_of_variant<'a>(&'a self, variant: &str) -> impl Iterator<Item = &'a InstanceRecord> + 'a {
        self.by_variant
            .get(variant)
            .into_iter()
            .flatten()
            .map(|id| &self.instances[id])
    }

    pub fn instances_on(&self, worker: WorkerId) -> impl Iterator<Item = &InstanceRecord> {
        self.workers
            .get(&worker)
            .into_iter()
            .flat_map(|w| w.running.iter())
            .map(|id| &self.instances[id])
    }

    /// Reserve resources on `worker` and create an Inactive (loading) record.
    pub fn begin_load(
        &mut self,
        variant: &str,
        worker: WorkerId,
        now: SimTime,
        offline: bool,
        app_id: Option<AppId>,
    ) -> Result<InstanceId, StoreError> {
        let profile = self
            .variants
            .get(variant)
            .ok_or_else(|| StoreError::UnknownVariant(VariantId::from(variant)))?;
        let w = self.workers.get_mut(&worker).ok_or(StoreError::UnknownWorker(worker))?;
        if !w.can_host(&profile.resources) {
            return Err(StoreError::InsufficientResources {
                worker,
                variant: profile.variant_id.clone(),
            });
        }
        let id = InstanceId(self.next_instance);
        self.next_instance += 1;
        w.used += profile.resources;
        w.running.insert(id);
        let ready_at = now + crate::time::from_millis(profile.load_latency_ms);
        let record = InstanceRecord {
            id,
            variant_id: profile.variant_id.clone(),
            arch_id: profile.arch_id.clone(),
            worker_id: worker,
            app_id,
            state: InstanceState::Inactive,
            current_qps: 0.0,
            observed_latency_ms: None,
            since: now,
            ready_at,
            backlog_until: ready_at,
            offline,
        };
        self.by_state[InstanceState::Inactive.index()].insert(id);
        self.by_variant.entry(record.variant_id.clone()).or_default().insert(id);
        self.instances.insert(id, record);
        Ok(id)
    }

    /// Apply a lifecycle event. Unloading releases the instance's resources
    /// and drops the record.
    pub fn update_instance(
        &mut self,
        id: InstanceId,
        event: LifecycleEvent,
        now: SimTime,
    ) -> Result<InstanceState, StoreError> {
        let record = self.instances.get(&id).ok_or(StoreError::UnknownInstance(id))?;
        let from = record.state;
        let to = next_state(from, event).map_err(|source| StoreError::Lifecycle { instance: id, source })?;
        if to == from {
            return Ok(to);
        }
        let variant_id = record.variant_id.clone();
        let offline = record.offline;
        self.reindex(id, &variant_id, offline, from, to);

        if to == InstanceState::Inactive {
            let record = self.instances.remove(&id).expect("checked above");
            self.by_state[InstanceState::Inactive.index()].remove(&id);
            if let Some(set) = self.by_variant.get_mut(&variant_id) {
                set.remove(&id);
                if set.is_empty() {
                    self.by_variant.remove(&variant_id);
                }
            }
            let demand = self.variants[&variant_id].resources;
            if let Some(w) = self.workers.get_mut(&record.worker_id) {
                w.used = w.used.saturating_sub(&demand);
                w.running.remove(&id);
            }
        } else {
            let r = self.instances.get_mut(&id).expect("checked above");
            if from == InstanceState::Inactive {
                r.ready_at = now;
                r.backlog_until = r.backlog_until.min(now);
            }
            r.state = to;
            r.since = now;
        }
        Ok(to)
    }

    fn reindex(&mut self, id: InstanceId, variant: &VariantId, offline: bool, from: InstanceState, to: InstanceState) {
        self.by_state[from.index()].remove(&id);
        self.by_state[to.index()].insert(id);
        if offline {
            return;
        }
        let key = warm_key(&self.variants[variant]);
        let arch = &self.variants[variant].arch_id;
        for app in self.arch_apps.get(arch).into_iter().flatten() {
            if from.is_loaded() {
                let bucket = self.warm_idx.entry((app.clone(), from)).or_default();
                if let Some(n) = bucket.get_mut(&key) {
                    *n -= 1;
                    if *n == 0 {
                        bucket.remove(&key);
                    }
                }
            }
            if to.is_loaded() {
                *self
                    .warm_idx
                    .entry((app.clone(), to))
                    .or_default()
                    .entry(key.clone())
                    .or_insert(0) += 1;
            }
        }
    }

    /// Record the monitor's view of an instance's load and latency.
    pub fn set_observation(&mut self, id: InstanceId, qps: f64, latency_ms: Option<f64>) -> Result<(), StoreError> {
        let r = self.instances.get_mut(&id).ok_or(StoreError::UnknownInstance(id))?;
        r.current_qps = if r.state.is_loaded() { qps.max(0.0) } else { 0.0 };
        if latency_ms.is_some() {
            r.observed_latency_ms = latency_ms;
        }
        Ok(())
    }

    pub fn set_backlog(&mut self, id: InstanceId, until: SimTime) -> Result<(), StoreError> {
        let r = self.instances.get_mut(&id).ok_or(StoreError::UnknownInstance(id))?;
        r.backlog_until = until;
        Ok(())
    }

    // -- workers ------------------------------------------------------------

    pub fn add_worker(&mut self, id: WorkerId, kind: Hardware, totals: Resources, now: SimTime) -> Result<(), StoreError> {
        if self.workers.contains_key(&id) {
            return Err(StoreError::DuplicateWorker(id));
        }
        self.workers.insert(
            id,
            WorkerState {
                id,
                kind,
                totals,
                used: Resources::ZERO,
                running: BTreeSet::new(),
                util: PerHardware::default(),
                start_time: now,
            },
        );
        Ok(())
    }

    pub fn remove_worker(&mut self, id: WorkerId) -> Result<WorkerState, StoreError> {
        let w = self.workers.get(&id).ok_or(StoreError::UnknownWorker(id))?;
        if !w.running.is_empty() {
            return Err(StoreError::WorkerBusy(id));
        }
        Ok(self.workers.remove(&id).expect("checked above"))
    }

    pub fn worker(&self, id: WorkerId) -> Option<&WorkerState> {
        self.workers.get(&id)
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerState> {
        self.workers.values()
    }

    pub fn set_worker_util(&mut self, id: WorkerId, util: PerHardware<f64>) -> Result<(), StoreError> {
        let w = self.workers.get_mut(&id).ok_or(StoreError::UnknownWorker(id))?;
        w.util = PerHardware::from_fn(|h| util[h].clamp(0.0, 1.0));
        Ok(())
    }

    /// Candidate minimizing `util[hardware]`; ties go to the lowest id.
    pub fn least_loaded_worker(&self, candidates: &[WorkerId], hardware: Hardware) -> Result<WorkerId, StoreError> {
        least_loaded(candidates.iter().map(|id| {
            let w = self.workers.get(id).ok_or(StoreError::UnknownWorker(*id))?;
            Ok((w.id, w.util[hardware]))
        }))
    }

    /// Dump the full store as JSON with a stable field order.
    pub fn snapshot_json(&self) -> String {
        #[derive(Serialize)]
        struct Snapshot<'a> {
            apps: &'a BTreeMap<AppId, BTreeSet<ArchId>>,
            variants: Vec<&'a VariantId>,
            instances: Vec<&'a InstanceRecord>,
            workers: Vec<&'a WorkerState>,
        }
        let snap = Snapshot {
            apps: &self.apps,
            variants: self.variants.keys().collect(),
            instances: self.instances.values().collect(),
            workers: self.workers.values().collect(),
        };
        serde_json::to_string_pretty(&snap).expect("store snapshot serializes")
    }

    /// Recompute every index from the primary maps and compare. Used by tests.
    pub fn check_consistency(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (i, bucket) in self.by_state.iter().enumerate() {
            for id in bucket {
                if !seen.insert(*id) {
                    return Err(format!("{id} in two state buckets"));
                }
                let r = self.instances.get(id).ok_or(format!("{id} indexed but missing"))?;
                if r.state.index() != i {
                    return Err(format!("{id} in wrong bucket"));
                }
            }
        }
        if seen.len() != self.instances.len() {
            return Err("state buckets do not cover every instance".into());
        }
        let mut expect: BTreeMap<(AppId, InstanceState), BTreeMap<LatencyKey, u32>> = BTreeMap::new();
        for r in self.instances.values().filter(|r| !r.offline && r.state.is_loaded()) {
            for app in self.arch_apps.get(&r.arch_id).into_iter().flatten() {
                *expect
                    .entry((app.clone(), r.state))
                    .or_default()
                    .entry(warm_key(&self.variants[&r.variant_id]))
                    .or_insert(0) += 1;
            }
        }
        let actual: BTreeMap<_, _> = self
            .warm_idx
            .iter()
            .filter(|(_, m)| !m.is_empty())
            .map(|(k, m)| (k.clone(), m.clone()))
            .collect();
        if actual != expect {
            return Err("warm index out of sync".into());
        }
        for w in self.workers.values() {
            let used = w
                .running
                .iter()
                .fold(Resources::ZERO, |acc, id| acc + self.variants[&self.instances[id].variant_id].resources);
            if !used.fits_within(&w.totals) {
                return Err(format!("{} over-committed", w.id));
            }
            for (k, v) in used.iter() {
                if (v - w.used.get(k)).abs() > 1e-6 {
                    return Err(format!("{} used {k} drifted", w.id));
                }
            }
        }
        Ok(())
    }
}

/// Minimum by value, ties to the lowest id.
pub fn least_loaded<I>(candidates: I) -> Result<WorkerId, StoreError>
where
    I: IntoIterator<Item = Result<(WorkerId, f64), StoreError>>,
{
    let mut best: Option<(WorkerId, f64)> = None;
    for c in candidates {
        let (id, u) = c?;
        best = match best {
            Some((bid, bu)) if bu < u || (bu == u && bid < id) => Some((bid, bu)),
            _ => Some((id, u)),
        };
    }
    best.map(|(id, _)| id).ok_or(StoreError::NoWorker)
}
