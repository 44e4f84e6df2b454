//! Query-time variant selection and interference mitigation.
//!
//! A requirements query is served, in order of preference, by:
//!
//! 1. an Active instance that meets the accuracy floor and the SLO and still
//!    has headroom (cheapest variant first, then least-loaded worker);
//! 2. a fresh load of the registered variant with the lowest combined loading
//!    and inference latency that fits the SLO, on the least-loaded worker that
//!    has room for it;
//! 3. nothing: the caller gets the closest achievable variant as a hint.
//!
//! Overloaded and Interfered instances are never chosen.

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::VariantProfile;
use crate::ids::{AppId, ArchId, InstanceId, VariantId, WorkerId};
use crate::lifecycle::InstanceState;
use crate::resources::Hardware;
use crate::store::{InstanceRecord, MetadataStore, StoreError};
use crate::time::{to_millis, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    #[default]
    Online,
    Offline,
}

/// An inference request. Naming a model selects by-model mode; otherwise the
/// SLO and accuracy floor drive selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub app_id: AppId,
    pub model: Option<ArchId>,
    pub slo_ms: Option<f64>,
    pub min_accuracy: Option<f64>,
    pub kind: QueryKind,
    pub batch: u32,
    pub arrival: SimTime,
}

impl QueryRequest {
    pub fn by_requirements(app: impl Into<AppId>, slo_ms: f64, min_accuracy: f64, batch: u32, arrival: SimTime) -> Self {
        Self {
            app_id: app.into(),
            model: None,
            slo_ms: Some(slo_ms),
            min_accuracy: Some(min_accuracy),
            kind: QueryKind::Online,
            batch,
            arrival,
        }
    }

    pub fn by_model(app: impl Into<AppId>, model: impl Into<ArchId>, batch: u32, arrival: SimTime) -> Self {
        Self {
            app_id: app.into(),
            model: Some(model.into()),
            slo_ms: None,
            min_accuracy: None,
            kind: QueryKind::Online,
            batch,
            arrival,
        }
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.batch == 0 {
            return Err(SelectionError::InvalidQuery("batch must be >= 1".into()));
        }
        if self.model.is_none() {
            if self.min_accuracy.is_none() {
                return Err(SelectionError::InvalidQuery("requirements query needs min_accuracy".into()));
            }
            if self.kind == QueryKind::Online && self.slo_ms.is_none() {
                return Err(SelectionError::InvalidQuery("requirements query needs latency_slo_ms".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Placement {
    pub variant_id: VariantId,
    pub worker_id: WorkerId,
    /// The loaded instance to use; `None` when a load is required.
    pub instance: Option<InstanceId>,
    pub needs_load: bool,
    pub estimated_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("unknown app `{0}`")]
    UnknownApp(AppId),
    #[error("unknown model `{0}`")]
    UnknownModel(ArchId),
    #[error("no feasible variant (closest: {})", suggestion.as_ref().map_or("none", |s| s.as_str()))]
    NoFeasibleVariant { suggestion: Option<VariantId> },
    #[error("no worker has free {hardware} resources for `{variant}`")]
    Unplaceable { variant: VariantId, hardware: Hardware },
}

impl From<StoreError> for SelectionError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownApp(a) => SelectionError::UnknownApp(a),
            StoreError::UnknownModel(m) => SelectionError::UnknownModel(m),
            other => SelectionError::InvalidQuery(other.to_string()),
        }
    }
}

pub fn get_variant_for_query(q: &QueryRequest, store: &MetadataStore) -> Result<Placement, SelectionError> {
    q.validate()?;
    if q.model.is_some() {
        return by_model_dispatch(q, store);
    }
    if !store.has_app(q.app_id.as_str()) {
        return Err(SelectionError::UnknownApp(q.app_id.clone()));
    }
    let min_acc = q.min_accuracy.unwrap_or(0.0);
    if q.kind == QueryKind::Offline {
        return offline_choice(q, store, min_acc);
    }
    let slo = q.slo_ms.expect("validated");
    let app = q.app_id.as_str();

    // (i) Active instances with headroom.
    let active = store
        .ordered_candidates(app, InstanceState::Active)?
        .take_while(|(k, _)| *k <= slo)
        .map(|(_, v)| v)
        .filter(|v| v.accuracy >= min_acc && fits_slo(v, q.batch, slo));
    if let Some(p) = best_active(store, active, q, Some(slo)) {
        return Ok(p);
    }

    // (ii) Load the variant with the lowest combined latency.
    let cold: Vec<&VariantProfile> = store
        .ordered_candidates(app, InstanceState::Inactive)?
        .take_while(|(k, _)| *k <= slo)
        .map(|(_, v)| v)
        .filter(|v| v.accuracy >= min_acc && v.supports_batch(q.batch))
        .filter(|v| v.load_latency_ms + v.latency_ms(q.batch).unwrap_or(f64::INFINITY) <= slo)
        .collect();
    if let Some(p) = place_first(store, &cold, q.batch)? {
        return Ok(p);
    }

    // (iii) Nothing fits.
    Err(SelectionError::NoFeasibleVariant {
        suggestion: suggest(store.app_archs(app).into_iter().flatten().flat_map(|a| store.variants_of_arch(a.as_str())), min_acc, q.batch),
    })
}

/// Serve a query that names its model: same Active-then-load fallback,
/// restricted to that model's variants and without accuracy or SLO filters.
pub fn by_model_dispatch(q: &QueryRequest, store: &MetadataStore) -> Result<Placement, SelectionError> {
    let model = q.model.as_ref().ok_or_else(|| SelectionError::InvalidQuery("no model named".into()))?;
    if store.arch(model.as_str()).is_none() {
        return Err(SelectionError::UnknownModel(model.clone()));
    }
    let variants: Vec<&VariantProfile> = store
        .variants_of_arch(model.as_str())
        .filter(|v| v.supports_batch(q.batch))
        .collect();
    let active = variants
        .iter()
        .copied()
        .filter(|v| store.instances_of_variant(v.variant_id.as_str()).any(|r| r.state == InstanceState::Active && !r.offline));
    if let Some(p) = best_active(store, active, q, q.slo_ms) {
        return Ok(p);
    }
    let mut cold = variants;
    cold.sort_by(|a, b| {
        OrderedFloat(a.cold_latency_ms())
            .cmp(&OrderedFloat(b.cold_latency_ms()))
            .then_with(|| a.variant_id.cmp(&b.variant_id))
    });
    if let Some(p) = place_first(store, &cold, q.batch)? {
        return Ok(p);
    }
    Err(SelectionError::NoFeasibleVariant { suggestion: None })
}

fn fits_slo(v: &VariantProfile, batch: u32, slo: f64) -> bool {
    v.supports_batch(batch) && v.latency_ms(batch).is_some_and(|ms| ms <= slo)
}

/// An Active instance can take another query if its measured rate is below
/// saturation and, when an SLO is given, its queue still leaves time to meet it.
pub fn has_headroom(r: &InstanceRecord, v: &VariantProfile, batch: u32, now: SimTime, slo: Option<f64>) -> bool {
    if r.state != InstanceState::Active || r.offline || r.current_qps >= v.saturation_qps {
        return false;
    }
    match (slo, v.latency_ms(batch)) {
        (Some(slo), Some(ms)) => to_millis(r.queue_delay(now)) + ms <= slo,
        (None, Some(_)) => true,
        (_, None) => false,
    }
}

fn best_active<'a>(
    store: &MetadataStore,
    candidates: impl Iterator<Item = &'a VariantProfile>,
    q: &QueryRequest,
    slo: Option<f64>,
) -> Option<Placement> {
    let mut best: Option<(&VariantProfile, &InstanceRecord, f64)> = None;
    for v in candidates {
        if best.is_some_and(|(b, _, _)| (OrderedFloat(b.cost_rate), &b.variant_id) < (OrderedFloat(v.cost_rate), &v.variant_id)) {
            continue;
        }
        let pick = store
            .instances_of_variant(v.variant_id.as_str())
            .filter(|r| has_headroom(r, v, q.batch, q.arrival, slo))
            .map(|r| {
                let util = store.worker(r.worker_id).map_or(0.0, |w| w.util[v.hardware]);
                (r, util)
            })
            .min_by(|a, b| {
                OrderedFloat(a.1)
                    .cmp(&OrderedFloat(b.1))
                    .then_with(|| a.0.worker_id.cmp(&b.0.worker_id))
                    .then_with(|| a.0.id.cmp(&b.0.id))
            });
        if let Some((r, _)) = pick {
            let est = to_millis(r.queue_delay(q.arrival)) + v.latency_ms(q.batch).expect("supports batch");
            best = Some((v, r, est));
        }
    }
    best.map(|(v, r, est)| Placement {
        variant_id: v.variant_id.clone(),
        worker_id: r.worker_id,
        instance: Some(r.id),
        needs_load: false,
        estimated_latency_ms: est,
    })
}

/// Workers with room for `v`, least utilized on its hardware first.
pub fn placeable_worker(store: &MetadataStore, v: &VariantProfile) -> Option<WorkerId> {
    let fits: Vec<WorkerId> = store
        .workers()
        .filter(|w| w.can_host(&v.resources))
        .map(|w| w.id)
        .collect();
    store.least_loaded_worker(&fits, v.hardware).ok()
}

fn place_first(store: &MetadataStore, ordered: &[&VariantProfile], batch: u32) -> Result<Option<Placement>, SelectionError> {
    for v in ordered {
        if let Some(w) = placeable_worker(store, v) {
            return Ok(Some(Placement {
                variant_id: v.variant_id.clone(),
                worker_id: w,
                instance: None,
                needs_load: true,
                estimated_latency_ms: v.load_latency_ms + v.latency_ms(batch).expect("supports batch"),
            }));
        }
    }
    match ordered.first() {
        Some(v) => Err(SelectionError::Unplaceable {
            variant: v.variant_id.clone(),
            hardware: v.hardware,
        }),
        None => Ok(None),
    }
}

fn offline_choice(q: &QueryRequest, store: &MetadataStore, min_acc: f64) -> Result<Placement, SelectionError> {
    let app = q.app_id.as_str();
    let mut pool: Vec<&VariantProfile> = store
        .app_archs(app)
        .into_iter()
        .flatten()
        .flat_map(|a| store.variants_of_arch(a.as_str()))
        .filter(|v| v.accuracy >= min_acc && v.supports_batch(q.batch))
        .collect();
    pool.sort_by(|a, b| {
        OrderedFloat(a.cost_rate)
            .cmp(&OrderedFloat(b.cost_rate))
            .then_with(|| a.variant_id.cmp(&b.variant_id))
    });
    match place_first(store, &pool, q.batch)? {
        Some(p) => Ok(p),
        None => Err(SelectionError::NoFeasibleVariant {
            suggestion: suggest(
                store.app_archs(app).into_iter().flatten().flat_map(|a| store.variants_of_arch(a.as_str())),
                min_acc,
                q.batch,
            ),
        }),
    }
}

/// Closest achievable variant: the fastest one meeting the accuracy floor,
/// else the most accurate one.
pub fn suggest<'a>(variants: impl Iterator<Item = &'a VariantProfile>, min_acc: f64, batch: u32) -> Option<VariantId> {
    let all: Vec<&VariantProfile> = variants.collect();
    let lat = |v: &VariantProfile| OrderedFloat(v.latency_ms(batch).unwrap_or_else(|| v.batch1_latency_ms()));
    let accurate = all
        .iter()
        .filter(|v| v.accuracy >= min_acc)
        .min_by(|a, b| lat(a).cmp(&lat(b)).then_with(|| a.variant_id.cmp(&b.variant_id)));
    accurate
        .or_else(|| {
            all.iter().min_by(|a, b| {
                OrderedFloat(b.accuracy)
                    .cmp(&OrderedFloat(a.accuracy))
                    .then_with(|| lat(a).cmp(&lat(b)))
                    .then_with(|| a.variant_id.cmp(&b.variant_id))
            })
        })
        .map(|v| v.variant_id.clone())
}

/// Where to move an Interfered instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MigrationPlan {
    pub instance: InstanceId,
    pub variant_id: VariantId,
    pub from: WorkerId,
    pub to: WorkerId,
    /// Same-worker moves reuse the already-fetched model binary.
    pub intra_worker: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MitigationError {
    #[error("instance `{0}` is not interfered")]
    NotInterfered(InstanceId),
    #[error("unknown instance `{0}`")]
    UnknownInstance(InstanceId),
    #[error("no worker can host another {hardware} instance of `{variant}`")]
    Escalate { variant: VariantId, hardware: Hardware },
}

/// Plan a move for an Interfered instance: same worker if it has room,
/// otherwise the least-loaded other worker with room, otherwise escalate to
/// worker-level scaling.
pub fn mitigate(instance: InstanceId, store: &MetadataStore) -> Result<MigrationPlan, MitigationError> {
    let r = store.instance(instance).ok_or(MitigationError::UnknownInstance(instance))?;
    if r.state != InstanceState::Interfered {
        return Err(MitigationError::NotInterfered(instance));
    }
    let v = store.variant(r.variant_id.as_str()).expect("instances reference registered variants");
    let plan = |to: WorkerId| MigrationPlan {
        instance,
        variant_id: v.variant_id.clone(),
        from: r.worker_id,
        to,
        intra_worker: to == r.worker_id,
    };
    if store.worker(r.worker_id).is_some_and(|w| w.can_host(&v.resources)) {
        return Ok(plan(r.worker_id));
    }
    let remote: Vec<WorkerId> = store
        .workers()
        .filter(|w| w.id != r.worker_id && w.can_host(&v.resources))
        .map(|w| w.id)
        .collect();
    store
        .least_loaded_worker(&remote, v.hardware)
        .map(plan)
        .map_err(|_| MitigationError::Escalate {
            variant: v.variant_id.clone(),
            hardware: v.hardware,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::load_profiles;
    use crate::lifecycle::LifecycleEvent;
    use crate::resources::{PerHardware, Resources};

    const ABC_CSV: &str = "\
variant_id,arch_id,hardware,optimizer,max_batch,accuracy,load_latency_ms,saturation_qps,cost_rate
A,resnet50,cpu,none,1,0.75,0,5,1,cpu_cores=4,1:200
B,resnet50,accel,graph_optimized,1,0.75,0,100,3,accel_cores=1,1:20
C,resnet50,gpu,graph_optimized,1,0.75,0,800,16,gpu_mem_gb=16,1:15
";

    fn store() -> MetadataStore {
        let mut s = MetadataStore::new();
        s.register_catalog(&load_profiles(ABC_CSV.as_bytes()).unwrap(), "demo").unwrap();
        let big = Resources {
            cpu_cores: 16.0,
            cpu_mem_gb: 64.0,
            gpu_mem_gb: 32.0,
            accel_cores: 4.0,
        };
        s.add_worker(WorkerId(0), Hardware::Gpu, big, 0).unwrap();
        s.add_worker(WorkerId(1), Hardware::Gpu, big, 0).unwrap();
        s
    }

    fn load(s: &mut MetadataStore, v: &str, w: u32) -> InstanceId {
        let id = s.begin_load(v, WorkerId(w), 0, false, None).unwrap();
        s.update_instance(id, LifecycleEvent::LoadComplete, 0).unwrap();
        id
    }

    #[test]
    fn active_match_is_reused() {
        let mut s = store();
        let id = load(&mut s, "A", 1);
        let p = get_variant_for_query(&QueryRequest::by_requirements("demo", 300.0, 0.7, 1, 0), &s).unwrap();
        assert_eq!(p.instance, Some(id));
        assert!(!p.needs_load);
        assert_eq!(p.estimated_latency_ms, 200.0);
    }

    #[test]
    fn cold_path_prefers_lowest_combined_latency() {
        let s = store();
        let p = get_variant_for_query(&QueryRequest::by_requirements("demo", 50.0, 0.7, 1, 0), &s).unwrap();
        assert_eq!(p.variant_id.as_str(), "C");
        assert!(p.needs_load);
        assert_eq!(p.worker_id, WorkerId(0));
    }

    #[test]
    fn infeasible_slo_suggests_fastest() {
        let s = store();
        let err = get_variant_for_query(&QueryRequest::by_requirements("demo", 10.0, 0.7, 1, 0), &s).unwrap_err();
        assert_eq!(err, SelectionError::NoFeasibleVariant { suggestion: Some("C".into()) });
        let err = get_variant_for_query(&QueryRequest::by_requirements("demo", 500.0, 0.99, 1, 0), &s).unwrap_err();
        assert_eq!(err, SelectionError::NoFeasibleVariant { suggestion: Some("C".into()) });
    }

    #[test]
    fn degraded_instances_are_skipped() {
        let mut s = store();
        let id = load(&mut s, "A", 0);
        s.update_instance(id, LifecycleEvent::Monitor(InstanceState::Overloaded), 1).unwrap();
        let p = get_variant_for_query(&QueryRequest::by_requirements("demo", 300.0, 0.7, 1, 0), &s).unwrap();
        assert!(p.needs_load);
    }

    #[test]
    fn least_loaded_worker_wins_among_instances() {
        let mut s = store();
        load(&mut s, "A", 0);
        let b = load(&mut s, "A", 1);
        s.set_worker_util(WorkerId(0), PerHardware { cpu: 0.5, ..Default::default() }).unwrap();
        s.set_worker_util(WorkerId(1), PerHardware { cpu: 0.1, ..Default::default() }).unwrap();
        let p = get_variant_for_query(&QueryRequest::by_requirements("demo", 300.0, 0.7, 1, 0), &s).unwrap();
        assert_eq!(p.instance, Some(b));
    }

    #[test]
    fn unplaceable_when_cluster_full() {
        let mut s = MetadataStore::new();
        s.register_catalog(&load_profiles(ABC_CSV.as_bytes()).unwrap(), "demo").unwrap();
        s.add_worker(WorkerId(0), Hardware::Cpu, Resources { cpu_cores: 2.0, ..Resources::ZERO }, 0)
            .unwrap();
        let err = get_variant_for_query(&QueryRequest::by_requirements("demo", 300.0, 0.7, 1, 0), &s).unwrap_err();
        assert!(matches!(err, SelectionError::Unplaceable { .. }));
    }

    #[test]
    fn by_model_examples() {
        let mut s = store();
        let q = QueryRequest::by_model("demo", "resnet50", 1, 0);
        let p = by_model_dispatch(&q, &s).unwrap();
        // Oracle: minimum load + inference latency.
        let best = s
            .variants_of_arch("resnet50")
            .min_by(|a, b| a.cold_latency_ms().partial_cmp(&b.cold_latency_ms()).unwrap())
            .unwrap();
        assert_eq!(p.variant_id, best.variant_id);
        let id = load(&mut s, "A", 0);
        assert_eq!(by_model_dispatch(&q, &s).unwrap().instance, Some(id));
        let unknown = QueryRequest::by_model("demo", "nope", 1, 0);
        assert_eq!(by_model_dispatch(&unknown, &s), Err(SelectionError::UnknownModel("nope".into())));
    }

    #[test]
    fn offline_takes_cheapest() {
        let s = store();
        let mut q = QueryRequest::by_requirements("demo", 1.0, 0.7, 1, 0);
        q.kind = QueryKind::Offline;
        assert_eq!(get_variant_for_query(&q, &s).unwrap().variant_id.as_str(), "A");
    }

    #[test]
    fn mitigation_paths() {
        let mut s = MetadataStore::new();
        s.register_catalog(&load_profiles(ABC_CSV.as_bytes()).unwrap(), "demo").unwrap();
        let eight = Resources { cpu_cores: 8.0, ..Resources::ZERO };
        s.add_worker(WorkerId(0), Hardware::Cpu, eight, 0).unwrap();
        let id = load(&mut s, "A", 0);
        s.update_instance(id, LifecycleEvent::Monitor(InstanceState::Interfered), 1).unwrap();
        let p = mitigate(id, &s).unwrap();
        assert!(p.intra_worker);

        // Fill the local worker, add two remote workers.
        load(&mut s, "A", 0);
        s.add_worker(WorkerId(1), Hardware::Cpu, eight, 0).unwrap();
        s.add_worker(WorkerId(2), Hardware::Cpu, eight, 0).unwrap();
        s.set_worker_util(WorkerId(1), PerHardware { cpu: 0.6, ..Default::default() }).unwrap();
        s.set_worker_util(WorkerId(2), PerHardware { cpu: 0.3, ..Default::default() }).unwrap();
        let p = mitigate(id, &s).unwrap();
        assert_eq!((p.to, p.intra_worker), (WorkerId(2), false));

        load(&mut s, "A", 1);
        load(&mut s, "A", 1);
        load(&mut s, "A", 2);
        load(&mut s, "A", 2);
        assert!(matches!(mitigate(id, &s), Err(MitigationError::Escalate { .. })));
    }
}
