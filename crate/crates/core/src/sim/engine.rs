//! The event loop.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use ordered_float::OrderedFloat;

use super::metrics::{IntervalMetrics, ScalingLogEntry, SimOutput, Summary, ThrottleEntry};
use super::{OfflineJobSpec, Policy, ScalerKind, SimConfig, SimError};
use crate::catalog::VariantProfile;
use crate::cluster::{dispatch_bin_pack, vm_scale_decision, ClusterView, VmAction, WorkerView};
use crate::ids::{ArchId, InstanceId, WorkerId};
use crate::lifecycle::{classify, ewma, monitor_decision, InstanceState, LifecycleEvent, MonitorSample};
use crate::resources::{Hardware, PerHardware};
use crate::scaling::greedy::{greedy_scale_down, greedy_scale_up, retire_delay_s, wait_ticks, ScaleDownTracker, TrackerOutcome};
use crate::scaling::ilp::{solve_plan, IlpOptions};
use crate::scaling::{PlanLogEntry, ScaleContext, ScalingPlan};
use crate::selection::{get_variant_for_query, mitigate, placeable_worker, MitigationError};
use crate::store::MetadataStore;
use crate::time::{from_millis, from_secs, to_millis, to_secs, SimTime};
use crate::workload::ArrivalTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Arrival(usize),
    Complete { query: usize, hardware: Hardware },
    LoadComplete(InstanceId),
    Monitor,
    ModelAutoscale,
    VmAutoscale,
    WorkerReady(WorkerId),
    OfflineChunk(usize),
    CostTick,
    Metrics,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: SimTime,
    /// Metrics snapshots sort after everything else at the same instant.
    class: u8,
    seq: u64,
    kind: Kind,
}

#[derive(Debug, Default)]
struct InstState {
    dispatches: VecDeque<SimTime>,
    window_count: u64,
    window_latency_sum: f64,
    window_latency_n: u64,
    waiting: Vec<usize>,
    gpu_multiplier: f64,
}

#[derive(Debug)]
struct Job {
    spec: OfflineJobSpec,
    worker: WorkerId,
    instance: Option<InstanceId>,
    processed: u64,
    paused: bool,
    busy: Option<u64>,
}

impl Job {
    fn done(&self) -> bool {
        self.processed >= self.spec.total_inputs
    }
}

struct Deferred {
    wait: BTreeSet<InstanceId>,
    victims: Vec<InstanceId>,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    trace: &'a ArrivalTrace,
    store: MetadataStore,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: SimTime,
    horizon: SimTime,
    initial: Vec<WorkerId>,
    next_worker: u32,
    pending_workers: BTreeMap<WorkerId, (crate::resources::Hardware, SimTime)>,
    added_at: BTreeMap<WorkerId, SimTime>,
    idle_since: BTreeMap<WorkerId, SimTime>,
    unplaceable: PerHardware<bool>,
    insts: BTreeMap<InstanceId, InstState>,
    trackers: BTreeMap<(WorkerId, ArchId), ScaleDownTracker>,
    deferred: Vec<Deferred>,
    retiring: BTreeSet<InstanceId>,
    mitigating: BTreeSet<InstanceId>,
    arch_slo: BTreeMap<ArchId, f64>,
    jobs: Vec<Job>,
    cost: f64,
    in_flight: u64,
    cur: IntervalMetrics,
    totals: IntervalMetrics,
    out: SimOutput,
}

pub fn run(cfg: &SimConfig, store: MetadataStore, trace: &ArrivalTrace) -> Result<SimOutput, SimError> {
    cfg.validate(&store, trace)?;
    let mut e = Engine {
        cfg,
        trace,
        store,
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0,
        horizon: from_secs(cfg.horizon_s),
        initial: Vec::new(),
        next_worker: 0,
        pending_workers: BTreeMap::new(),
        added_at: BTreeMap::new(),
        idle_since: BTreeMap::new(),
        unplaceable: PerHardware::default(),
        insts: BTreeMap::new(),
        trackers: BTreeMap::new(),
        deferred: Vec::new(),
        retiring: BTreeSet::new(),
        mitigating: BTreeSet::new(),
        arch_slo: BTreeMap::new(),
        jobs: Vec::new(),
        cost: 0.0,
        in_flight: 0,
        cur: IntervalMetrics::default(),
        totals: IntervalMetrics::default(),
        out: SimOutput {
            metrics: Vec::new(),
            scaling_log: Vec::new(),
            plan_log: Vec::new(),
            throttle_log: Vec::new(),
            chunk_starts: Vec::new(),
            summary: Summary::default(),
        },
    };
    e.setup()?;
    while let Some(Reverse(ev)) = e.heap.pop() {
        if ev.time > e.horizon {
            break;
        }
        e.now = ev.time;
        e.handle(ev.kind);
        debug_assert_eq!(e.store.check_consistency(), Ok(()));
    }
    e.now = e.horizon;
    Ok(e.finish())
}

impl Engine<'_> {
    fn push(&mut self, time: SimTime, kind: Kind) {
        let class = u8::from(kind == Kind::Metrics);
        self.seq += 1;
        self.heap.push(Reverse(Event {
            time,
            class,
            seq: self.seq,
            kind,
        }));
    }

    fn push_periodic(&mut self, period_s: f64, kind: Kind) {
        let t = self.now + from_secs(period_s);
        if t <= self.horizon {
            self.push(t, kind);
        }
    }

    fn log(&mut self, level: &str, worker: impl ToString, action: &str, target: impl ToString, reason: &str) {
        self.out.scaling_log.push(ScalingLogEntry {
            time_s: to_secs(self.now),
            level: level.into(),
            worker: worker.to_string(),
            action: action.into(),
            target: target.to_string(),
            reason: reason.into(),
        });
    }

    fn scales_models(&self) -> bool {
        matches!(self.cfg.policy, Policy::Modelless | Policy::HorizontalOnly)
    }

    fn setup(&mut self) -> Result<(), SimError> {
        for spec in &self.cfg.workers {
            let id = WorkerId(self.next_worker);
            self.next_worker += 1;
            self.store
                .add_worker(id, spec.hardware, spec.resources, 0)
                .expect("fresh worker id");
            self.added_at.insert(id, 0);
            self.initial.push(id);
        }
        let pins = if self.cfg.policy == Policy::Modelless {
            &self.cfg.warm_start
        } else {
            &self.cfg.pinned
        };
        for w in pins {
            let v = self.store.variant(w.variant.as_str()).expect("validated").clone();
            for _ in 0..w.count {
                let worker = match w.worker {
                    Some(i) => Some(self.initial[i as usize]).filter(|id| self.store.worker(*id).is_some_and(|s| s.can_host(&v.resources))),
                    None => self.bin_pack(&v, None),
                }
                .ok_or_else(|| SimError::Startup(v.variant_id.clone()))?;
                let id = self.store.begin_load(v.variant_id.as_str(), worker, 0, false, None).expect("fits");
                self.store.update_instance(id, LifecycleEvent::LoadComplete, 0).expect("inactive to active");
                self.insts.insert(id, InstState::new());
            }
        }
        for spec in &self.cfg.offline {
            let worker = self.initial[spec.worker as usize];
            let job = self.jobs.len();
            self.jobs.push(Job {
                spec: spec.clone(),
                worker,
                instance: None,
                processed: 0,
                paused: false,
                busy: None,
            });
            let variant = match &spec.variant {
                Some(v) => self.store.variant(v.as_str()).cloned(),
                None => {
                    let w = self.store.worker(worker).expect("initial worker");
                    self.store
                        .variants_of_arch(spec.model.as_str())
                        .filter(|v| w.can_host(&v.resources))
                        .min_by(|a, b| {
                            OrderedFloat(a.cost_rate)
                                .cmp(&OrderedFloat(b.cost_rate))
                                .then_with(|| a.variant_id.cmp(&b.variant_id))
                        })
                        .cloned()
                }
            };
            let v = variant.ok_or_else(|| SimError::Startup(spec.model.as_str().into()))?;
            let id = self
                .store
                .begin_load(v.variant_id.as_str(), worker, 0, true, None)
                .map_err(|_| SimError::Startup(v.variant_id.clone()))?;
            self.insts.insert(id, InstState::new());
            self.jobs[job].instance = Some(id);
            let ready = self.store.instance(id).expect("just loaded").ready_at;
            self.push(ready, Kind::LoadComplete(id));
        }

        if !self.trace.arrivals.is_empty() {
            self.push(self.trace.arrivals[0].arrival, Kind::Arrival(0));
        }
        let th = &self.cfg.thresholds;
        let periodic = [
            (th.monitor_period_s, Kind::Monitor),
            (th.cost_tick_s, Kind::CostTick),
            (th.model_autoscale_period_s, Kind::ModelAutoscale),
            (th.vm_autoscale_period_s, Kind::VmAutoscale),
        ];
        for (p, k) in periodic {
            let skip = match k {
                Kind::ModelAutoscale => !self.scales_models(),
                Kind::VmAutoscale => !self.scales_models(),
                _ => false,
            };
            if !skip {
                self.push_periodic(p, k);
            }
        }
        if self.horizon > 0 {
            let t = from_secs(th.metrics_interval_s).min(self.horizon);
            self.push(t, Kind::Metrics);
        }
        Ok(())
    }

    fn handle(&mut self, kind: Kind) {
        match kind {
            Kind::Arrival(i) => self.on_arrival(i),
            Kind::Complete { query, hardware } => self.on_complete(query, hardware),
            Kind::LoadComplete(id) => self.on_load_complete(id),
            Kind::Monitor => {
                self.on_monitor();
                self.push_periodic(self.cfg.thresholds.monitor_period_s, Kind::Monitor);
            }
            Kind::ModelAutoscale => {
                self.on_model_autoscale();
                self.push_periodic(self.cfg.thresholds.model_autoscale_period_s, Kind::ModelAutoscale);
            }
            Kind::VmAutoscale => {
                self.on_vm_autoscale();
                self.push_periodic(self.cfg.thresholds.vm_autoscale_period_s, Kind::VmAutoscale);
            }
            Kind::WorkerReady(id) => self.on_worker_ready(id),
            Kind::OfflineChunk(job) => self.on_chunk_done(job),
            Kind::CostTick => {
                let dt = self.cfg.thresholds.cost_tick_s;
                let rate: f64 = self
                    .store
                    .instances()
                    .map(|r| self.store.variant(r.variant_id.as_str()).expect("registered").cost_rate)
                    .sum();
                self.cost += rate * dt;
                self.push_periodic(dt, Kind::CostTick);
            }
            Kind::Metrics => self.on_metrics(),
        }
    }

    // -- queries ------------------------------------------------------------

    fn on_arrival(&mut self, i: usize) {
        if i + 1 < self.trace.arrivals.len() {
            self.push(self.trace.arrivals[i + 1].arrival, Kind::Arrival(i + 1));
        }
        self.cur.arrived += 1;
        let q = &self.trace.arrivals[i];
        if self.cfg.policy == Policy::Modelless {
            if let Ok(p) = get_variant_for_query(q, &self.store) {
                let id = match p.instance {
                    Some(id) => id,
                    None => {
                        let id = self.load(p.variant_id.as_str(), p.worker_id);
                        self.log("query", p.worker_id, "load", &p.variant_id, "cold_start");
                        id
                    }
                };
                self.dispatch(i, id);
                return;
            }
        }
        match self.fallback_instance(i) {
            Some(id) => self.dispatch(i, id),
            None => {
                self.cur.rejected += 1;
                self.cur.violations += 1;
            }
        }
    }

    /// The least-backlogged loaded or loading instance able to serve query
    /// `i`; under the modelless policy, a fresh load when there is none.
    fn fallback_instance(&mut self, i: usize) -> Option<InstanceId> {
        let q = &self.trace.arrivals[i];
        let archs: Vec<ArchId> = match &q.model {
            Some(m) => vec![m.clone()],
            None => self.store.app_archs(q.app_id.as_str()).into_iter().flatten().cloned().collect(),
        };
        let min_acc = q.min_accuracy.unwrap_or(0.0);
        let ok = |v: &VariantProfile| archs.contains(&v.arch_id) && v.accuracy >= min_acc && v.supports_batch(q.batch);
        let best = self
            .store
            .instances()
            .filter(|r| !r.offline && !self.retiring.contains(&r.id))
            .filter(|r| ok(self.store.variant(r.variant_id.as_str()).expect("registered")))
            .min_by_key(|r| (r.backlog_until.max(r.ready_at), r.id))
            .map(|r| r.id);
        if best.is_some() || self.cfg.policy != Policy::Modelless {
            return best;
        }
        let slo = q.slo_ms.unwrap_or(f64::INFINITY);
        let mut pool: Vec<&VariantProfile> = archs
            .iter()
            .flat_map(|a| self.store.variants_of_arch(a.as_str()))
            .filter(|v| ok(v) && v.latency_ms(q.batch).is_some_and(|ms| ms <= slo))
            .collect();
        pool.sort_by(|a, b| {
            OrderedFloat(a.cost_rate)
                .cmp(&OrderedFloat(b.cost_rate))
                .then_with(|| a.variant_id.cmp(&b.variant_id))
        });
        let (variant, worker) = pool
            .into_iter()
            .find_map(|v| placeable_worker(&self.store, v).map(|w| (v.variant_id.clone(), w)))?;
        let id = self.load(variant.as_str(), worker);
        self.log("query", worker, "load", &variant, "no_feasible_variant");
        Some(id)
    }

    fn dispatch(&mut self, query: usize, id: InstanceId) {
        self.in_flight += 1;
        let now = self.now;
        let (arch, loading) = {
            let r = self.store.instance(id).expect("dispatch to a live instance");
            (r.arch_id.clone(), r.is_loading())
        };
        if let Some(slo) = self.trace.arrivals[query].slo_ms {
            let e = self.arch_slo.entry(arch).or_insert(slo);
            *e = e.min(slo);
        }
        let st = self.insts.get_mut(&id).expect("engine tracks every instance");
        st.dispatches.push_back(now);
        st.window_count += 1;
        if loading {
            st.waiting.push(query);
        } else {
            self.serve(query, id);
        }
    }

    fn serve(&mut self, query: usize, id: InstanceId) {
        let r = self.store.instance(id).expect("live instance");
        assert!(r.state.is_loaded(), "instance {id} served before its load completed");
        let v = self.store.variant(r.variant_id.as_str()).expect("registered");
        let q = &self.trace.arrivals[query];
        let mult = self.multiplier(id);
        let latency_ms = v.latency_ms(q.batch).unwrap_or_else(|| v.batch1_latency_ms());
        let start = self.now.max(r.backlog_until);
        let occupancy = from_secs(q.batch as f64 / v.saturation_qps * mult);
        let service = from_millis(latency_ms * mult);
        let hardware = v.hardware;
        self.store.set_backlog(id, start + occupancy).expect("live instance");
        let st = self.insts.get_mut(&id).expect("tracked");
        st.window_latency_sum += to_millis(service);
        st.window_latency_n += 1;
        self.push(start + service, Kind::Complete { query, hardware });
    }

    fn on_complete(&mut self, query: usize, hardware: Hardware) {
        self.in_flight -= 1;
        self.cur.served += 1;
        match hardware {
            Hardware::Cpu => self.cur.served_cpu += 1,
            Hardware::Gpu => self.cur.served_gpu += 1,
            Hardware::Accel => self.cur.served_accel += 1,
        }
        let q = &self.trace.arrivals[query];
        debug_assert!(self.now >= q.arrival);
        if q.slo_ms.is_some_and(|slo| to_millis(self.now - q.arrival) > slo) {
            self.cur.violations += 1;
        }
    }

    /// Latency multiplier for an online instance right now.
    fn multiplier(&self, id: InstanceId) -> f64 {
        let r = self.store.instance(id).expect("live instance");
        if r.offline {
            return 1.0;
        }
        let hw = self.store.variant(r.variant_id.as_str()).expect("registered").hardware;
        let mut m = self.insts[&id].gpu_multiplier;
        let t = to_secs(self.now);
        for j in &self.cfg.injections {
            if self.initial[j.worker as usize] == r.worker_id && t >= j.start_s && t < j.end_s {
                m *= j.multiplier;
            }
        }
        for job in &self.jobs {
            if job.worker == r.worker_id && job.busy.is_some() {
                let util = self.store.worker(r.worker_id).map_or(0.0, |w| w.util[hw]);
                m *= 1.0 + job.spec.coupling * util;
            }
        }
        m
    }

    // -- loading ------------------------------------------------------------

    fn load(&mut self, variant: &str, worker: WorkerId) -> InstanceId {
        let id = self
            .store
            .begin_load(variant, worker, self.now, false, None)
            .expect("caller checked capacity");
        self.insts.insert(id, InstState::new());
        let ready = self.store.instance(id).expect("just created").ready_at;
        self.push(ready, Kind::LoadComplete(id));
        id
    }

    fn on_load_complete(&mut self, id: InstanceId) {
        if self.store.instance(id).is_none() {
            return;
        }
        self.store
            .update_instance(id, LifecycleEvent::LoadComplete, self.now)
            .expect("loading instance becomes active");
        let waiting = std::mem::take(&mut self.insts.get_mut(&id).expect("tracked").waiting);
        for q in waiting {
            self.serve(q, id);
        }
        if let Some(j) = self.jobs.iter().position(|j| j.instance == Some(id)) {
            self.start_chunk(j);
        }
        let mut ready = Vec::new();
        for (k, d) in self.deferred.iter_mut().enumerate() {
            if d.wait.remove(&id) && d.wait.is_empty() {
                ready.push(k);
            }
        }
        for k in ready.into_iter().rev() {
            let d = self.deferred.remove(k);
            for v in d.victims {
                self.unload(v, "replaced");
            }
        }
    }

    fn unload(&mut self, id: InstanceId, reason: &str) {
        let Some(r) = self.store.instance(id) else {
            return;
        };
        let (worker, variant) = (r.worker_id, r.variant_id.clone());
        if r.is_loading() {
            return;
        }
        self.store.update_instance(id, LifecycleEvent::Unload, self.now).expect("loaded instance unloads");
        self.retiring.remove(&id);
        self.mitigating.remove(&id);
        if let Some(st) = self.insts.remove(&id) {
            debug_assert!(st.waiting.is_empty());
        }
        self.log("model", worker, "unload", variant, reason);
    }

    fn bin_pack(&self, v: &VariantProfile, exclude: Option<WorkerId>) -> Option<WorkerId> {
        let cands: Vec<_> = self
            .store
            .workers()
            .filter(|w| Some(w.id) != exclude)
            .map(|w| (w.id, w.free()))
            .collect();
        dispatch_bin_pack(&cands, &v.resources).ok()
    }

    // -- monitoring ---------------------------------------------------------

    fn on_monitor(&mut self) {
        let th = &self.cfg.thresholds;
        let period = th.monitor_period_s;
        let window = from_secs(period);
        let ids: Vec<InstanceId> = self.store.instances().filter(|r| r.state.is_loaded()).map(|r| r.id).collect();
        let mut ratios: BTreeMap<WorkerId, f64> = BTreeMap::new();
        for id in ids {
            let r = self.store.instance(id).expect("listed");
            let v = self.store.variant(r.variant_id.as_str()).expect("registered");
            let st = self.insts.get_mut(&id).expect("tracked");
            let qps = st.window_count as f64 / period;
            let avg = (st.window_latency_n > 0).then(|| st.window_latency_sum / st.window_latency_n as f64);
            st.window_count = 0;
            st.window_latency_sum = 0.0;
            st.window_latency_n = 0;
            if r.offline {
                continue;
            }
            if let Some(a) = avg {
                let e = ratios.entry(r.worker_id).or_insert(0.0);
                *e = e.max(a / v.batch1_latency_ms());
            }
            let sample = MonitorSample {
                window_qps: qps,
                window_avg_latency_ms: avg,
                batch: 1,
            };
            let classified = classify(r.state, &sample, v, th.interference_factor).expect("loaded");
            let observed = avg.map(|a| ewma(r.observed_latency_ms, a, th.ewma_alpha));
            if let Some(to) = monitor_decision(r.state, r.since, self.now, classified, window) {
                self.store
                    .update_instance(id, LifecycleEvent::Monitor(to), self.now)
                    .expect("monitor edges are legal");
            }
            self.store.set_observation(id, qps, observed).expect("live");
        }
        self.refresh_utilization();
        self.refresh_gpu_interference();
        self.throttle_offline(&ratios);
        if self.cfg.policy == Policy::Modelless {
            self.mitigate_interference();
        }
    }

    /// Busy fraction of each worker's hardware, from online instances only.
    fn refresh_utilization(&mut self) {
        let workers: Vec<WorkerId> = self.store.workers().map(|w| w.id).collect();
        for wid in workers {
            let w = self.store.worker(wid).expect("listed");
            let mut busy = PerHardware::<f64>::default();
            for r in self.store.instances_on(wid).filter(|r| r.state.is_loaded() && !r.offline) {
                let v = self.store.variant(r.variant_id.as_str()).expect("registered");
                let kind = v.hardware.dominant_resource();
                busy[v.hardware] += v.resources.get(kind) * (r.current_qps / v.saturation_qps).min(1.0);
            }
            let util = PerHardware::from_fn(|h| {
                let total = w.totals.get(h.dominant_resource());
                if total > 0.0 {
                    busy[h] / total
                } else {
                    0.0
                }
            });
            self.store.set_worker_util(wid, util).expect("listed");
        }
    }

    fn refresh_gpu_interference(&mut self) {
        for st in self.insts.values_mut() {
            st.gpu_multiplier = 1.0;
        }
        let gi = &self.cfg.gpu_interference;
        if !gi.enabled {
            return;
        }
        let workers: Vec<WorkerId> = self.store.workers().map(|w| w.id).collect();
        for wid in workers {
            let gpu: Vec<(InstanceId, f64, f64, f64)> = self
                .store
                .instances_on(wid)
                .filter(|r| r.state.is_loaded() && !r.offline)
                .filter_map(|r| {
                    let v = self.store.variant(r.variant_id.as_str()).expect("registered");
                    (v.hardware == Hardware::Gpu).then_some((r.id, v.resources.gpu_mem_gb, r.current_qps, v.saturation_qps))
                })
                .collect();
            if gpu.len() < 2 {
                continue;
            }
            let qps: f64 = gpu.iter().map(|g| g.2).sum();
            let sat: f64 = gpu.iter().map(|g| g.3).sum();
            if qps <= gi.load_fraction * sat {
                continue;
            }
            let largest = gpu.iter().map(|g| g.1).fold(0.0, f64::max);
            for (id, mem, _, _) in gpu {
                if mem < largest {
                    self.insts.get_mut(&id).expect("tracked").gpu_multiplier = gi.multiplier;
                }
            }
        }
    }

    fn throttle_offline(&mut self, ratios: &BTreeMap<WorkerId, f64>) {
        let th = &self.cfg.thresholds;
        for j in 0..self.jobs.len() {
            let job = &self.jobs[j];
            let Some(inst) = job.instance else { continue };
            if job.done() {
                continue;
            }
            let Some(r) = self.store.instance(inst) else { continue };
            let hw = self.store.variant(r.variant_id.as_str()).expect("registered").hardware;
            let util = self.store.worker(job.worker).map_or(0.0, |w| w.util[hw]);
            let ratio = ratios.get(&job.worker).copied().unwrap_or(0.0);
            let paused = util > th.offline_util_threshold || ratio > th.offline_latency_factor;
            self.cur.online_util_max = self.cur.online_util_max.max(util);
            self.out.throttle_log.push(ThrottleEntry {
                time_s: to_secs(self.now),
                worker: job.worker.to_string(),
                job: j as u32,
                online_util: util,
                latency_ratio: ratio,
                paused,
                processed: job.processed,
            });
            self.jobs[j].paused = paused;
            if !paused {
                self.start_chunk(j);
            }
        }
    }

    fn start_chunk(&mut self, j: usize) {
        let job = &self.jobs[j];
        if job.paused || job.busy.is_some() || job.done() {
            return;
        }
        let Some(r) = job.instance.and_then(|id| self.store.instance(id)) else {
            return;
        };
        if !r.state.is_loaded() {
            return;
        }
        let v = self.store.variant(r.variant_id.as_str()).expect("registered");
        let n = job.spec.chunk_size.min(job.spec.total_inputs - job.processed);
        let done_at = self.now + from_secs(n as f64 / v.saturation_qps);
        self.jobs[j].busy = Some(n);
        self.cur.offline_chunks += 1;
        self.out.chunk_starts.push((to_secs(self.now), j as u32));
        self.push(done_at, Kind::OfflineChunk(j));
    }

    fn on_chunk_done(&mut self, j: usize) {
        let n = self.jobs[j].busy.take().expect("chunk in progress");
        self.jobs[j].processed += n;
        self.cur.offline_processed += n;
        if self.jobs[j].done() {
            if let Some(id) = self.jobs[j].instance.take() {
                let worker = self.jobs[j].worker;
                self.store.update_instance(id, LifecycleEvent::Unload, self.now).expect("offline instance unloads");
                self.insts.remove(&id);
                self.log("offline", worker, "unload", id, "job_done");
            }
        } else {
            self.start_chunk(j);
        }
    }

    fn mitigate_interference(&mut self) {
        let interfered: Vec<InstanceId> = self
            .store
            .instances_in(InstanceState::Interfered)
            .filter(|r| !r.offline && !self.mitigating.contains(&r.id) && !self.retiring.contains(&r.id))
            .map(|r| r.id)
            .collect();
        for id in interfered {
            match mitigate(id, &self.store) {
                Ok(plan) => {
                    let new = self.load(plan.variant_id.as_str(), plan.to);
                    self.mitigating.insert(id);
                    self.retiring.insert(id);
                    self.deferred.push(Deferred {
                        wait: BTreeSet::from([new]),
                        victims: vec![id],
                    });
                    let how = if plan.intra_worker { "intra_worker" } else { "migrate" };
                    self.log("mitigation", plan.to, how, &plan.variant_id, "interfered");
                }
                Err(MitigationError::Escalate { variant, .. }) => {
                    let worker = self.store.instance(id).expect("listed").worker_id;
                    self.log("mitigation", worker, "escalate", variant, "no_room");
                    self.mitigating.insert(id);
                }
                Err(_) => {}
            }
        }
    }

    // -- model autoscaling --------------------------------------------------

    fn on_model_autoscale(&mut self) {
        let th = self.cfg.thresholds.clone();
        let window = from_secs(th.load_window_s);
        let cutoff = self.now.saturating_sub(window);
        for st in self.insts.values_mut() {
            while st.dispatches.front().is_some_and(|&t| t < cutoff) {
                st.dispatches.pop_front();
            }
        }
        let mut groups: BTreeMap<(WorkerId, ArchId), Vec<InstanceId>> = BTreeMap::new();
        for r in self.store.instances().filter(|r| !r.offline && !self.retiring.contains(&r.id)) {
            groups.entry((r.worker_id, r.arch_id.clone())).or_default().push(r.id);
        }
        for ((wid, arch), ids) in groups {
            if ids.iter().any(|id| self.store.instance(*id).expect("listed").is_loading()) {
                continue;
            }
            let Some(ctx) = self.build_context(wid, &arch, &ids, th.load_window_s) else {
                continue;
            };
            let load: f64 = ctx.served_qps.iter().sum();
            let slo = self.arch_slo.get(&arch).copied().unwrap_or(f64::INFINITY);
            let params = th.scaling();
            let key = (wid, arch.clone());
            let up = match self.cfg.scaler {
                ScalerKind::Greedy => greedy_scale_up(&ctx, load, slo, &params).map_err(|e| e.to_string()),
                ScalerKind::Ilp => {
                    if ctx.running_capacity() >= load * params.slack_threshold {
                        Ok(None)
                    } else {
                        let sub = ilp_subset(&ctx, slo, IlpOptions::default().max_variants);
                        let opts = IlpOptions {
                            allow_unload: false,
                            ..IlpOptions::default()
                        };
                        solve_plan(&sub, load, slo, params.lambda, params.slack(load), opts)
                            .map(|p| Some(p).filter(|p| !p.is_empty()))
                            .map_err(|e| e.to_string())
                    }
                }
            };
            match up {
                Ok(Some(plan)) => {
                    if let Some(t) = self.trackers.get_mut(&key) {
                        t.cancel();
                    }
                    self.execute(wid, &arch, plan, "scale_up");
                    continue;
                }
                Ok(None) => {}
                Err(reason) => {
                    self.log("model", wid, "escalate", &arch, &reason);
                    continue;
                }
            }
            let candidate = match self.cfg.scaler {
                ScalerKind::Greedy => greedy_scale_down(&ctx, load, slo, &params),
                ScalerKind::Ilp => {
                    let sub = ilp_subset(&ctx, slo, IlpOptions::default().max_variants);
                    solve_plan(&sub, load, slo, params.lambda, params.slack(load), IlpOptions::default())
                        .ok()
                        .filter(|p| p.total_cost < 0.0)
                }
            };
            let ticks = candidate
                .as_ref()
                .map_or(1, |p| wait_ticks(retire_delay_s(&ctx, p), th.model_autoscale_period_s));
            let outcome = self.trackers.entry(key).or_default().observe(candidate, ticks, load, self.now);
            if let TrackerOutcome::Execute(plan) = outcome {
                self.execute(wid, &arch, plan, "scale_down");
            }
        }
    }

    fn build_context(&self, wid: WorkerId, arch: &ArchId, ids: &[InstanceId], window_s: f64) -> Option<ScaleContext> {
        let w = self.store.worker(wid)?;
        let pinned: BTreeSet<&str> = self.cfg.pinned.iter().map(|p| p.variant.as_str()).collect();
        let variants: Vec<VariantProfile> = self
            .store
            .variants_of_arch(arch.as_str())
            .filter(|v| w.totals.has(v.hardware))
            .filter(|v| self.cfg.policy != Policy::HorizontalOnly || pinned.contains(v.variant_id.as_str()))
            .cloned()
            .collect();
        let mut ctx = ScaleContext::new(variants, w.totals);
        for id in ids {
            let r = self.store.instance(*id).expect("listed");
            let i = ctx.index_of(r.variant_id.as_str())?;
            ctx.running[i] += 1;
            ctx.served_qps[i] += self.insts[id].dispatches.len() as f64 / window_s;
        }
        let others = w.used.saturating_sub(&ctx.used());
        ctx.capacity = w.totals.saturating_sub(&others);
        Some(ctx)
    }

    fn execute(&mut self, wid: WorkerId, arch: &ArchId, plan: ScalingPlan, trigger: &str) {
        self.out
            .plan_log
            .push(PlanLogEntry::new(to_secs(self.now), wid.to_string(), arch.to_string(), &plan, trigger));
        let mut loads = 0;
        let mut new_ids = BTreeSet::new();
        for (vid, &d) in plan.actions.iter().filter(|(_, d)| **d > 0) {
            let v = self.store.variant(vid.as_str()).expect("registered").clone();
            for _ in 0..d {
                loads += 1;
                let local = !plan.remote && self.store.worker(wid).is_some_and(|w| w.can_host(&v.resources));
                let target = if local { Some(wid) } else { self.bin_pack(&v, None) };
                match target {
                    Some(t) => {
                        new_ids.insert(self.load(vid.as_str(), t));
                        self.log("model", t, "load", vid, trigger);
                    }
                    None => {
                        self.unplaceable[v.hardware] = true;
                        self.log("model", wid, "unplaceable", vid, trigger);
                    }
                }
            }
        }
        if loads > 0 && new_ids.is_empty() {
            return;
        }
        let mut victims = Vec::new();
        for (vid, &d) in plan.actions.iter().filter(|(_, d)| **d < 0) {
            let mut pool: Vec<(SimTime, InstanceId)> = self
                .store
                .instances_of_variant(vid.as_str())
                .filter(|r| r.worker_id == wid && r.state.is_loaded() && !r.offline && !self.retiring.contains(&r.id))
                .map(|r| (r.backlog_until, r.id))
                .collect();
            pool.sort();
            victims.extend(pool.into_iter().take((-d) as usize).map(|(_, id)| id));
        }
        if new_ids.is_empty() {
            for v in victims {
                self.unload(v, trigger);
            }
        } else if !victims.is_empty() {
            self.retiring.extend(victims.iter().copied());
            self.deferred.push(Deferred { wait: new_ids, victims });
        }
    }

    // -- VM autoscaling -----------------------------------------------------

    fn on_vm_autoscale(&mut self) {
        let mut view = ClusterView {
            workers: Vec::new(),
            pending: self.pending_workers.values().copied().collect(),
            unplaceable: std::mem::take(&mut self.unplaceable),
        };
        let ids: Vec<WorkerId> = self.store.workers().map(|w| w.id).collect();
        for wid in ids {
            let w = self.store.worker(wid).expect("listed");
            let mut overloaded = PerHardware::<u32>::default();
            let mut interfered = PerHardware::<bool>::default();
            let mut count = 0;
            for r in self.store.instances_on(wid) {
                count += 1;
                let hw = self.store.variant(r.variant_id.as_str()).expect("registered").hardware;
                match r.state {
                    InstanceState::Overloaded => overloaded[hw] += 1,
                    InstanceState::Interfered => interfered[hw] = true,
                    _ => {}
                }
            }
            let idle = if count == 0 {
                Some(*self.idle_since.entry(wid).or_insert(self.now))
            } else {
                self.idle_since.remove(&wid);
                None
            };
            view.workers.push(WorkerView {
                id: wid,
                kind: w.kind,
                totals: w.totals,
                free: w.free(),
                util: w.util,
                overloaded,
                interfered,
                instances: count,
                idle_since: idle,
                added_at: self.added_at.get(&wid).copied().unwrap_or(0),
            });
        }
        for action in vm_scale_decision(&view, self.now, &self.cfg.vm) {
            match action {
                VmAction::AddWorker { hardware, rule } => {
                    let id = WorkerId(self.next_worker);
                    self.next_worker += 1;
                    let ready = self.now + from_secs(self.cfg.vm.startup_s);
                    self.pending_workers.insert(id, (hardware, ready));
                    self.push(ready, Kind::WorkerReady(id));
                    self.log("vm", id, "add_worker", hardware, &rule.to_string());
                }
                VmAction::RemoveWorker { worker } => {
                    if self.store.remove_worker(worker).is_ok() {
                        self.idle_since.remove(&worker);
                        self.log("vm", worker, "remove_worker", worker, "idle_removal");
                    }
                }
            }
        }
    }

    fn on_worker_ready(&mut self, id: WorkerId) {
        let (hw, _) = self.pending_workers.remove(&id).expect("pending worker");
        self.store
            .add_worker(id, hw, self.cfg.worker_shapes[hw], self.now)
            .expect("fresh worker id");
        self.added_at.insert(id, self.now);
        self.log("vm", id, "worker_ready", hw, "startup_complete");
    }

    // -- metrics ------------------------------------------------------------

    fn on_metrics(&mut self) {
        let mut row = std::mem::take(&mut self.cur);
        row.time_s = to_secs(self.now);
        let judged = row.served + row.rejected;
        row.violation_ratio = if judged == 0 { 0.0 } else { row.violations as f64 / judged as f64 };
        row.cost_cumulative = self.cost;
        let mut sums = PerHardware::<(f64, u32)>::default();
        for w in self.store.workers() {
            for h in Hardware::ALL {
                if w.totals.has(h) {
                    sums[h].0 += w.util[h];
                    sums[h].1 += 1;
                }
            }
        }
        let mean = |h: Hardware| if sums[h].1 == 0 { 0.0 } else { sums[h].0 / sums[h].1 as f64 };
        row.util_cpu = mean(Hardware::Cpu);
        row.util_gpu = mean(Hardware::Gpu);
        row.util_accel = mean(Hardware::Accel);
        row.active_workers = self.store.workers().count() as u64;
        row.in_flight = self.in_flight;
        self.totals.arrived_total += row.arrived;
        self.totals.served_total += row.served;
        self.totals.rejected_total += row.rejected;
        self.totals.violations += row.violations;
        self.totals.served_cpu += row.served_cpu;
        self.totals.served_gpu += row.served_gpu;
        self.totals.served_accel += row.served_accel;
        self.totals.offline_processed += row.offline_processed;
        row.arrived_total = self.totals.arrived_total;
        row.served_total = self.totals.served_total;
        row.rejected_total = self.totals.rejected_total;
        assert_eq!(
            row.arrived_total,
            row.served_total + row.in_flight + row.rejected_total,
            "query conservation"
        );
        self.out.metrics.push(row);
        if self.now < self.horizon {
            let t = (self.now + from_secs(self.cfg.thresholds.metrics_interval_s)).min(self.horizon);
            self.push(t, Kind::Metrics);
        }
    }

    fn finish(mut self) -> SimOutput {
        let m = &self.out.metrics;
        let n = m.len().max(1) as f64;
        let judged = self.totals.served_total + self.totals.rejected_total;
        self.out.summary = Summary {
            policy: self.cfg.policy.as_str().into(),
            seed: self.cfg.seed,
            horizon_s: self.cfg.horizon_s,
            arrived: self.totals.arrived_total,
            served: self.totals.served_total,
            rejected: self.totals.rejected_total,
            in_flight: self.in_flight,
            violations: self.totals.violations,
            violation_ratio: if judged == 0 {
                0.0
            } else {
                self.totals.violations as f64 / judged as f64
            },
            mean_interval_violation_ratio: m.iter().map(|r| r.violation_ratio).sum::<f64>() / n,
            max_interval_violation_ratio: m.iter().map(|r| r.violation_ratio).fold(0.0, f64::max),
            total_cost: self.cost,
            mean_util_cpu: m.iter().map(|r| r.util_cpu).sum::<f64>() / n,
            mean_util_gpu: m.iter().map(|r| r.util_gpu).sum::<f64>() / n,
            mean_util_accel: m.iter().map(|r| r.util_accel).sum::<f64>() / n,
            served_cpu: self.totals.served_cpu,
            served_gpu: self.totals.served_gpu,
            served_accel: self.totals.served_accel,
            offline_processed: self.totals.offline_processed,
            offline_total: self.cfg.offline.iter().map(|o| o.total_inputs).sum(),
            plans: self.out.plan_log.len() as u64,
            vm_actions: self.out.scaling_log.iter().filter(|e| e.level == "vm").count() as u64,
            baseline_cost_ratio: None,
        };
        self.out
    }
}

impl InstState {
    fn new() -> Self {
        Self {
            gpu_multiplier: 1.0,
            ..Self::default()
        }
    }
}

/// At most `cap` variants for the exact solver: running ones first, then
/// SLO-feasible ones by cost per unit of throughput.
fn ilp_subset(ctx: &ScaleContext, slo_ms: f64, cap: usize) -> ScaleContext {
    let mut order: Vec<usize> = (0..ctx.len()).filter(|&i| ctx.running[i] > 0).collect();
    let mut rest: Vec<usize> = (0..ctx.len())
        .filter(|&i| ctx.running[i] == 0 && ctx.variants[i].batch1_latency_ms() <= slo_ms)
        .collect();
    rest.sort_by(|&a, &b| {
        let key = |i: usize| OrderedFloat(ctx.variants[i].cost_rate / ctx.variants[i].saturation_qps);
        key(a).cmp(&key(b)).then_with(|| ctx.variants[a].variant_id.cmp(&ctx.variants[b].variant_id))
    });
    order.extend(rest);
    order.truncate(cap);
    let mut sub = ScaleContext::new(order.iter().map(|&i| ctx.variants[i].clone()).collect(), ctx.capacity);
    for (k, &i) in order.iter().enumerate() {
        sub.running[k] = ctx.running[i];
        sub.served_qps[k] = ctx.served_qps[i];
    }
    sub
}
