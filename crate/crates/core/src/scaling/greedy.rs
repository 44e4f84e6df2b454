//! Online greedy autoscaling for one architecture on one worker.
//!
//! Scale-up fires when headroom (capacity over load) drops below the slack
//! threshold. It prices two kinds of plan against the shortfall
//! `L * threshold - capacity`:
//!
//! * replicate: more copies of the pivot (the running variant serving the
//!   most load);
//! * upgrade: the fewest instances of a faster same-architecture variant with
//!   higher saturation throughput that still meets the SLO.
//!
//! The cheapest plan that fits the worker's free resources wins; if none
//! fits, the cheapest plan overall is tagged for remote placement.
//!
//! Scale-down looks for the most negative objective among removing one
//! instance and swapping the pivot for a cheaper variant, and only executes
//! after the condition has held for the loading latency of the variant being
//! retired ([`ScaleDownTracker`]).

use thiserror::Error;

use super::{ScaleContext, ScalingParams, ScalingPlan};
use crate::resources::Resources;
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GreedyError {
    #[error("no variant meets the {slo_ms} ms SLO; worker-level scaling needed")]
    Escalate { slo_ms: f64 },
}

fn min_count(short: f64, qps: f64) -> i64 {
    ((short / qps) - 1e-9).ceil().max(1.0) as i64
}

fn demand(ctx: &ScaleContext, deltas: &[i64]) -> Resources {
    ctx.variants
        .iter()
        .zip(deltas)
        .filter(|(_, &d)| d > 0)
        .fold(Resources::ZERO, |acc, (v, &d)| acc + v.resources * d as f64)
}

/// Scale-up plan, `Ok(None)` when headroom is already sufficient.
pub fn greedy_scale_up(
    ctx: &ScaleContext,
    load: f64,
    slo_ms: f64,
    params: &ScalingParams,
) -> Result<Option<ScalingPlan>, GreedyError> {
    let existing = ctx.running_capacity();
    let target = load * params.slack_threshold;
    if load <= 0.0 || existing >= target {
        return Ok(None);
    }
    let short = target - existing;
    let pivot = ctx.pivot();
    let pivot_qps = pivot.map_or(0.0, |p| ctx.variants[p].saturation_qps);

    let mut options: Vec<Vec<i64>> = Vec::new();
    if let Some(p) = pivot {
        let v = &ctx.variants[p];
        if v.batch1_latency_ms() <= slo_ms {
            let mut d = vec![0; ctx.len()];
            d[p] = min_count(short, v.saturation_qps);
            options.push(d);
        }
    }
    for (i, v) in ctx.variants.iter().enumerate() {
        if Some(i) == pivot || v.batch1_latency_ms() > slo_ms || v.saturation_qps <= pivot_qps {
            continue;
        }
        let mut d = vec![0; ctx.len()];
        d[i] = min_count(short, v.saturation_qps);
        options.push(d);
    }
    if options.is_empty() {
        return Err(GreedyError::Escalate { slo_ms });
    }

    let free = ctx.free();
    let cost = |d: &Vec<i64>| ctx.plan_cost(d, params.lambda);
    let cheapest = |fits: bool| {
        options
            .iter()
            .filter(|d| !fits || demand(ctx, d).fits_within(&free))
            .min_by(|a, b| cost(a).total_cmp(&cost(b)))
    };
    let (deltas, remote) = match cheapest(true) {
        Some(d) => (d, false),
        None => (cheapest(false).expect("options nonempty"), true),
    };
    let mut plan = ScalingPlan::from_deltas(ctx, deltas, params.lambda);
    plan.remote = remote;
    Ok(Some(plan))
}

/// Scale-down candidate with the most negative objective, if any.
///
/// Removing the last running instance is only considered when the load is
/// zero.
pub fn greedy_scale_down(ctx: &ScaleContext, load: f64, slo_ms: f64, params: &ScalingParams) -> Option<ScalingPlan> {
    let existing = ctx.running_capacity();
    let target = load * params.slack_threshold;
    let total: u32 = ctx.running.iter().sum();
    let mut options: Vec<Vec<i64>> = Vec::new();

    for (i, v) in ctx.variants.iter().enumerate().filter(|(i, _)| ctx.running[*i] > 0) {
        let last = total == 1;
        if existing - v.saturation_qps >= target && (!last || load <= 0.0) {
            let mut d = vec![0; ctx.len()];
            d[i] = -1;
            options.push(d);
        }
    }

    if let Some(p) = ctx.pivot() {
        let pv = &ctx.variants[p];
        let rest = existing - pv.saturation_qps * ctx.running[p] as f64;
        let free = ctx.free();
        for (u, v) in ctx.variants.iter().enumerate() {
            if u == p || v.cost_rate >= pv.cost_rate || v.batch1_latency_ms() > slo_ms {
                continue;
            }
            let mut d = vec![0; ctx.len()];
            d[p] = -(ctx.running[p] as i64);
            d[u] = if rest >= target { 1 } else { min_count(target - rest, v.saturation_qps) };
            // New instances load before the old ones go away.
            if demand(ctx, &d).fits_within(&free) {
                options.push(d);
            }
        }
    }

    options
        .into_iter()
        .map(|d| (ctx.plan_cost(&d, params.lambda), d))
        .filter(|(c, _)| *c < 0.0)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, d)| ScalingPlan::from_deltas(ctx, &d, params.lambda))
}

/// Loading latency (seconds) of the slowest-loading variant a plan retires.
pub fn retire_delay_s(ctx: &ScaleContext, plan: &ScalingPlan) -> f64 {
    plan.actions
        .iter()
        .filter(|(_, &d)| d < 0)
        .filter_map(|(id, _)| ctx.index_of(id.as_str()))
        .map(|i| ctx.variants[i].load_latency_s())
        .fold(0.0, f64::max)
}

/// Number of autoscaler periods a retiring plan must wait.
pub fn wait_ticks(delay_s: f64, period_s: f64) -> u32 {
    ((delay_s / period_s) - 1e-9).ceil().max(1.0) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingScaleDown {
    pub plan: ScalingPlan,
    pub started: SimTime,
    pub load_at_start: f64,
    pub ticks_required: u32,
    pub ticks_seen: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrackerOutcome {
    Idle,
    Started,
    Waiting,
    Canceled,
    Execute(ScalingPlan),
}

/// Delays scale-down plans until the condition has held long enough.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScaleDownTracker {
    pub pending: Option<PendingScaleDown>,
}

impl ScaleDownTracker {
    /// Feed one autoscaler tick. A pending plan is canceled when the load
    /// rises above its starting level or the candidate plan changes.
    pub fn observe(&mut self, candidate: Option<ScalingPlan>, ticks_required: u32, load: f64, now: SimTime) -> TrackerOutcome {
        if let Some(p) = &mut self.pending {
            let same = candidate.as_ref().is_some_and(|c| c.actions == p.plan.actions);
            if same && load <= p.load_at_start {
                p.ticks_seen += 1;
                if p.ticks_seen >= p.ticks_required {
                    let plan = self.pending.take().expect("pending").plan;
                    return TrackerOutcome::Execute(plan);
                }
                return TrackerOutcome::Waiting;
            }
            self.pending = None;
            return TrackerOutcome::Canceled;
        }
        match candidate {
            Some(plan) => {
                self.pending = Some(PendingScaleDown {
                    plan,
                    started: now,
                    load_at_start: load,
                    ticks_required: ticks_required.max(1),
                    ticks_seen: 0,
                });
                TrackerOutcome::Started
            }
            None => TrackerOutcome::Idle,
        }
    }

    pub fn cancel(&mut self) -> bool {
        self.pending.take().is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::ActionKind;
    use super::*;

    fn p(thr: f64) -> ScalingParams {
        ScalingParams {
            lambda: 0.0,
            slack_threshold: thr,
        }
    }

    fn with_running(running: [u32; 3], served: [f64; 3]) -> ScaleContext {
        let mut ctx = abc_variants();
        ctx.running = running.to_vec();
        ctx.served_qps = served.to_vec();
        ctx
    }

    #[test]
    fn replicate_beats_upgrade_at_low_load() {
        for thr in [1.0, 1.05] {
            let ctx = with_running([1, 0, 0], [5.0, 0.0, 0.0]);
            let plan = greedy_scale_up(&ctx, 12.0, 300.0, &p(thr)).unwrap().unwrap();
            assert_eq!(plan.actions_string(), "A:+2");
            assert_eq!(plan.labels["A"], ActionKind::Replicate);
            assert_eq!(plan.total_cost, 2.0);
        }
    }

    #[test]
    fn upgrade_beats_many_replicas() {
        for (thr, replicas) in [(1.0, 16), (1.05, 17)] {
            let ctx = with_running([2, 0, 0], [10.0, 0.0, 0.0]);
            let plan = greedy_scale_up(&ctx, 90.0, 300.0, &p(thr)).unwrap().unwrap();
            assert_eq!(plan.actions_string(), "B:+1");
            assert_eq!(plan.labels["B"], ActionKind::Upgrade);
            assert!(plan.total_cost < replicas as f64);
        }
    }

    #[test]
    fn sufficient_headroom_is_a_no_op() {
        let ctx = with_running([2, 0, 0], [4.0, 0.0, 0.0]);
        assert_eq!(greedy_scale_up(&ctx, 4.0, 300.0, &p(1.05)), Ok(None));
    }

    #[test]
    fn escalates_without_slo_candidates() {
        let ctx = with_running([1, 0, 0], [5.0, 0.0, 0.0]);
        assert!(greedy_scale_up(&ctx, 50.0, 10.0, &p(1.05)).is_err());
    }

    #[test]
    fn remote_tag_when_nothing_fits() {
        let mut ctx = with_running([1, 0, 0], [5.0, 0.0, 0.0]);
        ctx.capacity.cpu_cores = 1.0;
        let plan = greedy_scale_up(&ctx, 12.0, 300.0, &p(1.0)).unwrap().unwrap();
        assert!(plan.remote);
    }

    #[test]
    fn scale_down_examples() {
        let ctx = with_running([2, 0, 0], [4.0, 0.0, 0.0]);
        let plan = greedy_scale_down(&ctx, 4.0, 300.0, &p(1.05)).unwrap();
        assert_eq!(plan.actions_string(), "A:-1");

        let ctx = with_running([0, 0, 1], [0.0, 0.0, 3.0]);
        let plan = greedy_scale_down(&ctx, 3.0, 300.0, &p(1.05)).unwrap();
        assert_eq!(plan.actions_string(), "A:+1;C:-1");
        assert_eq!(plan.labels["A"], ActionKind::Downgrade);

        let ctx = with_running([1, 0, 0], [4.0, 0.0, 0.0]);
        assert_eq!(greedy_scale_down(&ctx, 4.0, 300.0, &p(1.05)), None);
    }

    #[test]
    fn tracker_waits_then_executes_or_cancels() {
        let ctx = with_running([2, 0, 0], [4.0, 0.0, 0.0]);
        let plan = greedy_scale_down(&ctx, 4.0, 300.0, &p(1.05)).unwrap();
        let mut t = ScaleDownTracker::default();
        assert_eq!(t.observe(Some(plan.clone()), 2, 4.0, 0), TrackerOutcome::Started);
        assert_eq!(t.observe(Some(plan.clone()), 2, 4.0, 1), TrackerOutcome::Waiting);
        assert_eq!(t.observe(Some(plan.clone()), 2, 3.0, 2), TrackerOutcome::Execute(plan.clone()));

        assert_eq!(t.observe(Some(plan.clone()), 2, 4.0, 3), TrackerOutcome::Started);
        assert_eq!(t.observe(Some(plan.clone()), 2, 4.5, 4), TrackerOutcome::Canceled);
        assert!(t.pending.is_none());
    }

    #[test]
    fn wait_covers_loading_latency() {
        assert_eq!(wait_ticks(3.0, 1.0), 3);
        assert_eq!(wait_ticks(2.5, 1.0), 3);
        assert_eq!(wait_ticks(0.0, 1.0), 1);
    }
}
