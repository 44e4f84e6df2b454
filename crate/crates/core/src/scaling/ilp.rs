//! Exact scaling-plan search by depth-first branch and bound.
//!
//! Each variant's action ranges over `[lo, hi]` where `lo` is `-N` (or 0 when
//! unloading is disabled) and `hi` is the smaller of the resource bound
//! `floor(R_total / R) - N` and the demand bound `ceil((L + slack) / Q) - N`.
//! The demand bound loses nothing: past it the variant alone covers the load,
//! so a further instance only adds cost. A node is pruned when
//!
//! * the assigned prefix already exceeds some resource total even if every
//!   remaining variant sits at its lower bound, or
//! * its cost plus a lower bound on the remaining cost is no better than the
//!   incumbent.
//!
//! The lower bound is the fractional cover relaxation: capacity is bought
//! from each remaining variant in two linear segments (re-using the first
//! `N` instances at `C / Q` per query/second, then new instances at
//! `C * (1 + lambda * T_load) / Q`), cheapest segment first. Both segments
//! are linear in the instance count, so the greedy fill is the exact LP
//! optimum and never overestimates.

use ordered_float::OrderedFloat;
use thiserror::Error;

use super::{ConstraintClass, ScaleContext, ScalingPlan};
use crate::resources::{ResourceKind, Resources};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IlpOptions {
    /// Largest candidate set the exact search accepts.
    pub max_variants: usize,
    /// Allow negative actions on running variants.
    pub allow_unload: bool,
}

impl Default for IlpOptions {
    fn default() -> Self {
        Self {
            max_variants: 8,
            allow_unload: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlpSolution {
    pub deltas: Vec<i64>,
    pub cost: f64,
    /// Search nodes expanded.
    pub nodes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum IlpError {
    #[error("{variants} variants exceed the exact-search cap of {cap}")]
    TooLarge { variants: usize, cap: usize },
    #[error("infeasible: {0} constraint cannot be met")]
    Infeasible(ConstraintClass),
}

/// Per-variant action range.
pub fn delta_bounds(ctx: &ScaleContext, need: f64, slo_ms: f64, allow_unload: bool) -> Vec<(i64, i64)> {
    ctx.variants
        .iter()
        .zip(&ctx.running)
        .map(|(v, &n)| {
            let n = n as i64;
            let lo = if allow_unload { -n } else { 0 };
            if v.batch1_latency_ms() > slo_ms {
                return (lo, 0);
            }
            let mut hi = i64::MAX;
            for kind in ResourceKind::ALL {
                let r = v.resources.get(kind);
                if r > 1e-12 {
                    hi = hi.min((ctx.capacity.get(kind) / r + 1e-9).floor() as i64 - n);
                }
            }
            let demand = ((need.max(0.0) / v.saturation_qps) - 1e-9).ceil().max(0.0) as i64 - n;
            (lo, hi.min(demand).max(0))
        })
        .collect()
}

struct Search<'a> {
    ctx: &'a ScaleContext,
    need: f64,
    lambda: f64,
    bounds: Vec<(i64, i64)>,
    /// Resources held by variants `k..` at their lower bound.
    floor_suffix: Vec<Resources>,
    current: Vec<i64>,
    best: Option<(f64, Vec<i64>)>,
    nodes: u64,
}

impl Search<'_> {
    fn lower_bound(&self, k: usize, covered: f64) -> Option<f64> {
        let ctx = self.ctx;
        let mut cost = 0.0;
        let mut cap = covered;
        let mut segments: Vec<(f64, f64)> = Vec::new();
        for i in k..ctx.len() {
            let v = &ctx.variants[i];
            let (lo, hi) = self.bounds[i];
            let n = ctx.running[i] as f64;
            cost += v.cost_rate * lo as f64;
            cap += v.saturation_qps * (n + lo as f64);
            if lo < 0 {
                segments.push((v.cost_rate / v.saturation_qps, v.saturation_qps * (-lo) as f64));
            }
            if hi > 0 {
                let per = v.cost_rate * (1.0 + self.lambda * v.load_latency_s());
                segments.push((per / v.saturation_qps, v.saturation_qps * hi as f64));
            }
        }
        let mut short = self.need - cap;
        if short <= 1e-9 {
            return Some(cost);
        }
        segments.sort_by_key(|s| OrderedFloat(s.0));
        for (price, amount) in segments {
            let take = amount.min(short);
            cost += price * take;
            short -= take;
            if short <= 1e-9 {
                return Some(cost);
            }
        }
        None
    }

    fn dfs(&mut self, k: usize, cost: f64, covered: f64, used: Resources) {
        self.nodes += 1;
        if !(used + self.floor_suffix[k]).fits_within(&self.ctx.capacity) {
            return;
        }
        let Some(lb) = self.lower_bound(k, covered) else {
            return;
        };
        if let Some((best, _)) = &self.best {
            if cost + lb >= *best - 1e-12 {
                return;
            }
        }
        if k == self.ctx.len() {
            // The bound above guarantees the load is covered.
            self.best = Some((cost, self.current.clone()));
            return;
        }
        let v = &self.ctx.variants[k];
        let n = self.ctx.running[k] as i64;
        let (lo, hi) = self.bounds[k];
        for d in lo..=hi {
            let x = (n + d) as f64;
            self.current[k] = d;
            self.dfs(
                k + 1,
                cost + super::action_cost(d, v, self.lambda),
                covered + v.saturation_qps * x,
                used + v.resources * x,
            );
        }
        self.current[k] = 0;
    }
}

/// Minimum-cost plan over `ctx` meeting `load + slack` within SLO `slo_ms`.
pub fn solve_ilp(
    ctx: &ScaleContext,
    load: f64,
    slo_ms: f64,
    lambda: f64,
    slack: f64,
    opts: IlpOptions,
) -> Result<IlpSolution, IlpError> {
    if ctx.len() > opts.max_variants {
        return Err(IlpError::TooLarge {
            variants: ctx.len(),
            cap: opts.max_variants,
        });
    }
    let need = load + slack;
    let bounds = delta_bounds(ctx, need, slo_ms, opts.allow_unload);
    let mut floor_suffix = vec![Resources::ZERO; ctx.len() + 1];
    for i in (0..ctx.len()).rev() {
        let floor = (ctx.running[i] as i64 + bounds[i].0) as f64;
        floor_suffix[i] = floor_suffix[i + 1] + ctx.variants[i].resources * floor;
    }
    let mut search = Search {
        ctx,
        need,
        lambda,
        bounds,
        floor_suffix,
        current: vec![0; ctx.len()],
        best: None,
        nodes: 0,
    };
    search.dfs(0, 0.0, 0.0, Resources::ZERO);
    match search.best {
        Some((cost, deltas)) => Ok(IlpSolution {
            deltas,
            cost,
            nodes: search.nodes,
        }),
        None => Err(IlpError::Infeasible(infeasibility_class(ctx, need, slo_ms))),
    }
}

/// The first constraint that cannot hold even when the later ones are dropped.
fn infeasibility_class(ctx: &ScaleContext, need: f64, slo_ms: f64) -> ConstraintClass {
    let running = ctx.running_capacity();
    if ctx.is_empty() && running + 1e-9 < need {
        return ConstraintClass::Load;
    }
    let can_grow = ctx.variants.iter().any(|v| v.batch1_latency_ms() <= slo_ms);
    if !can_grow && running + 1e-9 < need {
        return ConstraintClass::Slo;
    }
    ConstraintClass::Resources
}

/// [`solve_ilp`] wrapped as a labelled plan.
pub fn solve_plan(
    ctx: &ScaleContext,
    load: f64,
    slo_ms: f64,
    lambda: f64,
    slack: f64,
    opts: IlpOptions,
) -> Result<ScalingPlan, IlpError> {
    let sol = solve_ilp(ctx, load, slo_ms, lambda, slack, opts)?;
    Ok(ScalingPlan::from_deltas(ctx, &sol.deltas, lambda))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use proptest::prelude::*;

    fn opts() -> IlpOptions {
        IlpOptions::default()
    }

    #[test]
    fn golden_abc_rows() {
        let ctx = abc_variants();
        let row = |l: f64, s: f64| {
            let sol = solve_ilp(&ctx, l, s, 0.0, 0.0, opts()).unwrap();
            (sol.deltas, sol.cost)
        };
        assert_eq!(row(10.0, 300.0), (vec![2, 0, 0], 2.0));
        assert_eq!(row(10.0, 50.0), (vec![0, 1, 0], 3.0));
        assert_eq!(row(1000.0, 300.0), (vec![0, 2, 1], 22.0));
    }

    #[test]
    fn infeasibility_is_classified() {
        let ctx = abc_variants();
        assert_eq!(
            solve_ilp(&ctx, 10.0, 5.0, 0.0, 0.0, opts()),
            Err(IlpError::Infeasible(ConstraintClass::Slo))
        );
        let mut tight = abc_variants();
        tight.capacity.cpu_cores = 1.0;
        assert_eq!(
            solve_ilp(&tight, 1000.0, 300.0, 0.0, 0.0, opts()),
            Err(IlpError::Infeasible(ConstraintClass::Resources))
        );
        let empty = ScaleContext::new(vec![], Resources::ZERO);
        assert_eq!(
            solve_ilp(&empty, 1.0, 300.0, 0.0, 0.0, opts()),
            Err(IlpError::Infeasible(ConstraintClass::Load))
        );
    }

    #[test]
    fn unloads_surplus_when_allowed() {
        let mut ctx = abc_variants();
        ctx.running = vec![0, 0, 1];
        let sol = solve_ilp(&ctx, 10.0, 300.0, 0.0, 0.0, opts()).unwrap();
        assert_eq!(sol.deltas, vec![2, 0, -1]);
        assert_eq!(sol.cost, 2.0 - 16.0);
        let keep = solve_ilp(&ctx, 10.0, 300.0, 0.0, 0.0, IlpOptions { allow_unload: false, ..opts() }).unwrap();
        assert_eq!(keep.deltas, vec![0, 0, 0]);
    }

    #[test]
    fn cap_is_enforced() {
        let ctx = ScaleContext::new(
            (0..9).map(|i| variant(&format!("v{i}"), 10.0, 10.0, 1.0, 0.0)).collect(),
            Resources::ZERO,
        );
        assert!(matches!(
            solve_ilp(&ctx, 1.0, 100.0, 0.0, 0.0, opts()),
            Err(IlpError::TooLarge { variants: 9, cap: 8 })
        ));
    }

    /// Independent oracle: every delta vector in the box.
    fn enumerate(ctx: &ScaleContext, load: f64, slo: f64, lambda: f64, max_add: i64) -> Option<f64> {
        let n = ctx.len();
        let mut best: Option<f64> = None;
        let mut d: Vec<i64> = ctx.running.iter().map(|&r| -(r as i64)).collect();
        loop {
            if ctx.check(&d, load, 0.0, slo).is_ok() {
                let c = ctx.plan_cost(&d, lambda);
                best = Some(best.map_or(c, |b: f64| b.min(c)));
            }
            let mut i = 0;
            loop {
                if i == n {
                    return best;
                }
                if d[i] < max_add {
                    d[i] += 1;
                    break;
                }
                d[i] = -(ctx.running[i] as i64);
                i += 1;
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn matches_enumeration(
            specs in prop::collection::vec((5.0f64..300.0, 1.0f64..60.0, 0.5f64..10.0, 0.0f64..5.0, 0u32..3, 1u32..4), 1..4),
            load in 0.0f64..120.0,
            slo in 10.0f64..300.0,
            lambda in 0.0f64..0.5,
            cores in 2.0f64..12.0,
        ) {
            let vs = specs.iter().enumerate().map(|(i, s)| {
                let mut v = variant(&format!("v{i}"), s.0, s.1, s.2, s.3);
                v.resources.cpu_cores = s.5 as f64;
                v
            }).collect();
            let mut ctx = ScaleContext::new(vs, Resources { cpu_cores: cores, ..Resources::ZERO });
            ctx.running = specs.iter().map(|s| s.4).collect();
            // Resource cap keeps every instance count at or below 12.
            let oracle = enumerate(&ctx, load, slo, lambda, 12);
            match solve_ilp(&ctx, load, slo, lambda, 0.0, opts()) {
                Ok(sol) => {
                    prop_assert!(ctx.check(&sol.deltas, load, 0.0, slo).is_ok());
                    let best = oracle.expect("oracle finds a plan when the solver does");
                    prop_assert!((sol.cost - best).abs() < 1e-9, "solver {} oracle {}", sol.cost, best);
                }
                Err(IlpError::Infeasible(_)) => prop_assert!(oracle.is_none()),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
