//! Instance lifecycle: the four-state machine and monitor classification.
//!
//! ```text
//!              load_complete            monitor
//!   Inactive ----------------> Active <---------> Overloaded
//!      ^                         ^  \                 ^
//!      |        unload           |   \ monitor        | monitor
//!      +-------------------------+    v               v
//!      (from any loaded state)       Interfered <-----+
//! ```
//!
//! Overloaded and Interfered return to Active on a healthy monitor sample or
//! on `mitigated`. Moving between Overloaded and Interfered goes through
//! classification, where Overloaded wins.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::VariantProfile;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceState {
    Inactive,
    Active,
    Overloaded,
    Interfered,
}

impl InstanceState {
    pub const ALL: [InstanceState; 4] = [
        InstanceState::Inactive,
        InstanceState::Active,
        InstanceState::Overloaded,
        InstanceState::Interfered,
    ];

    pub fn is_loaded(self) -> bool {
        self != InstanceState::Inactive
    }

    pub fn is_degraded(self) -> bool {
        matches!(self, InstanceState::Overloaded | InstanceState::Interfered)
    }

    pub fn index(self) -> usize {
        match self {
            InstanceState::Inactive => 0,
            InstanceState::Active => 1,
            InstanceState::Overloaded => 2,
            InstanceState::Interfered => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceState::Inactive => "inactive",
            InstanceState::Active => "active",
            InstanceState::Overloaded => "overloaded",
            InstanceState::Interfered => "interfered",
        }
    }
}

impl fmt::Display for InstanceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LifecycleEvent {
    LoadComplete,
    Unload,
    Monitor(InstanceState),
    Mitigated,
}

impl fmt::Display for LifecycleEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LifecycleEvent::LoadComplete => f.write_str("load_complete"),
            LifecycleEvent::Unload => f.write_str("unload"),
            LifecycleEvent::Monitor(s) => write!(f, "monitor({s})"),
            LifecycleEvent::Mitigated => f.write_str("mitigated"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LifecycleError {
    #[error("illegal transition {from} --{event}-->")]
    IllegalTransition {
        from: InstanceState,
        event: LifecycleEvent,
    },
    #[error("cannot classify an inactive instance")]
    NotLoaded,
}

/// Every state change the machine can make, as (from, to) pairs.
pub const EDGES: [(InstanceState, InstanceState); 10] = {
    use InstanceState::*;
    [
        (Inactive, Active),
        (Active, Overloaded),
        (Active, Interfered),
        (Overloaded, Active),
        (Interfered, Active),
        (Overloaded, Interfered),
        (Interfered, Overloaded),
        (Active, Inactive),
        (Overloaded, Inactive),
        (Interfered, Inactive),
    ]
};

pub fn is_edge(from: InstanceState, to: InstanceState) -> bool {
    EDGES.contains(&(from, to))
}

/// Apply `event` to `from`. A monitor sample that confirms the current state
/// is a no-op and returns `from`.
pub fn next_state(from: InstanceState, event: LifecycleEvent) -> Result<InstanceState, LifecycleError> {
    use InstanceState::*;
    let illegal = Err(LifecycleError::IllegalTransition { from, event });
    match (from, event) {
        (Inactive, LifecycleEvent::LoadComplete) => Ok(Active),
        (Inactive, _) => illegal,
        (_, LifecycleEvent::Unload) => Ok(Inactive),
        (_, LifecycleEvent::LoadComplete) => illegal,
        (Overloaded | Interfered, LifecycleEvent::Mitigated) => Ok(Active),
        (Active, LifecycleEvent::Mitigated) => illegal,
        (_, LifecycleEvent::Monitor(Inactive)) => illegal,
        (_, LifecycleEvent::Monitor(to)) => Ok(to),
    }
}

/// What the monitoring daemon observed for one instance over one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorSample {
    pub window_qps: f64,
    /// Mean service latency over the window, or `None` if nothing completed.
    pub window_avg_latency_ms: Option<f64>,
    pub batch: u32,
}

/// Overloaded at or above saturation, otherwise Interfered when latency
/// exceeds `interference_factor` times the profiled latency, otherwise Active.
pub fn classify(
    current: InstanceState,
    sample: &MonitorSample,
    profile: &VariantProfile,
    interference_factor: f64,
) -> Result<InstanceState, LifecycleError> {
    if !current.is_loaded() {
        return Err(LifecycleError::NotLoaded);
    }
    if sample.window_qps >= profile.saturation_qps {
        return Ok(InstanceState::Overloaded);
    }
    let profiled = profile
        .latency_ms(sample.batch)
        .unwrap_or_else(|| profile.batch1_latency_ms());
    match sample.window_avg_latency_ms {
        Some(ms) if ms > interference_factor * profiled => Ok(InstanceState::Interfered),
        _ => Ok(InstanceState::Active),
    }
}

/// Hysteresis: a degraded instance returns to Active only once it has spent
/// at least `window` in its degraded state. Returns the state to move to, or
/// `None` when the instance should stay put.
pub fn monitor_decision(
    current: InstanceState,
    since: SimTime,
    now: SimTime,
    classified: InstanceState,
    window: SimTime,
) -> Option<InstanceState> {
    if classified == current {
        return None;
    }
    if current.is_degraded() && classified == InstanceState::Active && now.saturating_sub(since) < window {
        return None;
    }
    Some(classified)
}

/// Exponentially weighted moving average; the first sample seeds it.
pub fn ewma(prev: Option<f64>, sample: f64, alpha: f64) -> f64 {
    match prev {
        Some(p) => alpha * sample + (1.0 - alpha) * p,
        None => sample,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Optimizer;
    use crate::ids::{ArchId, VariantId};
    use crate::resources::{Hardware, Resources};
    use proptest::prelude::*;
    use InstanceState::*;

    fn profile() -> VariantProfile {
        VariantProfile {
            variant_id: VariantId::from("v"),
            arch_id: ArchId::from("a"),
            hardware: Hardware::Cpu,
            optimizer: Optimizer::None,
            max_batch: 1,
            accuracy: 0.7,
            inf_latency_ms: [(1, 100.0)].into_iter().collect(),
            load_latency_ms: 0.0,
            saturation_qps: 10.0,
            cost_rate: 1.0,
            resources: Resources::ZERO,
        }
    }

    fn sample(qps: f64, lat: f64) -> MonitorSample {
        MonitorSample {
            window_qps: qps,
            window_avg_latency_ms: Some(lat),
            batch: 1,
        }
    }

    #[test]
    fn classification_examples() {
        let p = profile();
        assert_eq!(classify(Active, &sample(10.0, 1000.0), &p, 1.2), Ok(Overloaded));
        assert_eq!(classify(Active, &sample(5.0, 100.0), &p, 1.2), Ok(Active));
        assert_eq!(classify(Active, &sample(5.0, 150.0), &p, 1.2), Ok(Interfered));
        assert_eq!(classify(Inactive, &sample(5.0, 150.0), &p, 1.2), Err(LifecycleError::NotLoaded));
    }

    #[test]
    fn transition_examples() {
        assert_eq!(next_state(Inactive, LifecycleEvent::LoadComplete), Ok(Active));
        assert_eq!(next_state(Active, LifecycleEvent::Unload), Ok(Inactive));
        assert_eq!(next_state(Overloaded, LifecycleEvent::Monitor(Active)), Ok(Active));
        assert!(next_state(Inactive, LifecycleEvent::Monitor(Overloaded)).is_err());
        assert!(next_state(Active, LifecycleEvent::LoadComplete).is_err());
        let err = next_state(Inactive, LifecycleEvent::Unload).unwrap_err();
        assert_eq!(err.to_string(), "illegal transition inactive --unload-->");
    }

    #[test]
    fn hysteresis_holds_degraded_state_for_a_window() {
        assert_eq!(monitor_decision(Overloaded, 0, 1, Active, 2), None);
        assert_eq!(monitor_decision(Overloaded, 0, 2, Active, 2), Some(Active));
        assert_eq!(monitor_decision(Active, 0, 0, Interfered, 2), Some(Interfered));
        assert_eq!(monitor_decision(Active, 0, 5, Active, 2), None);
    }

    #[test]
    fn ewma_seeds_then_smooths() {
        assert_eq!(ewma(None, 10.0, 0.3), 10.0);
        assert!((ewma(Some(10.0), 20.0, 0.3) - 13.0).abs() < 1e-12);
    }

    fn arb_event() -> impl Strategy<Value = LifecycleEvent> {
        prop_oneof![
            Just(LifecycleEvent::LoadComplete),
            Just(LifecycleEvent::Unload),
            Just(LifecycleEvent::Mitigated),
            prop::sample::select(InstanceState::ALL.to_vec()).prop_map(LifecycleEvent::Monitor),
        ]
    }

    proptest! {
        #[test]
        fn accepted_transitions_follow_edges(events in prop::collection::vec(arb_event(), 1..200)) {
            let mut s = Inactive;
            for e in events {
                if let Ok(next) = next_state(s, e) {
                    prop_assert!(next == s || is_edge(s, next), "{s} -> {next}");
                    s = next;
                }
            }
        }

        #[test]
        fn overloaded_dominates(frac in 1.0f64..5.0, lat in 0.0f64..10_000.0) {
            let p = profile();
            let got = classify(Active, &sample(frac * p.saturation_qps, lat), &p, 1.2).unwrap();
            prop_assert_eq!(got, Overloaded);
        }
    }
}
