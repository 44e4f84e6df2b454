//! Simulated time. Integer microseconds keep event ordering exact.

/// Simulated timestamp or duration in microseconds.
pub type SimTime = u64;

pub const MICROS_PER_SEC: u64 = 1_000_000;

pub fn from_secs(s: f64) -> SimTime {
    (s * MICROS_PER_SEC as f64).round().max(0.0) as SimTime
}

pub fn from_millis(ms: f64) -> SimTime {
    (ms * 1000.0).round().max(0.0) as SimTime
}

pub fn to_secs(t: SimTime) -> f64 {
    t as f64 / MICROS_PER_SEC as f64
}

pub fn to_millis(t: SimTime) -> f64 {
    t as f64 / 1000.0
}
