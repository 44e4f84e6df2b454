//! Arrival traces: rate patterns, trace replay, and model popularity.
//!
//! Arrivals are a (possibly time-varying) Poisson process generated by
//! thinning: candidate points come from a homogeneous process at the peak
//! rate and each is kept with probability `rate(t) / peak`. All randomness
//! comes from a seeded ChaCha generator, so equal seeds give equal traces.

use std::io::{BufRead, Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::ids::{AppId, ArchId};
use crate::resources::Hardware;
use crate::selection::{QueryKind, QueryRequest};
use crate::time::{from_secs, SimTime};

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("degenerate trace: every bucket has the same count")]
    DegenerateTrace,
    #[error("trace needs at least 2 buckets, found {0}")]
    TooFewBuckets(usize),
    #[error("popular set is empty but popular share is {0}")]
    EmptyPopularSet(f64),
    #[error("popular share {0} not in (0, 1)")]
    InvalidShare(f64),
    #[error("model `{0}` in popular set is not among the models")]
    UnknownPopular(ArchId),
    #[error("no models to sample")]
    NoModels,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(String),
}

fn io_err(e: impl std::fmt::Display) -> WorkloadError {
    WorkloadError::Io(e.to_string())
}

/// Fields shared by every request a generator emits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTemplate {
    pub app_id: AppId,
    #[serde(default)]
    pub model: Option<ArchId>,
    #[serde(default)]
    pub slo_ms: Option<f64>,
    #[serde(default)]
    pub min_accuracy: Option<f64>,
    #[serde(default = "one")]
    pub batch: u32,
}

fn one() -> u32 {
    1
}

impl RequestTemplate {
    pub fn requirements(app: impl Into<AppId>, slo_ms: f64, min_accuracy: f64) -> Self {
        Self {
            app_id: app.into(),
            model: None,
            slo_ms: Some(slo_ms),
            min_accuracy: Some(min_accuracy),
            batch: 1,
        }
    }

    pub fn at(&self, t: SimTime) -> QueryRequest {
        QueryRequest {
            app_id: self.app_id.clone(),
            model: self.model.clone(),
            slo_ms: self.slo_ms,
            min_accuracy: self.min_accuracy,
            kind: QueryKind::Online,
            batch: self.batch,
            arrival: t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArrivalTrace {
    pub arrivals: Vec<QueryRequest>,
    pub seed: u64,
    pub description: String,
}

impl ArrivalTrace {
    pub fn len(&self) -> usize {
        self.arrivals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty()
    }

    pub fn last_time(&self) -> SimTime {
        self.arrivals.last().map_or(0, |q| q.arrival)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    FlatLow,
    SteadyHigh,
    Fluctuating,
}

/// Rate parameters for the three patterns; unused fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternParams {
    /// Flat pattern rate.
    pub rate: f64,
    /// Steady pattern ramp, start and end rates.
    pub ramp_from: f64,
    pub ramp_to: f64,
    /// Fluctuating pattern rates outside and inside spike windows.
    pub low: f64,
    pub high: f64,
    /// Spike windows in seconds, `[start, end)`.
    pub spikes: Vec<(f64, f64)>,
}

impl Default for PatternParams {
    fn default() -> Self {
        Self {
            rate: 4.0,
            ramp_from: 650.0,
            ramp_to: 700.0,
            low: 4.0,
            high: 80.0,
            spikes: vec![(60.0, 90.0), (150.0, 180.0)],
        }
    }
}

impl PatternParams {
    fn validate(&self, kind: PatternKind) -> Result<(), WorkloadError> {
        let rates: &[f64] = match kind {
            PatternKind::FlatLow => &[self.rate],
            PatternKind::SteadyHigh => &[self.ramp_from, self.ramp_to],
            PatternKind::Fluctuating => &[self.low, self.high],
        };
        match rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            Some(&r) => Err(WorkloadError::NonPositiveRate(r)),
            None => Ok(()),
        }
    }

    /// Target rate at time `t` seconds into a trace of length `duration_s`.
    pub fn rate_at(&self, kind: PatternKind, t: f64, duration_s: f64) -> f64 {
        match kind {
            PatternKind::FlatLow => self.rate,
            PatternKind::SteadyHigh => {
                let f = if duration_s > 0.0 { (t / duration_s).clamp(0.0, 1.0) } else { 0.0 };
                self.ramp_from + (self.ramp_to - self.ramp_from) * f
            }
            PatternKind::Fluctuating => {
                if self.spikes.iter().any(|&(a, b)| t >= a && t < b) {
                    self.high
                } else {
                    self.low
                }
            }
        }
    }

    fn peak(&self, kind: PatternKind) -> f64 {
        match kind {
            PatternKind::FlatLow => self.rate,
            PatternKind::SteadyHigh => self.ramp_from.max(self.ramp_to),
            PatternKind::Fluctuating => self.low.max(self.high),
        }
    }
}

/// Arrival times of a Poisson process with rate `rate(t)` bounded by `peak`.
pub fn poisson_times(rate: impl Fn(f64) -> f64, peak: f64, duration_s: f64, rng: &mut ChaCha8Rng) -> Vec<SimTime> {
    let mut out = Vec::new();
    if duration_s <= 0.0 || peak <= 0.0 {
        return out;
    }
    let exp = Exp::new(peak).expect("peak rate is positive");
    let mut t = 0.0;
    loop {
        t += exp.sample(rng);
        if t >= duration_s {
            return out;
        }
        if rng.random::<f64>() * peak < rate(t) {
            out.push(from_secs(t));
        }
    }
}

pub fn gen_pattern(
    kind: PatternKind,
    params: &PatternParams,
    duration_s: f64,
    template: &RequestTemplate,
    seed: u64,
) -> Result<ArrivalTrace, WorkloadError> {
    params.validate(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = poisson_times(|t| params.rate_at(kind, t, duration_s), params.peak(kind), duration_s, &mut rng);
    Ok(ArrivalTrace {
        arrivals: times.into_iter().map(|t| template.at(t)).collect(),
        seed,
        description: format!("{kind:?} pattern over {duration_s} s"),
    })
}

/// Per-bucket request counts with a fixed bucket width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketTrace {
    pub bucket_width_s: f64,
    pub counts: Vec<u64>,
}

impl BucketTrace {
    /// Parse `bucket_width_s=<w>` followed by one integer count per line.
    pub fn parse<R: Read>(source: R) -> Result<Self, WorkloadError> {
        let mut width = None;
        let mut counts = Vec::new();
        for (i, line) in std::io::BufReader::new(source).lines().enumerate() {
            let line = line.map_err(io_err)?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| WorkloadError::Parse { line: i + 1, reason };
            match width {
                None => {
                    let w = line
                        .strip_prefix("bucket_width_s=")
                        .ok_or_else(|| bad("expected header `bucket_width_s=<seconds>`".into()))?;
                    let w: f64 = w.trim().parse().map_err(|_| bad(format!("bad bucket width `{w}`")))?;
                    if !(w > 0.0) {
                        return Err(bad("bucket width must be positive".into()));
                    }
                    width = Some(w);
                }
                Some(_) => counts.push(line.parse().map_err(|_| bad(format!("bad count `{line}`")))?),
            }
        }
        Ok(Self {
            bucket_width_s: width.ok_or(WorkloadError::Parse {
                line: 1,
                reason: "missing header".into(),
            })?,
            counts,
        })
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), WorkloadError> {
        writeln!(out, "bucket_width_s={}", self.bucket_width_s).map_err(io_err)?;
        for c in &self.counts {
            writeln!(out, "{c}").map_err(io_err)?;
        }
        Ok(())
    }

    /// Bucket a trace's arrivals.
    pub fn from_trace(trace: &ArrivalTrace, bucket_width_s: f64, duration_s: f64) -> Self {
        let n = (duration_s / bucket_width_s).ceil().max(1.0) as usize;
        let mut counts = vec![0; n];
        for q in &trace.arrivals {
            let b = ((q.arrival as f64 / 1e6) / bucket_width_s) as usize;
            counts[b.min(n - 1)] += 1;
        }
        Self { bucket_width_s, counts }
    }
}

/// Affine map of bucket counts onto `[qps_min, qps_max]`.
pub fn map_rates(counts: &[u64], qps_min: f64, qps_max: f64) -> Result<Vec<f64>, WorkloadError> {
    if counts.len() < 2 {
        return Err(WorkloadError::TooFewBuckets(counts.len()));
    }
    if !(qps_min > 0.0) {
        return Err(WorkloadError::NonPositiveRate(qps_min));
    }
    if !(qps_max > 0.0) {
        return Err(WorkloadError::NonPositiveRate(qps_max));
    }
    let lo = *counts.iter().min().expect("nonempty") as f64;
    let hi = *counts.iter().max().expect("nonempty") as f64;
    if lo == hi {
        return Err(WorkloadError::DegenerateTrace);
    }
    Ok(counts
        .iter()
        .map(|&c| qps_min + (c as f64 - lo) / (hi - lo) * (qps_max - qps_min))
        .collect())
}

/// Replay a bucketed trace at rates rescaled to `[qps_min, qps_max]`. With
/// `duration_s` the buckets are stretched to cover it; otherwise the file's
/// bucket width is kept.
pub fn replay_trace(
    trace: &BucketTrace,
    qps_min: f64,
    qps_max: f64,
    duration_s: Option<f64>,
    template: &RequestTemplate,
    seed: u64,
) -> Result<ArrivalTrace, WorkloadError> {
    let rates = map_rates(&trace.counts, qps_min, qps_max)?;
    let n = rates.len();
    let duration = duration_s.unwrap_or(trace.bucket_width_s * n as f64);
    let width = duration / n as f64;
    let peak = rates.iter().copied().fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = |t: f64| rates[((t / width) as usize).min(n - 1)];
    let times = poisson_times(rate, peak, duration, &mut rng);
    Ok(ArrivalTrace {
        arrivals: times.into_iter().map(|t| template.at(t)).collect(),
        seed,
        description: format!("replay of {n} buckets onto [{qps_min}, {qps_max}] qps"),
    })
}

/// Draws a model per query: `popular_share` of draws go to the popular set,
/// the rest to the others, each by a Zipf law over its set in listed order.
#[derive(Debug, Clone)]
pub struct PopularitySampler {
    popular: Vec<ArchId>,
    rest: Vec<ArchId>,
    share: f64,
    popular_dist: Option<WeightedIndex<f64>>,
    rest_dist: Option<WeightedIndex<f64>>,
}

pub const ZIPF_EXPONENT: f64 = 1.0;

fn zipf_weights(n: usize) -> Option<WeightedIndex<f64>> {
    (n > 0).then(|| WeightedIndex::new((1..=n).map(|k| 1.0 / (k as f64).powf(ZIPF_EXPONENT))).expect("positive weights"))
}

pub fn assign_popularity(models: &[ArchId], popular: &[ArchId], popular_share: f64) -> Result<PopularitySampler, WorkloadError> {
    if models.is_empty() {
        return Err(WorkloadError::NoModels);
    }
    if !(popular_share > 0.0 && popular_share < 1.0) {
        return Err(WorkloadError::InvalidShare(popular_share));
    }
    if popular.is_empty() {
        return Err(WorkloadError::EmptyPopularSet(popular_share));
    }
    if let Some(p) = popular.iter().find(|p| !models.contains(p)) {
        return Err(WorkloadError::UnknownPopular(p.clone()));
    }
    let rest: Vec<ArchId> = models.iter().filter(|m| !popular.contains(m)).cloned().collect();
    Ok(PopularitySampler {
        popular_dist: zipf_weights(popular.len()),
        rest_dist: zipf_weights(rest.len()),
        popular: popular.to_vec(),
        rest,
        share: popular_share,
    })
}

impl PopularitySampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> &ArchId {
        let pick_popular = self.rest.is_empty() || rng.random::<f64>() < self.share;
        if pick_popular {
            &self.popular[self.popular_dist.as_ref().expect("popular nonempty").sample(rng)]
        } else {
            &self.rest[self.rest_dist.as_ref().expect("rest nonempty").sample(rng)]
        }
    }

    pub fn is_popular(&self, m: &ArchId) -> bool {
        self.popular.contains(m)
    }

    /// Turn every arrival of `trace` into a by-model query for a sampled model.
    pub fn apply(&self, trace: &mut ArrivalTrace, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_70_9a1a);
        for q in &mut trace.arrivals {
            q.model = Some(self.sample(&mut rng).clone());
        }
    }
}

/// SLO of 1.5x the batch-1 latency of the architecture's fastest CPU variant.
pub fn default_slo_ms(catalog: &Catalog, arch: &str) -> Option<f64> {
    catalog
        .variants_of(arch)
        .filter(|v| v.hardware == Hardware::Cpu)
        .map(|v| v.batch1_latency_ms())
        .min_by(f64::total_cmp)
        .map(|ms| 1.5 * ms)
}

const ARRIVAL_HEADER: [&str; 6] = ["timestamp_ms", "app_id", "mode", "slo_ms", "min_accuracy", "batch"];

fn fmt_ms(t: SimTime) -> String {
    format!("{}.{:03}", t / 1000, t % 1000)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Write the exact per-arrival format.
pub fn write_arrivals<W: Write>(trace: &ArrivalTrace, out: W) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ARRIVAL_HEADER).map_err(io_err)?;
    for q in &trace.arrivals {
        let mode = match &q.model {
            Some(m) => format!("model:{m}"),
            None => "requirements".to_string(),
        };
        w.write_record([
            fmt_ms(q.arrival),
            q.app_id.to_string(),
            mode,
            opt(q.slo_ms),
            opt(q.min_accuracy),
            q.batch.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_arrivals<R: Read>(source: R, seed: u64) -> Result<ArrivalTrace, WorkloadError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = r.headers().map_err(io_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ARRIVAL_HEADER {
        return Err(WorkloadError::Parse {
            line: 1,
            reason: format!("expected header `{}`", ARRIVAL_HEADER.join(",")),
        });
    }
    let mut arrivals = Vec::new();
    let mut last = 0;
    for rec in r.records() {
        let rec = rec.map_err(io_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |reason: String| WorkloadError::Parse { line, reason };
        let t = parse_ms(&rec[0]).ok_or_else(|| bad(format!("bad timestamp `{}`", &rec[0])))?;
        if t < last {
            return Err(bad("timestamps must be nondecreasing".into()));
        }
        last = t;
        let model = match &rec[2] {
            "requirements" => None,
            m => Some(ArchId::from(
                m.strip_prefix("model:").ok_or_else(|| bad(format!("bad mode `{m}`")))?,
            )),
        };
        let num = |s: &str| -> Result<Option<f64>, WorkloadError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("bad number `{s}`")))
            }
        };
        arrivals.push(QueryRequest {
            app_id: AppId::from(&rec[1]),
            model,
            slo_ms: num(&rec[3])?,
            min_accuracy: num(&rec[4])?,
            kind: QueryKind::Online,
            batch: rec[5].parse().map_err(|_| bad(format!("bad batch `{}`", &rec[5])))?,
            arrival: t,
        });
    }
    Ok(ArrivalTrace {
        arrivals,
        seed,
        description: "loaded arrivals".into(),
    })
}

fn parse_ms(s: &str) -> Option<SimTime> {
    let (whole, frac) = s.split_once('.').unwrap_or((s, ""));
    if frac.len() > 3 {
        return None;
    }
    let whole: u64 = whole.parse().ok()?;
    let frac: u64 = if frac.is_empty() { 0 } else { format!("{frac:0<3}").parse().ok()? };
    Some(whole * 1000 + frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tpl() -> RequestTemplate {
        RequestTemplate::requirements("app", 300.0, 0.7)
    }

    #[test]
    fn flat_low_count_within_four_sigma() {
        let p = PatternParams::default();
        let mean = 4.0 * 10.0;
        for seed in 0..20 {
            let t = gen_pattern(PatternKind::FlatLow, &p, 10.0, &tpl(), seed).unwrap();
            assert!((t.len() as f64 - mean).abs() <= 4.0 * mean.sqrt(), "seed {seed}: {}", t.len());
        }
    }

    #[test]
    fn zero_duration_and_determinism() {
        let p = PatternParams::default();
        assert!(gen_pattern(PatternKind::FlatLow, &p, 0.0, &tpl(), 1).unwrap().is_empty());
        let a = gen_pattern(PatternKind::Fluctuating, &p, 200.0, &tpl(), 9).unwrap();
        let b = gen_pattern(PatternKind::Fluctuating, &p, 200.0, &tpl(), 9).unwrap();
        assert_eq!(a, b);
        let bad = PatternParams { rate: 0.0, ..p };
        assert_eq!(
            gen_pattern(PatternKind::FlatLow, &bad, 1.0, &tpl(), 1),
            Err(WorkloadError::NonPositiveRate(0.0))
        );
    }

    #[test]
    fn fluctuating_spikes_carry_the_high_rate() {
        let p = PatternParams::default();
        let t = gen_pattern(PatternKind::Fluctuating, &p, 200.0, &tpl(), 3).unwrap();
        let in_window = |a: f64, b: f64| {
            t.arrivals
                .iter()
                .filter(|q| (q.arrival as f64 / 1e6) >= a && (q.arrival as f64 / 1e6) < b)
                .count() as f64
        };
        let spike = in_window(60.0, 90.0);
        let calm = in_window(0.0, 30.0);
        assert!((spike - 2400.0).abs() <= 4.0 * 2400f64.sqrt());
        assert!((calm - 120.0).abs() <= 4.0 * 120f64.sqrt());
    }

    #[test]
    fn affine_map_examples() {
        assert_eq!(map_rates(&[1, 2, 3], 10.0, 30.0).unwrap(), vec![10.0, 20.0, 30.0]);
        assert_eq!(map_rates(&[5, 5], 10.0, 30.0), Err(WorkloadError::DegenerateTrace));
        assert_eq!(map_rates(&[5], 10.0, 30.0), Err(WorkloadError::TooFewBuckets(1)));
        let counts = [7, 1, 9, 3, 3, 12];
        let r = map_rates(&counts, 10.0, 1000.0).unwrap();
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] < counts[j] {
                    assert!(r[i] < r[j]);
                }
            }
        }
    }

    #[test]
    fn replay_rate_fidelity() {
        let trace = BucketTrace {
            bucket_width_s: 10.0,
            counts: vec![1, 5, 3],
        };
        let out = replay_trace(&trace, 10.0, 50.0, None, &tpl(), 4).unwrap();
        let b = BucketTrace::from_trace(&out, 10.0, 30.0);
        for (got, rate) in b.counts.iter().zip([10.0, 50.0, 30.0]) {
            let mean = rate * 10.0;
            assert!((*got as f64 - mean).abs() <= 4.0 * f64::sqrt(mean));
        }
    }

    #[test]
    fn bucket_file_round_trip() {
        let t = BucketTrace {
            bucket_width_s: 2.5,
            counts: vec![3, 0, 17],
        };
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert_eq!(BucketTrace::parse(buf.as_slice()).unwrap(), t);
        assert!(BucketTrace::parse("3\n4\n".as_bytes()).is_err());
    }

    #[test]
    fn arrivals_round_trip_losslessly() {
        let mut t = gen_pattern(PatternKind::FlatLow, &PatternParams::default(), 30.0, &tpl(), 5).unwrap();
        t.arrivals[0].model = Some("resnet50".into());
        t.arrivals[0].slo_ms = None;
        let mut buf = Vec::new();
        write_arrivals(&t, &mut buf).unwrap();
        let back = read_arrivals(buf.as_slice(), 5).unwrap();
        assert_eq!(back.arrivals, t.arrivals);
    }

    #[test]
    fn popularity_share_and_determinism() {
        let models: Vec<ArchId> = (0..10).map(|i| ArchId::from(format!("m{i}"))).collect();
        let s = assign_popularity(&models, &models[..4], 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let hits = (0..n).filter(|_| s.is_popular(s.sample(&mut rng))).count();
        assert!((hits as f64 / n as f64 - 0.8).abs() <= 0.02);

        let single = assign_popularity(&models, &models[..1], 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = Vec::new();
        for _ in 0..100 {
            a.push(single.sample(&mut rng).clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b: Vec<_> = (0..100).map(|_| single.sample(&mut rng).clone()).collect();
        assert_eq!(a, b);

        assert_eq!(
            assign_popularity(&models, &[], 0.5).unwrap_err(),
            WorkloadError::EmptyPopularSet(0.5)
        );
    }

    #[test]
    fn single_popular_model_takes_all_popular_draws() {
        let models: Vec<ArchId> = ["a", "b", "c"].into_iter().map(ArchId::from).collect();
        let s = assign_popularity(&models, &models[..1], 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let popular: Vec<_> = (0..1000).map(|_| s.sample(&mut rng).clone()).filter(|m| s.is_popular(m)).collect();
        assert!(popular.iter().all(|m| m.as_str() == "a"));
    }
}
