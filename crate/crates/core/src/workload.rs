//! Prompt types, arrival processes and trace ingestion.
//!
//! Every random stream is a ChaCha8 generator keyed by a master seed and a
//! stream id, so per-type streams stay independent and reproducible.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A prompt class: prefill length `l`, decode length `l'` and Poisson rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptType {
    pub id: usize,
    pub prefill_len: u32,
    pub decode_len: u32,
    pub rate: f64,
}

impl PromptType {
    pub fn new(id: usize, prefill_len: u32, decode_len: u32, rate: f64) -> Result<Self> {
        let t = Self {
            id,
            prefill_len,
            decode_len,
            rate,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prefill_len == 0 || self.decode_len == 0 {
            return Err(invalid(format!(
                "type {}: prefill and decode lengths must be positive",
                self.id
            )));
        }
        if !(self.rate.is_finite() && self.rate >= 0.0) {
            return Err(invalid(format!(
                "type {}: rate must be finite and non-negative, got {}",
                self.id, self.rate
            )));
        }
        Ok(())
    }

    /// Memory a type-j prompt touches over its whole life, `(l'+1)(l + l'/2)`.
    pub fn lifetime_memory(&self) -> f64 {
        (self.decode_len as f64 + 1.0) * (self.prefill_len as f64 + self.decode_len as f64 / 2.0)
    }
}

/// Checks ids are `0..m` in order and every type is valid.
pub fn validate_types(types: &[PromptType]) -> Result<()> {
    if types.is_empty() {
        return Err(invalid("at least one prompt type is required"));
    }
    for (i, t) in types.iter().enumerate() {
        if t.id != i {
            return Err(invalid(format!("type ids must be 0..m in order, found {} at {}", t.id, i)));
        }
        t.validate()?;
    }
    Ok(())
}

/// Generator for stream `stream` under `master_seed`.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Ordered arrival times of one type.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrivalStream {
    pub type_id: usize,
    pub times: Vec<f64>,
    pub horizon: f64,
    pub seed: u64,
}

/// One arriving prompt with its true lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub time: f64,
    pub type_id: usize,
    pub prefill_len: u32,
    pub decode_len: u32,
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(invalid(format!("horizon must be finite and non-negative, got {horizon}")));
    }
    Ok(())
}

fn poisson_times(rate: f64, horizon: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(rate.is_finite() && rate >= 0.0) {
        return Err(invalid(format!("rate must be finite and non-negative, got {rate}")));
    }
    check_horizon(horizon)?;
    let mut times = Vec::new();
    if rate == 0.0 || horizon == 0.0 {
        return Ok(times);
    }
    let exp = Exp::new(rate).map_err(|e| invalid(e.to_string()))?;
    let mut t = 0.0;
    loop {
        t += exp.sample(rng);
        if t > horizon {
            break;
        }
        times.push(t);
    }
    Ok(times)
}

/// Homogeneous Poisson arrivals on `[0, horizon]` using stream 0 of `seed`.
pub fn generate_poisson(rate: f64, horizon: f64, seed: u64) -> Result<ArrivalStream> {
    let mut rng = stream_rng(seed, 0);
    Ok(ArrivalStream {
        type_id: 0,
        times: poisson_times(rate, horizon, &mut rng)?,
        horizon,
        seed,
    })
}

/// Shape of a time-varying arrival rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateProfile {
    Constant { rate: f64 },
    /// Linear from `start` at t=0 to `end` at `duration`, flat afterwards.
    Ramp { start: f64, end: f64, duration: f64 },
    /// `mean + amplitude * sin(2 pi t / period + phase)`.
    Sinusoid {
        mean: f64,
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `base` everywhere except `peak` on `[start, start + width)`.
    Spike { base: f64, peak: f64, start: f64, width: f64 },
    /// `rates[i]` on `[breakpoints[i], breakpoints[i+1])`; the last rate extends forever.
    Piecewise { breakpoints: Vec<f64>, rates: Vec<f64> },
}

/// A rate profile together with the dominating rate used for thinning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFunction {
    pub profile: RateProfile,
    pub rate_max: f64,
}

fn overlap(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    (b.min(hi) - a.max(lo)).max(0.0)
}

impl RateProfile {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        let ok = match self {
            RateProfile::Constant { rate } => finite_nonneg(*rate),
            RateProfile::Ramp { start, end, duration } => {
                finite_nonneg(*start) && finite_nonneg(*end) && *duration > 0.0
            }
            RateProfile::Sinusoid { mean, amplitude, period, phase } => {
                finite_nonneg(*mean)
                    && finite_nonneg(*amplitude)
                    && amplitude <= mean
                    && *period > 0.0
                    && phase.is_finite()
            }
            RateProfile::Spike { base, peak, start, width } => {
                finite_nonneg(*base) && finite_nonneg(*peak) && start.is_finite() && finite_nonneg(*width)
            }
            RateProfile::Piecewise { breakpoints, rates } => {
                !rates.is_empty()
                    && breakpoints.len() == rates.len()
                    && breakpoints[0] == 0.0
                    && breakpoints.windows(2).all(|w| w[0] < w[1])
                    && rates.iter().all(|r| finite_nonneg(*r))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("malformed rate profile {self:?}")))
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            RateProfile::Constant { rate } => *rate,
            RateProfile::Ramp { start, end, duration } => {
                let f = (t / duration).clamp(0.0, 1.0);
                start + (end - start) * f
            }
            RateProfile::Sinusoid { mean, amplitude, period, phase } => {
                mean + amplitude * (2.0 * PI * t / period + phase).sin()
            }
            RateProfile::Spike { base, peak, start, width } => {
                if t >= *start && t < start + width {
                    *peak
                } else {
                    *base
                }
            }
            RateProfile::Piecewise { breakpoints, rates } => {
                let i = breakpoints.partition_point(|b| *b <= t).saturating_sub(1);
                rates[i]
            }
        }
    }

    /// Supremum of the rate over all t.
    pub fn sup(&self) -> f64 {
        match self {
            RateProfile::Constant { rate } => *rate,
            RateProfile::Ramp { start, end, .. } => start.max(*end),
            RateProfile::Sinusoid { mean, amplitude, .. } => mean + amplitude,
            RateProfile::Spike { base, peak, width, .. } => {
                if *width > 0.0 {
                    base.max(*peak)
                } else {
                    *base
                }
            }
            RateProfile::Piecewise { rates, .. } => rates.iter().cloned().fold(0.0, f64::max),
        }
    }

    /// Accumulated arrivals `integral_a^b rate(t) dt`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        match self {
            RateProfile::Constant { rate } => rate * (b - a),
            RateProfile::Ramp { start, end, duration } => {
                let before = overlap(a, b, f64::NEG_INFINITY, 0.0) * start;
                let after = overlap(a, b, *duration, f64::INFINITY) * end;
                let (x0, x1) = (a.max(0.0), b.min(*duration));
                let mid = if x1 > x0 {
                    (x1 - x0) * (self.eval(x0) + self.eval(x1)) / 2.0
                } else {
                    0.0
                };
                before + mid + after
            }
            RateProfile::Sinusoid { mean, amplitude, period, phase } => {
                let w = 2.0 * PI / period;
                mean * (b - a) - amplitude / w * ((w * b + phase).cos() - (w * a + phase).cos())
            }
            RateProfile::Spike { base, peak, start, width } => {
                base * (b - a) + (peak - base) * overlap(a, b, *start, start + width)
            }
            RateProfile::Piecewise { breakpoints, rates } => {
                let mut total = 0.0;
                for i in 0..rates.len() {
                    let hi = breakpoints.get(i + 1).copied().unwrap_or(f64::INFINITY);
                    total += rates[i] * overlap(a, b, breakpoints[i], hi);
                }
                // rates[0] also covers t < 0
                total + rates[0] * overlap(a, b, f64::NEG_INFINITY, 0.0)
            }
        }
    }
}

impl RateFunction {
    /// Uses the profile's own supremum as the thinning bound.
    pub fn new(profile: RateProfile) -> Result<Self> {
        profile.validate()?;
        let rate_max = profile.sup();
        Ok(Self { profile, rate_max })
    }

    pub fn with_rate_max(profile: RateProfile, rate_max: f64) -> Result<Self> {
        profile.validate()?;
        if !(rate_max.is_finite() && rate_max >= 0.0) {
            return Err(invalid(format!("rate_max must be finite and non-negative, got {rate_max}")));
        }
        Ok(Self { profile, rate_max })
    }

    pub fn constant(rate: f64) -> Result<Self> {
        Self::new(RateProfile::Constant { rate })
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.profile.eval(t)
    }

    pub fn integral(&self, a: f64, b: f64) -> f64 {
        self.profile.integral(a, b)
    }

    /// Same shape with every rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let p = match &self.profile {
            RateProfile::Constant { rate } => RateProfile::Constant { rate: rate * factor },
            RateProfile::Ramp { start, end, duration } => RateProfile::Ramp {
                start: start * factor,
                end: end * factor,
                duration: *duration,
            },
            RateProfile::Sinusoid { mean, amplitude, period, phase } => RateProfile::Sinusoid {
                mean: mean * factor,
                amplitude: amplitude * factor,
                period: *period,
                phase: *phase,
            },
            RateProfile::Spike { base, peak, start, width } => RateProfile::Spike {
                base: base * factor,
                peak: peak * factor,
                start: *start,
                width: *width,
            },
            RateProfile::Piecewise { breakpoints, rates } => RateProfile::Piecewise {
                breakpoints: breakpoints.clone(),
                rates: rates.iter().map(|r| r * factor).collect(),
            },
        };
        Self {
            profile: p,
            rate_max: self.rate_max * factor,
        }
    }
}

/// A thinning candidate: proposal time, uniform draw and verdict.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub time: f64,
    pub u: f64,
    pub accepted: bool,
}

fn thinning_candidates(rf: &RateFunction, horizon: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Candidate>> {
    let proposals = poisson_times(rf.rate_max, horizon, rng)?;
    let mut out = Vec::with_capacity(proposals.len());
    for t in proposals {
        let r = rf.eval(t);
        if r > rf.rate_max * (1.0 + 1e-12) {
            return Err(invalid(format!(
                "rate {r} at t={t} exceeds declared rate_max {}",
                rf.rate_max
            )));
        }
        let u: f64 = rng.gen();
        out.push(Candidate {
            time: t,
            u,
            accepted: u * rf.rate_max < r,
        });
    }
    Ok(out)
}

/// Nonhomogeneous Poisson arrivals by thinning a `rate_max` stream.
pub fn generate_time_varying(rf: &RateFunction, horizon: f64, seed: u64) -> Result<ArrivalStream> {
    let (stream, _) = generate_time_varying_traced(rf, horizon, seed)?;
    Ok(stream)
}

/// As [`generate_time_varying`], also returning every thinning candidate.
pub fn generate_time_varying_traced(
    rf: &RateFunction,
    horizon: f64,
    seed: u64,
) -> Result<(ArrivalStream, Vec<Candidate>)> {
    let mut rng = stream_rng(seed, 0);
    let cands = thinning_candidates(rf, horizon, &mut rng)?;
    let times = cands.iter().filter(|c| c.accepted).map(|c| c.time).collect();
    Ok((
        ArrivalStream {
            type_id: 0,
            times,
            horizon,
            seed,
        },
        cands,
    ))
}

fn merge_jobs(mut jobs: Vec<Job>) -> Vec<Job> {
    jobs.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.type_id.cmp(&b.type_id)));
    jobs
}

/// Independent Poisson streams for every type, merged by time.
/// Type `j` draws from stream `j + 1` of `seed`.
pub fn poisson_jobs(types: &[PromptType], horizon: f64, seed: u64) -> Result<Vec<Job>> {
    validate_types(types)?;
    let mut jobs = Vec::new();
    for t in types {
        let mut rng = stream_rng(seed, t.id as u64 + 1);
        for time in poisson_times(t.rate, horizon, &mut rng)? {
            jobs.push(Job {
                time,
                type_id: t.id,
                prefill_len: t.prefill_len,
                decode_len: t.decode_len,
            });
        }
    }
    Ok(merge_jobs(jobs))
}

/// Thinned arrivals per type; `profiles[j]` drives type `j`.
pub fn time_varying_jobs(
    types: &[PromptType],
    profiles: &[RateFunction],
    horizon: f64,
    seed: u64,
) -> Result<Vec<Job>> {
    validate_types(types)?;
    if profiles.len() != types.len() {
        return Err(invalid(format!(
            "{} rate profiles for {} types",
            profiles.len(),
            types.len()
        )));
    }
    let mut jobs = Vec::new();
    for (t, rf) in types.iter().zip(profiles) {
        let mut rng = stream_rng(seed, t.id as u64 + 1);
        for c in thinning_candidates(rf, horizon, &mut rng)? {
            if c.accepted {
                jobs.push(Job {
                    time: c.time,
                    type_id: t.id,
                    prefill_len: t.prefill_len,
                    decode_len: t.decode_len,
                });
            }
        }
    }
    Ok(merge_jobs(jobs))
}

/// One line of a JSONL trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub prefill_len: u32,
    pub decode_len: u32,
    pub arrival_time: Option<f64>,
}

#[derive(Deserialize)]
struct RawRecord {
    prefill_len: i64,
    decode_len: i64,
    #[serde(default)]
    arrival_time: Option<f64>,
}

/// Reads `{"prefill_len", "decode_len", "arrival_time"?}` lines; unknown keys
/// are ignored and blank lines skipped.
pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let err = |line: usize, message: String| Error::Trace {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(line_no, e.to_string()))?;
        if raw.prefill_len <= 0 || raw.decode_len <= 0 {
            return Err(err(line_no, "lengths must be positive".into()));
        }
        if raw.prefill_len > u32::MAX as i64 || raw.decode_len > u32::MAX as i64 {
            return Err(err(line_no, "length out of range".into()));
        }
        if let Some(t) = raw.arrival_time {
            if !(t.is_finite() && t >= 0.0) {
                return Err(err(line_no, format!("bad arrival_time {t}")));
            }
        }
        out.push(TraceRecord {
            prefill_len: raw.prefill_len as u32,
            decode_len: raw.decode_len as u32,
            arrival_time: raw.arrival_time,
        });
    }
    Ok(out)
}

/// Upper edge of the right-closed bin `(k w, (k+1) w]` holding `decode_len`.
pub fn decode_bin(decode_len: u32, bin_width: u32) -> u32 {
    (decode_len - 1) / bin_width * bin_width + bin_width
}

/// Groups records by decode length into types. Each type takes the bin's
/// upper edge as `l'`, the rounded mean prefill as `l`, and a share of
/// `total_rate` equal to its empirical frequency. Ids follow increasing `l'`.
pub fn bin_by_decode(records: &[TraceRecord], bin_width: u32, total_rate: f64) -> Result<Vec<PromptType>> {
    if records.is_empty() {
        return Err(invalid("trace is empty"));
    }
    if bin_width == 0 {
        return Err(invalid("bin_width must be positive"));
    }
    if !(total_rate.is_finite() && total_rate > 0.0) {
        return Err(invalid(format!("total_rate must be positive, got {total_rate}")));
    }
    let mut bins: std::collections::BTreeMap<u32, (u64, u64)> = Default::default();
    for r in records {
        let e = bins.entry(decode_bin(r.decode_len, bin_width)).or_default();
        e.0 += 1;
        e.1 += r.prefill_len as u64;
    }
    let n = records.len() as f64;
    bins.into_iter()
        .enumerate()
        .map(|(id, (edge, (count, prefill_sum)))| {
            let mean = prefill_sum as f64 / count as f64;
            PromptType::new(id, (mean.round() as u32).max(1), edge, total_rate * count as f64 / n)
        })
        .collect()
}

/// Poisson(`total_rate`) arrivals, each carrying a record drawn uniformly from
/// `records` and labelled with its decode bin among `types`.
pub fn trace_jobs(
    records: &[TraceRecord],
    types: &[PromptType],
    bin_width: u32,
    total_rate: f64,
    horizon: f64,
    seed: u64,
) -> Result<Vec<Job>> {
    if records.is_empty() {
        return Err(invalid("trace is empty"));
    }
    let mut rng = stream_rng(seed, 0);
    let times = poisson_times(total_rate, horizon, &mut rng)?;
    let mut jobs = Vec::with_capacity(times.len());
    for time in times {
        let r = &records[rng.gen_range(0..records.len())];
        let edge = decode_bin(r.decode_len, bin_width);
        let type_id = types
            .iter()
            .position(|t| t.decode_len == edge)
            .ok_or_else(|| invalid(format!("no type for decode bin {edge}")))?;
        jobs.push(Job {
            time,
            type_id,
            prefill_len: r.prefill_len,
            decode_len: r.decode_len,
        });
    }
    Ok(jobs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn zero_rate_or_horizon_is_empty() {
        assert!(generate_poisson(0.0, 10.0, 1).unwrap().times.is_empty());
        assert!(generate_poisson(3.0, 0.0, 1).unwrap().times.is_empty());
        assert!(generate_poisson(-1.0, 1.0, 1).is_err());
    }

    #[test]
    fn poisson_count_matches_rate() {
        let s = generate_poisson(4.0, 10_000.0, 7).unwrap();
        let n = s.times.len() as f64;
        // sd of count is 200
        assert!((n - 40_000.0).abs() < 1_000.0, "count {n}");
        assert!(s.times.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.times.iter().all(|t| *t > 0.0 && *t <= 10_000.0));
    }

    #[test]
    fn same_seed_same_stream() {
        assert_eq!(generate_poisson(2.0, 50.0, 3).unwrap(), generate_poisson(2.0, 50.0, 3).unwrap());
        assert_ne!(generate_poisson(2.0, 50.0, 3).unwrap(), generate_poisson(2.0, 50.0, 4).unwrap());
    }

    #[test]
    fn type_streams_are_independent_of_other_types() {
        let a = vec![PromptType::new(0, 1, 1, 2.0).unwrap()];
        let b = vec![a[0].clone(), PromptType::new(1, 3, 4, 5.0).unwrap()];
        let ja = poisson_jobs(&a, 100.0, 9).unwrap();
        let jb: Vec<Job> = poisson_jobs(&b, 100.0, 9).unwrap().into_iter().filter(|j| j.type_id == 0).collect();
        assert_eq!(ja, jb);
    }

    #[test]
    fn constant_thinning_keeps_everything() {
        let rf = RateFunction::constant(3.0).unwrap();
        let (s, c) = generate_time_varying_traced(&rf, 100.0, 5).unwrap();
        assert_eq!(s.times.len(), c.len());
    }

    #[test]
    fn thinning_replay_reproduces_stream() {
        let rf = RateFunction::new(RateProfile::Sinusoid {
            mean: 5.0,
            amplitude: 4.0,
            period: 10.0,
            phase: 0.3,
        })
        .unwrap();
        let (s, cands) = generate_time_varying_traced(&rf, 200.0, 11).unwrap();
        let replay: Vec<f64> = cands
            .iter()
            .filter(|c| c.u * rf.rate_max < rf.eval(c.time))
            .map(|c| c.time)
            .collect();
        assert_eq!(s.times, replay);
    }

    #[test]
    fn rate_above_declared_max_is_rejected() {
        let rf = RateFunction::with_rate_max(RateProfile::Constant { rate: 2.0 }, 1.0).unwrap();
        assert!(generate_time_varying(&rf, 100.0, 1).is_err());
    }

    #[test]
    fn integrals_match_quadrature() {
        let profiles = vec![
            RateProfile::Ramp { start: 1.0, end: 5.0, duration: 7.0 },
            RateProfile::Sinusoid { mean: 3.0, amplitude: 2.0, period: 4.0, phase: 1.0 },
            RateProfile::Spike { base: 1.0, peak: 9.0, start: 2.0, width: 0.5 },
            RateProfile::Piecewise { breakpoints: vec![0.0, 1.5, 4.0], rates: vec![2.0, 0.5, 3.0] },
        ];
        for p in profiles {
            for (a, b) in [(0.0, 10.0), (1.2, 3.7), (-1.0, 2.0)] {
                let n = 200_000;
                let h = (b - a) / n as f64;
                let q: f64 = (0..n).map(|i| p.eval(a + (i as f64 + 0.5) * h) * h).sum();
                assert!((q - p.integral(a, b)).abs() < 1e-3, "{p:?} on [{a},{b}]: {q} vs {}", p.integral(a, b));
            }
        }
    }

    fn write_trace(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn trace_parsing() {
        let f = write_trace(&[
            r#"{"prefill_len": 5, "decode_len": 10, "arrival_time": 0.5, "model": "x"}"#,
            "",
            r#"{"prefill_len": 7, "decode_len": 60}"#,
        ]);
        let recs = load_trace(f.path()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].arrival_time, Some(0.5));
        assert_eq!(recs[1].arrival_time, None);
    }

    #[test]
    fn trace_errors_carry_line_numbers() {
        let f = write_trace(&[r#"{"prefill_len": 5, "decode_len": 10}"#, r#"{"prefill_len": 0, "decode_len": 10}"#]);
        match load_trace(f.path()) {
            Err(Error::Trace { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_trace(&[r#"{"prefill_len": 5}"#]);
        assert!(matches!(load_trace(f.path()), Err(Error::Trace { line: 1, .. })));
        assert!(matches!(load_trace(Path::new("/nonexistent/trace.jsonl")), Err(Error::Io { .. })));
    }

    #[test]
    fn binning_uses_right_closed_bins() {
        let recs: Vec<TraceRecord> = [(4, 10), (6, 60), (8, 60), (1, 50)]
            .iter()
            .map(|&(p, d)| TraceRecord { prefill_len: p, decode_len: d, arrival_time: None })
            .collect();
        let types = bin_by_decode(&recs, 50, 8.0).unwrap();
        assert_eq!(types.len(), 2);
        assert_eq!((types[0].decode_len, types[0].prefill_len), (50, 3));
        assert_eq!((types[1].decode_len, types[1].prefill_len), (100, 7));
        assert!((types[0].rate - 4.0).abs() < 1e-12);
        assert!(bin_by_decode(&[], 50, 1.0).is_err());
    }
}
