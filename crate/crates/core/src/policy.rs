//! Threshold policies and their feasibility checks.
//!
//! A WAIT policy holds one threshold per type. Nested policies hold one
//! threshold per decode segment; segment `k` covers decode stages
//! `(l'_{k-1}, l'_k]` and the first segment also owns the prefill stage.

use std::ops::Range;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fluid::{FluidEquilibrium, SystemConfig};
use crate::workload::{validate_types, PromptType, RateFunction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Wait,
    Nested,
    NestedSegmented,
}

/// Segments built from types sorted by decode length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentLayout {
    /// Cumulative decode length closing each segment.
    pub bounds: Vec<u32>,
    /// Aggregated arrival rate of the types in each segment.
    pub rates: Vec<f64>,
    /// Type indices per segment.
    pub groups: Vec<Range<usize>>,
    /// Largest prefill length over all types.
    pub prefill_len: u32,
    pub num_types: usize,
}

impl SegmentLayout {
    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn total_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    /// `sum_{j >= k} rate_j` for every `k`, plus a trailing zero.
    pub fn tail_rates(&self) -> Vec<f64> {
        tails(&self.rates)
    }

    /// `p_k = tail(k+1) / tail(k)` for `k = 0..L-1` (0-based).
    /// A segment nobody reaches gets `p = 0`.
    pub fn thinning(&self) -> Vec<f64> {
        let tail = self.tail_rates();
        (0..self.len().saturating_sub(1))
            .map(|k| if tail[k] > 0.0 { tail[k + 1] / tail[k] } else { 0.0 })
            .collect()
    }

    /// Stages per segment; the first one includes prefill.
    pub fn stage_counts(&self) -> Vec<u32> {
        (0..self.len())
            .map(|k| if k == 0 { self.bounds[0] + 1 } else { self.bounds[k] - self.bounds[k - 1] })
            .collect()
    }

    /// Segment (0-based) owning pipeline stage `stage`; `None` past the last bound.
    pub fn segment_of(&self, stage: u32) -> Option<usize> {
        let k = self.bounds.partition_point(|b| *b < stage);
        (k < self.len()).then_some(k)
    }

    /// First pipeline stage of segment `k`.
    pub fn entry_stage(&self, k: usize) -> u32 {
        if k == 0 {
            0
        } else {
            self.bounds[k - 1] + 1
        }
    }
}

fn tails(rates: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; rates.len() + 1];
    for k in (0..rates.len()).rev() {
        t[k] = t[k + 1] + rates[k];
    }
    t
}

fn check_sorted(types: &[PromptType]) -> Result<()> {
    validate_types(types)?;
    if types.windows(2).any(|w| w[0].decode_len >= w[1].decode_len) {
        return Err(invalid("types must be sorted by strictly increasing decode length"));
    }
    Ok(())
}

/// Contiguous groups of `m / L` types, the last group taking the remainder.
pub fn segment_partition(types: &[PromptType], segments: usize) -> Result<SegmentLayout> {
    check_sorted(types)?;
    let m = types.len();
    if segments == 0 || segments > m {
        return Err(invalid(format!("segment count must be in 1..={m}, got {segments}")));
    }
    let width = m / segments;
    let mut groups = Vec::with_capacity(segments);
    for k in 0..segments {
        let end = if k + 1 == segments { m } else { (k + 1) * width };
        groups.push(k * width..end);
    }
    Ok(SegmentLayout {
        bounds: groups.iter().map(|g| types[g.end - 1].decode_len).collect(),
        rates: groups.iter().map(|g| types[g.clone()].iter().map(|t| t.rate).sum()).collect(),
        groups,
        prefill_len: types.iter().map(|t| t.prefill_len).max().unwrap_or(1),
        num_types: m,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdPolicy {
    pub kind: PolicyKind,
    pub thresholds: Vec<u32>,
    pub layout: Option<SegmentLayout>,
}

fn check_thresholds(t: &[u32]) -> Result<()> {
    if t.is_empty() || t.contains(&0) {
        return Err(invalid("thresholds must be non-empty and at least 1"));
    }
    Ok(())
}

impl ThresholdPolicy {
    pub fn wait(thresholds: Vec<u32>) -> Result<Self> {
        check_thresholds(&thresholds)?;
        Ok(Self {
            kind: PolicyKind::Wait,
            thresholds,
            layout: None,
        })
    }

    /// One segment per type; types must be sorted by decode length.
    pub fn nested(thresholds: Vec<u32>, types: &[PromptType]) -> Result<Self> {
        let layout = segment_partition(types, types.len())?;
        Self::with_layout(PolicyKind::Nested, thresholds, layout)
    }

    pub fn segmented(thresholds: Vec<u32>, layout: SegmentLayout) -> Result<Self> {
        Self::with_layout(PolicyKind::NestedSegmented, thresholds, layout)
    }

    fn with_layout(kind: PolicyKind, thresholds: Vec<u32>, layout: SegmentLayout) -> Result<Self> {
        check_thresholds(&thresholds)?;
        if thresholds.len() != layout.len() {
            return Err(invalid(format!(
                "{} thresholds for {} segments",
                thresholds.len(),
                layout.len()
            )));
        }
        if layout.bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("segment bounds must be strictly increasing"));
        }
        Ok(Self {
            kind,
            thresholds,
            layout: Some(layout),
        })
    }

    fn layout(&self) -> Result<&SegmentLayout> {
        self.layout
            .as_ref()
            .ok_or_else(|| invalid("policy has no segment layout"))
    }

    /// Peak batch memory `M^pi` when every stage holds exactly its threshold.
    /// WAIT reads lengths from `types`; nested kinds use their layout.
    pub fn policy_memory(&self, types: &[PromptType]) -> Result<f64> {
        match self.kind {
            PolicyKind::Wait => {
                if self.thresholds.len() != types.len() {
                    return Err(invalid(format!(
                        "{} thresholds for {} types",
                        self.thresholds.len(),
                        types.len()
                    )));
                }
                Ok(self
                    .thresholds
                    .iter()
                    .zip(types)
                    .map(|(&n, t)| n as f64 * t.lifetime_memory())
                    .sum())
            }
            PolicyKind::Nested | PolicyKind::NestedSegmented => Ok(nested_memory(&self.thresholds, self.layout()?)),
        }
    }

    /// `d0 + d1 * M^pi`.
    pub fn full_batch_time(&self, types: &[PromptType], cfg: &SystemConfig) -> Result<f64> {
        Ok(cfg.iteration_time(self.policy_memory(types)?))
    }
}

/// `sum_k n_k (l + L'_k / 2) * stages_k` with `L'_k` the running sum of bounds.
fn nested_memory(thresholds: &[u32], layout: &SegmentLayout) -> f64 {
    let l = layout.prefill_len as f64;
    let mut cum = 0.0;
    let mut total = 0.0;
    for (k, stages) in layout.stage_counts().into_iter().enumerate() {
        cum += layout.bounds[k] as f64;
        total += thresholds[k] as f64 * (l + cum / 2.0) * stages as f64;
    }
    total
}

pub fn full_batch_time(policy: &ThresholdPolicy, types: &[PromptType], cfg: &SystemConfig) -> Result<f64> {
    policy.full_batch_time(types, cfg)
}

/// One checked inequality; `slack = rhs - lhs` for upper bounds and
/// `lhs - rhs` for lower bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Constraint {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
    /// `|lhs - rhs|` within tolerance.
    pub tight: bool,
    /// Holds with room to spare.
    pub strict: bool,
}

const REL_TOL: f64 = 1e-9;
const RATIO_TOL: f64 = 1e-12;

impl Constraint {
    /// `lhs <= rhs`.
    fn at_most(name: String, lhs: f64, rhs: f64) -> Self {
        let tol = REL_TOL * rhs.abs().max(1.0);
        let slack = rhs - lhs;
        Self {
            name,
            lhs,
            rhs,
            slack,
            pass: rhs.is_infinite() || slack >= -tol,
            tight: slack.abs() <= tol,
            strict: rhs.is_infinite() || slack > tol,
        }
    }

    /// `lhs >= rhs`.
    fn at_least(name: String, lhs: f64, rhs: f64) -> Self {
        let mut c = Self::at_most(name, rhs, lhs);
        std::mem::swap(&mut c.lhs, &mut c.rhs);
        c
    }

    /// `lhs < rhs`.
    fn below(name: String, lhs: f64, rhs: f64, tol: f64) -> Self {
        let tol = tol * rhs.abs().max(1.0);
        let slack = rhs - lhs;
        Self {
            name,
            lhs,
            rhs,
            slack,
            pass: rhs.is_infinite() || slack > tol,
            tight: slack.abs() <= tol,
            strict: rhs.is_infinite() || slack > tol,
        }
    }

    /// `lhs > rhs`.
    fn above(name: String, lhs: f64, rhs: f64, tol: f64) -> Self {
        let mut c = Self::below(name, rhs, lhs, tol);
        std::mem::swap(&mut c.lhs, &mut c.rhs);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub kind: PolicyKind,
    pub delta_t_full: f64,
    pub policy_memory: f64,
    pub constraints: Vec<Constraint>,
    pub feasible: bool,
}

impl FeasibilityReport {
    fn new(kind: PolicyKind, delta_t_full: f64, policy_memory: f64, constraints: Vec<Constraint>) -> Self {
        let feasible = constraints.iter().all(|c| c.pass);
        Self {
            kind,
            delta_t_full,
            policy_memory,
            constraints,
            feasible,
        }
    }

    pub fn constraint(&self, name: &str) -> Option<&Constraint> {
        self.constraints.iter().find(|c| c.name == name)
    }
}

/// Per type `dT(n) <= n_j / lambda_j`, plus `M^pi >= M*`.
pub fn validate_wait(
    policy: &ThresholdPolicy,
    types: &[PromptType],
    cfg: &SystemConfig,
    eq: &FluidEquilibrium,
) -> Result<FeasibilityReport> {
    if policy.kind != PolicyKind::Wait {
        return Err(invalid("validate_wait needs a WAIT policy"));
    }
    validate_types(types)?;
    let mem = policy.policy_memory(types)?;
    let dt = cfg.iteration_time(mem);
    let mut cs: Vec<Constraint> = types
        .iter()
        .zip(&policy.thresholds)
        .map(|(t, &n)| {
            let rhs = if t.rate > 0.0 { n as f64 / t.rate } else { f64::INFINITY };
            Constraint::at_most(format!("arrivals_type_{}", t.id), dt, rhs)
        })
        .collect();
    cs.push(Constraint::at_least("memory".into(), mem, eq.memory));
    Ok(FeasibilityReport::new(PolicyKind::Wait, dt, mem, cs))
}

fn round_half_up(x: f64) -> u32 {
    (x + 0.5).floor().max(0.0) as u32
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeuristicThresholds {
    pub thresholds: Vec<u32>,
    /// Types whose rounded value was below 1 and got clamped.
    pub clamped: Vec<usize>,
}

/// `n_j = max(1, round(budget * rho_j / (l'_j + 1)))`, `rho_j = lambda_j / sum lambda`.
pub fn heuristic_wait_thresholds(batch_budget: u64, types: &[PromptType]) -> Result<HeuristicThresholds> {
    validate_types(types)?;
    if batch_budget < types.len() as u64 {
        return Err(invalid(format!(
            "batch budget {batch_budget} is smaller than the number of types {}",
            types.len()
        )));
    }
    let total: f64 = types.iter().map(|t| t.rate).sum();
    if total <= 0.0 {
        return Err(invalid("total arrival rate must be positive"));
    }
    let mut out = HeuristicThresholds {
        thresholds: Vec::with_capacity(types.len()),
        clamped: Vec::new(),
    };
    for t in types {
        let raw = round_half_up(batch_budget as f64 * (t.rate / total) / (t.decode_len as f64 + 1.0));
        if raw == 0 {
            out.clamped.push(t.id);
        }
        out.thresholds.push(raw.max(1));
    }
    Ok(out)
}

/// `dT_full < n_1 / sum lambda` and `n_{k+1} / n_k > p_k` for every segment.
pub fn validate_nested(policy: &ThresholdPolicy, cfg: &SystemConfig) -> Result<FeasibilityReport> {
    if policy.kind == PolicyKind::Wait {
        return Err(invalid("validate_nested needs a nested policy"));
    }
    let layout = policy.layout()?;
    let n = &policy.thresholds;
    let mem = nested_memory(n, layout);
    let dt = cfg.iteration_time(mem);
    let total = layout.total_rate();
    let rhs = if total > 0.0 { n[0] as f64 / total } else { f64::INFINITY };
    let mut cs = vec![Constraint::below("arrivals_segment_1".into(), dt, rhs, REL_TOL)];
    for (k, p) in layout.thinning().into_iter().enumerate() {
        cs.push(Constraint::above(
            format!("thinning_segment_{}", k + 2),
            n[k + 1] as f64 / n[k] as f64,
            p,
            RATIO_TOL,
        ));
    }
    Ok(FeasibilityReport::new(policy.kind, dt, mem, cs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThetaSolution {
    pub theta: f64,
    pub lower_bound: f64,
    /// `|exp(g(theta)) - 1|`.
    pub residual: f64,
    pub iterations: u32,
}

/// `g(theta) = -theta n_k + n_prev ln(1 - p + p e^theta)`.
pub fn theta_objective(theta: f64, n_prev: f64, n_k: f64, p: f64) -> f64 {
    let log_mgf = if theta <= 30.0 {
        (p * theta.exp_m1()).ln_1p()
    } else {
        theta + (p + (1.0 - p) * (-theta).exp()).ln()
    };
    -theta * n_k + n_prev * log_mgf
}

/// Positive root of [`theta_objective`]: the exponent that makes
/// `e^{-theta n_k} (1 - p + p e^theta)^{n_prev}` a martingale factor of one.
pub fn solve_theta(n_prev: u32, n_k: u32, p: f64) -> Result<ThetaSolution> {
    let (np, nk) = (n_prev as f64, n_k as f64);
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("p must lie in (0, 1), got {p}")));
    }
    if !(n_prev > n_k && nk > np * p) {
        return Err(invalid(format!(
            "need n_prev > n_k > n_prev * p, got {n_prev}, {n_k}, {p}"
        )));
    }
    let g = |th: f64| theta_objective(th, np, nk, p);
    let lower_bound = 8.0 * (nk - np * p) / np;
    let mut lo = if g(lower_bound) < 0.0 { lower_bound } else { 0.0 };
    let mut hi: f64 = 1.0;
    while hi <= lo || g(hi) <= 0.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Internal("failed to bracket theta".into()));
        }
    }
    let mut iterations = 0;
    while iterations < 200 {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = if g(hi).abs() < g(lo).abs() { hi } else { lo };
    Ok(ThetaSolution {
        theta,
        lower_bound,
        residual: g(theta).exp_m1().abs(),
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryBudget {
    pub base: f64,
    pub queue_term: f64,
    pub hp_term: f64,
    pub total: f64,
    pub delta: f64,
    pub batches: u64,
    pub zeta: f64,
    /// Per segment from the second on; `None` when the segment queue cannot
    /// grow (`n_k >= n_{k-1}` or nothing reaches it).
    pub thetas: Vec<Option<f64>>,
}

/// `M^pi + sum_{k>=2} (l + l'_{k-1}) (n_k + ln(m zeta B / delta) / theta_k)`.
pub fn nested_memory_budget(
    policy: &ThresholdPolicy,
    cfg: &SystemConfig,
    zeta: f64,
    batches: u64,
    delta: f64,
) -> Result<MemoryBudget> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(zeta.is_finite() && zeta > 0.0) || batches == 0 {
        return Err(invalid("zeta and batches must be positive"));
    }
    let report = validate_nested(policy, cfg)?;
    if !report.feasible {
        return Err(Error::Infeasible(format!(
            "nested thresholds violate: {}",
            report
                .constraints
                .iter()
                .filter(|c| !c.pass)
                .map(|c| c.name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    let layout = policy.layout()?;
    let n = &policy.thresholds;
    let log_term = (layout.num_types as f64 * zeta * batches as f64 / delta).ln();
    let l = layout.prefill_len as f64;
    let mut queue_term = 0.0;
    let mut hp_term = 0.0;
    let mut thetas = Vec::new();
    for (k, p) in layout.thinning().into_iter().enumerate() {
        let seg = k + 1;
        let weight = l + layout.bounds[k] as f64;
        queue_term += weight * n[seg] as f64;
        let theta = if p > 0.0 && n[seg] < n[k] {
            Some(solve_theta(n[k], n[seg], p)?.theta)
        } else {
            None
        };
        if let Some(th) = theta {
            hp_term += weight * log_term / th;
        }
        thetas.push(theta);
    }
    let base = report.policy_memory;
    Ok(MemoryBudget {
        base,
        queue_term,
        hp_term,
        total: base + queue_term + hp_term,
        delta,
        batches,
        zeta,
        thetas,
    })
}

/// Grid resolution for time-varying suprema.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridOptions {
    pub points_per_window: usize,
    pub max_points: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            points_per_window: 1000,
            max_points: 2_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimeVaryingReport {
    pub delta_t_full: f64,
    /// `sup_t sum_j lambda_j[t, t + dT]`.
    pub peak_window_arrivals: f64,
    pub peak_time: f64,
    /// Worst thinning probability into each segment from the second on.
    pub p_star: Vec<f64>,
    pub p_star_times: Vec<f64>,
    pub grid_step: f64,
    pub constraints: Vec<Constraint>,
    pub feasible: bool,
}

/// Checks window arrivals against `n_1` and `n_{k-1} p*_k < n_k` over a grid
/// on `[0, horizon]`. `rate_fns[j]` drives type `j` of the policy's layout.
pub fn validate_time_varying(
    policy: &ThresholdPolicy,
    rate_fns: &[RateFunction],
    horizon: f64,
    cfg: &SystemConfig,
    grid: GridOptions,
) -> Result<TimeVaryingReport> {
    if policy.kind == PolicyKind::Wait {
        return Err(invalid("time-varying validation needs a nested policy"));
    }
    let layout = policy.layout()?;
    if rate_fns.len() != layout.num_types {
        return Err(invalid(format!(
            "{} rate functions for {} types",
            rate_fns.len(),
            layout.num_types
        )));
    }
    if !(horizon.is_finite() && horizon >= 0.0) || grid.points_per_window == 0 || grid.max_points < 2 {
        return Err(invalid("bad horizon or grid options"));
    }
    let n = &policy.thresholds;
    let dt = cfg.iteration_time(nested_memory(n, layout));
    let segs = layout.len();
    let mut step = dt / grid.points_per_window as f64;
    if horizon / step + 1.0 > grid.max_points as f64 {
        step = horizon / (grid.max_points - 1) as f64;
    }
    let points = if horizon > 0.0 { (horizon / step).ceil() as usize + 1 } else { 1 };

    let mut peak = f64::NEG_INFINITY;
    let mut peak_time = 0.0;
    let mut p_star = vec![0.0; segs.saturating_sub(1)];
    let mut p_star_times = vec![0.0; segs.saturating_sub(1)];
    let mut window = vec![0.0; segs];
    let mut instant = vec![0.0; segs];
    for i in 0..points {
        let t = (i as f64 * step).min(horizon);
        for (k, g) in layout.groups.iter().enumerate() {
            window[k] = rate_fns[g.clone()].iter().map(|f| f.integral(t, t + dt)).sum();
            instant[k] = rate_fns[g.clone()].iter().map(|f| f.eval(t)).sum();
        }
        let sum: f64 = window.iter().sum();
        if sum > peak {
            peak = sum;
            peak_time = t;
        }
        let (tw, ti) = (tails(&window), tails(&instant));
        for k in 0..segs.saturating_sub(1) {
            for (num, den) in [(tw[k + 1], tw[k]), (ti[k + 1], ti[k])] {
                if den > 0.0 && num / den > p_star[k] {
                    p_star[k] = num / den;
                    p_star_times[k] = t;
                }
            }
        }
    }
    let mut cs = vec![Constraint::below("arrivals_segment_1".into(), peak, n[0] as f64, REL_TOL)];
    for k in 0..segs.saturating_sub(1) {
        cs.push(Constraint::below(
            format!("thinning_segment_{}", k + 2),
            n[k] as f64 * p_star[k],
            n[k + 1] as f64,
            RATIO_TOL,
        ));
    }
    let feasible = cs.iter().all(|c| c.pass);
    Ok(TimeVaryingReport {
        delta_t_full: dt,
        peak_window_arrivals: peak,
        peak_time,
        p_star,
        p_star_times,
        grid_step: step,
        constraints: cs,
        feasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::solve_equilibrium;
    use crate::workload::RateProfile;

    fn ty(id: usize, l: u32, lp: u32, rate: f64) -> PromptType {
        PromptType::new(id, l, lp, rate).unwrap()
    }

    fn golden() -> (Vec<PromptType>, SystemConfig) {
        (vec![ty(0, 1, 1, 1.0), ty(1, 1, 2, 1.0)], SystemConfig::new(0.5, 1.0 / 18.0, 9).unwrap())
    }

    #[test]
    fn single_type_full_batch_time() {
        let types = vec![ty(0, 1, 1, 1.0)];
        let cfg = SystemConfig::new(0.5, 1.0 / 18.0, 100).unwrap();
        let p = ThresholdPolicy::wait(vec![2]).unwrap();
        assert!((p.policy_memory(&types).unwrap() - 6.0).abs() < 1e-12);
        assert!((p.full_batch_time(&types, &cfg).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!(ThresholdPolicy::wait(vec![0]).is_err());
    }

    #[test]
    fn one_segment_nested_equals_wait() {
        let types = vec![ty(0, 3, 5, 2.0)];
        let cfg = SystemConfig::new(0.1, 0.01, 1000).unwrap();
        let w = ThresholdPolicy::wait(vec![4]).unwrap().full_batch_time(&types, &cfg).unwrap();
        let n = ThresholdPolicy::nested(vec![4], &types).unwrap().full_batch_time(&types, &cfg).unwrap();
        assert!((w - n).abs() < 1e-12);
    }

    #[test]
    fn wait_equality_case_is_tight() {
        let (types, cfg) = golden();
        let eq = solve_equilibrium(&types, &cfg).unwrap();
        let r = validate_wait(&ThresholdPolicy::wait(vec![1, 1]).unwrap(), &types, &cfg, &eq).unwrap();
        assert!(r.feasible);
        assert!(r.constraints.iter().all(|c| c.tight && !c.strict));
    }

    #[test]
    fn wait_doubled_has_strict_slack() {
        let (types, cfg) = golden();
        let eq = solve_equilibrium(&types, &cfg).unwrap();
        let r = validate_wait(&ThresholdPolicy::wait(vec![2, 2]).unwrap(), &types, &cfg, &eq).unwrap();
        assert!(r.feasible);
        assert!((r.delta_t_full - 1.5).abs() < 1e-12);
        assert!(r.constraints.iter().all(|c| c.strict));
    }

    #[test]
    fn wait_below_equilibrium_is_infeasible() {
        let types = vec![ty(0, 1, 1, 1.0), ty(1, 1, 2, 2.0)];
        let cfg = SystemConfig::new(0.5, 1.0 / 40.0, 100).unwrap();
        let eq = solve_equilibrium(&types, &cfg).unwrap();
        // per-stage equilibrium for type 1 exceeds 1
        assert!(eq.per_stage(&types)[1] > 1.0);
        let r = validate_wait(&ThresholdPolicy::wait(vec![1, 1]).unwrap(), &types, &cfg, &eq).unwrap();
        assert!(!r.feasible);
        assert!(!r.constraint("arrivals_type_1").unwrap().pass);
    }

    #[test]
    fn heuristic_examples() {
        let types = vec![ty(0, 5, 10, 1.0), ty(1, 5, 20, 1.0)];
        assert_eq!(heuristic_wait_thresholds(66, &types).unwrap().thresholds, vec![3, 2]);
        let single = vec![ty(0, 5, 9, 3.0)];
        assert_eq!(heuristic_wait_thresholds(25, &single).unwrap().thresholds, vec![3]);
        let with_zero = vec![ty(0, 5, 10, 1.0), ty(1, 5, 20, 0.0)];
        let h = heuristic_wait_thresholds(66, &with_zero).unwrap();
        assert_eq!(h.thresholds[1], 1);
        assert_eq!(h.clamped, vec![1]);
        assert!(heuristic_wait_thresholds(1, &types).is_err());
    }

    fn ten_bins() -> Vec<PromptType> {
        let rates = [23.0, 11.0, 8.0, 7.0, 6.0, 4.0, 3.0, 2.0, 1.0, 1.0];
        rates
            .iter()
            .enumerate()
            .map(|(i, r)| ty(i, 60, 50 * (i as u32 + 1), *r))
            .collect()
    }

    #[test]
    fn tail_sum_thresholds_sit_on_the_boundary() {
        let types = ten_bins();
        let p = ThresholdPolicy::nested(vec![66, 43, 32, 24, 17, 11, 7, 4, 2, 1], &types).unwrap();
        let cfg = SystemConfig::new(1e-3, 1e-9, u64::MAX).unwrap();
        let r = validate_nested(&p, &cfg).unwrap();
        let ratios: Vec<&Constraint> = r.constraints.iter().filter(|c| c.name.starts_with("thinning")).collect();
        assert_eq!(ratios.len(), 9);
        assert!(ratios.iter().all(|c| c.tight && !c.pass));
        assert!(!r.feasible);
    }

    #[test]
    fn single_segment_has_only_the_arrival_constraint() {
        let types = vec![ty(0, 2, 4, 1.0)];
        let p = ThresholdPolicy::nested(vec![3], &types).unwrap();
        let r = validate_nested(&p, &SystemConfig::new(0.1, 0.01, 100).unwrap()).unwrap();
        assert_eq!(r.constraints.len(), 1);
    }

    #[test]
    fn unsorted_types_rejected() {
        let types = vec![ty(0, 2, 4, 1.0), ty(1, 2, 3, 1.0)];
        assert!(ThresholdPolicy::nested(vec![2, 1], &types).is_err());
    }

    #[test]
    fn theta_example() {
        let s = solve_theta(10, 6, 0.5).unwrap();
        assert!(s.theta >= 0.8 && s.theta < 0.85, "theta {}", s.theta);
        assert!(s.residual < 1e-10);
        assert!(solve_theta(10, 5, 0.5).is_err());
        assert!(solve_theta(10, 10, 0.5).is_err());
        assert!(solve_theta(10, 6, 1.0).is_err());
    }

    #[test]
    fn theta_small_drift_is_linear() {
        // n_prev * p just below n_k
        let n_prev = 1000;
        let p = 0.4995;
        let d = 500.0 - n_prev as f64 * p;
        let s = solve_theta(n_prev, 500, p).unwrap();
        let approx = 2.0 * d / (n_prev as f64 * p * (1.0 - p));
        assert!((s.theta / approx - 1.0).abs() < 0.01, "{} vs {approx}", s.theta);
    }

    fn three_segments() -> (Vec<PromptType>, ThresholdPolicy, SystemConfig) {
        let types = vec![ty(0, 4, 2, 1.0), ty(1, 4, 4, 1.0), ty(2, 4, 6, 1.0)];
        let p = ThresholdPolicy::nested(vec![6, 5, 3], &types).unwrap();
        (types, p, SystemConfig::new(0.5, 0.002, u64::MAX).unwrap())
    }

    #[test]
    fn budget_terms_and_log_law() {
        let (_, p, cfg) = three_segments();
        let b1 = nested_memory_budget(&p, &cfg, 1.0, 1000, 0.1).unwrap();
        let b2 = nested_memory_budget(&p, &cfg, 1.0, 2000, 0.1).unwrap();
        assert!((b1.total - (b1.base + b1.queue_term + b1.hp_term)).abs() < 1e-9);
        assert_eq!(b1.base, b2.base);
        assert_eq!(b1.queue_term, b2.queue_term);
        let weights = [4.0 + 2.0, 4.0 + 4.0];
        let expect: f64 = weights
            .iter()
            .zip(&b1.thetas)
            .map(|(w, th)| w * 2f64.ln() / th.unwrap())
            .sum();
        assert!((b2.hp_term - b1.hp_term - expect).abs() < 1e-9);
        let loose = nested_memory_budget(&p, &cfg, 1.0, 1000, 0.5).unwrap();
        let tight = nested_memory_budget(&p, &cfg, 1.0, 1000, 0.01).unwrap();
        assert!(tight.total > loose.total);
    }

    #[test]
    fn single_segment_budget_is_policy_memory() {
        let types = vec![ty(0, 2, 4, 1.0)];
        let p = ThresholdPolicy::nested(vec![3], &types).unwrap();
        let cfg = SystemConfig::new(0.1, 0.01, 100).unwrap();
        let b = nested_memory_budget(&p, &cfg, 1.0, 100, 0.1).unwrap();
        assert_eq!(b.total, p.policy_memory(&types).unwrap());
    }

    #[test]
    fn infeasible_budget_errors() {
        let types = ten_bins();
        let p = ThresholdPolicy::nested(vec![66, 43, 32, 24, 17, 11, 7, 4, 2, 1], &types).unwrap();
        let cfg = SystemConfig::new(1e-3, 1e-9, u64::MAX).unwrap();
        assert!(matches!(nested_memory_budget(&p, &cfg, 1.0, 10, 0.1), Err(Error::Infeasible(_))));
    }

    #[test]
    fn partitions() {
        let types: Vec<PromptType> = (0..500).map(|i| ty(i, 10, i as u32 + 1, 0.01 * (i % 7) as f64)).collect();
        let l = segment_partition(&types, 10).unwrap();
        assert_eq!(l.len(), 10);
        assert!(l.groups.iter().all(|g| g.len() == 50));
        let total: f64 = types.iter().map(|t| t.rate).sum();
        assert!((l.total_rate() - total).abs() < 1e-9);
        assert_eq!(segment_partition(&types, 1).unwrap().rates.len(), 1);
        let ident = segment_partition(&types[..5], 5).unwrap();
        assert_eq!(ident.bounds, vec![1, 2, 3, 4, 5]);
        assert!(segment_partition(&types[..5], 6).is_err());
        let rem = segment_partition(&types[..7], 3).unwrap();
        assert_eq!(rem.groups, vec![0..2, 2..4, 4..7]);
    }

    #[test]
    fn constant_rates_match_static_validation() {
        let (types, p, cfg) = three_segments();
        let fns: Vec<RateFunction> = types.iter().map(|t| RateFunction::constant(t.rate).unwrap()).collect();
        let tv = validate_time_varying(&p, &fns, 10.0, &cfg, GridOptions { points_per_window: 10, max_points: 10_000 }).unwrap();
        let st = validate_nested(&p, &cfg).unwrap();
        assert_eq!(tv.feasible, st.feasible);
        for (a, b) in tv.constraints.iter().zip(&st.constraints) {
            assert_eq!(a.pass, b.pass, "{}", a.name);
        }
    }

    #[test]
    fn spike_reaching_threshold_is_flagged() {
        let types = vec![ty(0, 4, 2, 1.0)];
        let p = ThresholdPolicy::nested(vec![4], &types).unwrap();
        let cfg = SystemConfig::new(0.5, 0.01, u64::MAX).unwrap();
        let dt = p.full_batch_time(&types, &cfg).unwrap();
        // base 1 gives dt arrivals per window; the spike fills the window to exactly n_1
        let peak = 4.0 / dt;
        let rf = RateFunction::new(RateProfile::Spike { base: 1.0, peak, start: 5.0, width: 2.0 * dt }).unwrap();
        let r = validate_time_varying(&p, &[rf], 10.0, &cfg, GridOptions::default()).unwrap();
        assert!(!r.feasible);
        assert!(r.peak_time >= 5.0 && r.peak_time <= 5.0 + dt + r.grid_step);
    }

    #[test]
    fn sinusoid_below_threshold_is_feasible() {
        let types = vec![ty(0, 4, 2, 1.0), ty(1, 4, 4, 1.0)];
        let p = ThresholdPolicy::nested(vec![8, 6], &types).unwrap();
        let cfg = SystemConfig::new(0.5, 0.01, u64::MAX).unwrap();
        let dt = p.full_batch_time(&types, &cfg).unwrap();
        // peak total rate 0.9 n_1 / dt, split evenly and in phase
        let peak_each = 0.45 * 8.0 / dt;
        let sin = RateProfile::Sinusoid { mean: peak_each / 2.0, amplitude: peak_each / 2.0, period: 20.0, phase: 0.0 };
        let fns = vec![RateFunction::new(sin.clone()).unwrap(), RateFunction::new(sin).unwrap()];
        let r = validate_time_varying(&p, &fns, 40.0, &cfg, GridOptions::default()).unwrap();
        assert!(r.feasible, "{r:?}");
        assert!(r.peak_window_arrivals < 0.9 * 8.0 + 1e-9);
    }
}
