//! Independent checks of the stochastic constructions behind the threshold
//! guarantees: the stuck-time walk and its coupled dominating process, the
//! Lindley representation, Kingman-type expectation bounds, the nested
//! Binomial coupling, memory budgets, and the FCFS overflow example.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{run, RunOptions};
use crate::error::{invalid, Result};
use crate::fluid::{scale_types, SystemConfig};
use crate::policy::{nested_memory_budget, solve_theta, MemoryBudget, ThresholdPolicy};
use crate::schedulers::NestedScheduler;
use crate::workload::{poisson_jobs, stream_rng, validate_types, PromptType};

fn poisson_sampler(lambda: f64) -> Result<Option<Poisson<f64>>> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(invalid(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(None);
    }
    Poisson::new(lambda).map(Some).map_err(|e| invalid(e.to_string()))
}

fn draw<R: Rng>(p: &Option<Poisson<f64>>, rng: &mut R) -> u64 {
    p.as_ref().map_or(0, |d| d.sample(rng) as u64)
}

/// Queue `W^{b+1} = W^b + X^b - lambda 1{W^b + X^b >= lambda}` next to the
/// coupled `V^{b+1} = max(2 lambda, V^b + X^b - lambda)`, `V^0 = 2 lambda`.
#[derive(Clone, Debug, Serialize)]
pub struct WalkTrajectory {
    pub lambda: f64,
    pub increments: Vec<u64>,
    pub queue: Vec<f64>,
    pub coupled: Vec<f64>,
    /// Iterations that served nothing.
    pub stuck_count: u64,
}

impl WalkTrajectory {
    /// `W^B = sum X - lambda (B - stuck)`.
    pub fn telescope_holds(&self) -> bool {
        let total: u64 = self.increments.iter().sum();
        let served = (self.increments.len() as u64 - self.stuck_count) as f64;
        let rhs = total as f64 - self.lambda * served;
        let lhs = *self.queue.last().unwrap_or(&0.0);
        approx_eq(lhs, rhs, total as f64 + self.lambda * served)
    }

    /// `V^b >= W^b + lambda` for every `b`.
    pub fn dominance_holds(&self) -> bool {
        self.queue
            .iter()
            .zip(&self.coupled)
            .all(|(w, v)| *v + 1e-9 * (1.0 + v.abs()) >= w + self.lambda)
    }
}

fn is_integral(x: f64) -> bool {
    x.fract() == 0.0 && x.abs() < 9.0e15
}

/// Exact for integral data, relative `1e-9` otherwise.
fn approx_eq(a: f64, b: f64, scale: f64) -> bool {
    if is_integral(a) && is_integral(b) {
        a == b
    } else {
        (a - b).abs() <= 1e-9 * (1.0 + scale.abs())
    }
}

pub fn single_type_walk(lambda: f64, batches: usize, seed: u64) -> Result<WalkTrajectory> {
    let dist = poisson_sampler(lambda)?;
    let mut rng = stream_rng(seed, 0);
    let mut w = 0.0;
    let mut v = 2.0 * lambda;
    let mut t = WalkTrajectory {
        lambda,
        increments: Vec::with_capacity(batches),
        queue: Vec::with_capacity(batches + 1),
        coupled: Vec::with_capacity(batches + 1),
        stuck_count: 0,
    };
    t.queue.push(w);
    t.coupled.push(v);
    for _ in 0..batches {
        let x = draw(&dist, &mut rng);
        let xf = x as f64;
        if lambda > 0.0 && w + xf >= lambda {
            w = w + xf - lambda;
        } else {
            w += xf;
            t.stuck_count += 1;
        }
        v = (2.0 * lambda).max(v + xf - lambda);
        t.increments.push(x);
        t.queue.push(w);
        t.coupled.push(v);
    }
    Ok(t)
}

/// Compares the max-recursion started at `2 lambda` against
/// `2 lambda + max(S_B, S_B - S_1, ..., S_B - S_{B-1}, 0)`.
pub fn lindley_check(increments: &[f64], lambda: f64) -> bool {
    let floor = 2.0 * lambda;
    let mut v = floor;
    for xi in increments {
        v = floor.max(v + xi);
    }
    let mut prefix = 0.0;
    let prefixes: Vec<f64> = std::iter::once(0.0)
        .chain(increments.iter().map(|xi| {
            prefix += xi;
            prefix
        }))
        .collect();
    let s_b = *prefixes.last().unwrap();
    let best = prefixes.iter().map(|s| s_b - s).fold(0.0, f64::max);
    let scale: f64 = increments.iter().map(|x| x.abs()).sum::<f64>() + floor;
    approx_eq(v, floor + best, scale)
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundEstimate {
    pub estimate: f64,
    pub se: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpectationReport {
    pub lambda: f64,
    pub batches: usize,
    pub samples: usize,
    /// Service `lambda` per batch; bound `lambda + sqrt(lambda) sum k^{-1/2}`.
    pub zero_drift: BoundEstimate,
    /// Service `2 lambda` per batch; bound `2n + Var / (2 drift)`.
    pub negative_drift: BoundEstimate,
}

fn final_queue<R: Rng>(dist: &Option<Poisson<f64>>, service: f64, batches: usize, rng: &mut R) -> f64 {
    let mut w = 0.0;
    for _ in 0..batches {
        let x = draw(dist, rng) as f64;
        w += x;
        if service > 0.0 && w >= service {
            w -= service;
        }
    }
    w
}

fn estimate(xs: &[f64], bound: f64) -> BoundEstimate {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let se = (var / n).sqrt();
    BoundEstimate {
        estimate: m,
        se,
        bound,
        pass: m <= bound + 3.0 * se,
    }
}

pub fn expectation_bounds_check(lambda: f64, batches: usize, n_samples: usize, seed: u64) -> Result<ExpectationReport> {
    if n_samples < 1000 {
        return Err(invalid("expectation checks need at least 1000 samples"));
    }
    let dist = poisson_sampler(lambda)?;
    let zero: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|i| final_queue(&dist, lambda, batches, &mut stream_rng(seed, 2 * i as u64)))
        .collect();
    let n = 2.0 * lambda;
    let neg: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|i| final_queue(&dist, n, batches, &mut stream_rng(seed, 2 * i as u64 + 1)))
        .collect();
    let harmonic: f64 = (1..=batches).map(|k| (k as f64).powf(-0.5)).sum();
    let kingman = if lambda > 0.0 { 2.0 * n + lambda / (2.0 * (n - lambda)) } else { 0.0 };
    Ok(ExpectationReport {
        lambda,
        batches,
        samples: n_samples,
        zero_drift: estimate(&zero, lambda + lambda.sqrt() * harmonic),
        negative_drift: estimate(&neg, kingman),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CouplingReport {
    pub dominance: bool,
    pub max_queue: u64,
    /// Tail level `c = n_k + 5`.
    pub tail_level: u64,
    /// Fraction of batches with `W >= c`.
    pub tail_fraction: f64,
    /// Batch-means standard error of `tail_fraction`.
    pub tail_se: f64,
    /// `exp(-theta (c - n_k))`, zero when the queue cannot reach `c`.
    pub doob_bound: f64,
    pub theta: Option<f64>,
    pub tail_pass: bool,
}

/// Segment queue fed by `Binomial(n_prev, p)` survivors and served `n_k` at
/// a time, next to `V = max(n_k, V + Y - n_k)` with `V^0 = n_k`.
pub fn nested_coupling_check(n_prev: u32, n_k: u32, p: f64, batches: usize, seed: u64) -> Result<CouplingReport> {
    if !(0.0..1.0).contains(&p) || n_k == 0 || n_k > n_prev || n_k as f64 <= n_prev as f64 * p {
        return Err(invalid(format!(
            "need n_prev >= n_k > n_prev * p and p in [0, 1), got {n_prev}, {n_k}, {p}"
        )));
    }
    let dist = Binomial::new(n_prev as u64, p).map_err(|e| invalid(e.to_string()))?;
    let mut rng = stream_rng(seed, 0);
    let nk = n_k as i64;
    let c = n_k as u64 + 5;
    let (mut w, mut v) = (0i64, nk);
    let mut dominance = true;
    let mut max_queue = 0u64;
    let chunks = 20usize;
    let chunk_len = (batches / chunks).max(1);
    let mut chunk_hits = vec![0u64; chunks];
    let mut hits = 0u64;
    for b in 0..batches {
        let y = dist.sample(&mut rng) as i64;
        w = if w + y >= nk { w + y - nk } else { w + y };
        v = nk.max(v + y - nk);
        dominance &= v >= w;
        max_queue = max_queue.max(w as u64);
        if w as u64 >= c {
            hits += 1;
            chunk_hits[(b / chunk_len).min(chunks - 1)] += 1;
        }
    }
    let tail_fraction = if batches > 0 { hits as f64 / batches as f64 } else { 0.0 };
    let means: Vec<f64> = chunk_hits.iter().map(|&h| h as f64 / chunk_len as f64).collect();
    let m = means.iter().sum::<f64>() / chunks as f64;
    let tail_se = (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ((chunks - 1) * chunks) as f64).sqrt();
    let theta = if p > 0.0 && n_k < n_prev {
        Some(solve_theta(n_prev, n_k, p)?.theta)
    } else {
        None
    };
    let doob_bound = theta.map_or(0.0, |th| (-th * (c - n_k as u64) as f64).exp());
    Ok(CouplingReport {
        dominance,
        max_queue,
        tail_level: c,
        tail_fraction,
        tail_se,
        doob_bound,
        theta,
        tail_pass: tail_fraction <= doob_bound + 3.0 * tail_se,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MemoryCheckReport {
    pub budget: MemoryBudget,
    pub capacity: u64,
    pub runs: usize,
    pub violations: usize,
    pub violation_rate: f64,
    pub max_peak_demand: u64,
    pub invariant_violations: u64,
}

/// Runs Nested WAIT `n_runs` times for `batches` iterations with capacity set
/// to the memory budget (or `capacity` when given) and counts runs whose batch
/// demand ever exceeded it.
#[allow(clippy::too_many_arguments)]
pub fn memory_bound_check(
    policy: &ThresholdPolicy,
    types: &[PromptType],
    cfg: &SystemConfig,
    zeta: f64,
    batches: u64,
    delta: f64,
    n_runs: usize,
    seed: u64,
    capacity: Option<u64>,
) -> Result<MemoryCheckReport> {
    validate_types(types)?;
    let budget = nested_memory_budget(policy, cfg, zeta, batches, delta)?;
    let cap = capacity.unwrap_or(budget.total.floor() as u64);
    let scaled_types = scale_types(types, zeta);
    let scaled_cfg = SystemConfig { capacity: cap, ..cfg.scaled(zeta) };
    let full = policy.full_batch_time(&scaled_types, &scaled_cfg)?;
    // enough arrivals for `batches` iterations even when every one is full
    let horizon = 2.0 * batches as f64 * full;
    let opts = RunOptions {
        horizon,
        max_iterations: Some(batches),
        check_invariants: true,
        trace_events: false,
    };
    let runs: Vec<(bool, u64, u64)> = (0..n_runs)
        .into_par_iter()
        .map(|i| {
            let jobs = poisson_jobs(&scaled_types, horizon, seed.wrapping_add(i as u64))?;
            let mut s = NestedScheduler::new(policy)?;
            let out = run(&mut s, &jobs, &scaled_cfg, &opts)?;
            Ok((out.peak_requested > cap, out.peak_requested, out.invariant_violations))
        })
        .collect::<Result<_>>()?;
    let violations = runs.iter().filter(|r| r.0).count();
    Ok(MemoryCheckReport {
        budget,
        capacity: cap,
        runs: n_runs,
        violations,
        violation_rate: violations as f64 / n_runs.max(1) as f64,
        max_peak_demand: runs.iter().map(|r| r.1).max().unwrap_or(0),
        invariant_violations: runs.iter().map(|r| r.2).sum(),
    })
}

/// Stage-count FCFS model started at the integer equilibrium (one prompt per
/// stage per type). One iteration receives Poisson arrivals, the following
/// `max l'` iterations receive their mean; every present prompt is processed.
/// Returns the memory of each iteration.
pub fn fcfs_lookahead_memory(types: &[PromptType], shock: &[u64], mean_arrivals: &[u64]) -> Vec<u64> {
    let depth = types.iter().map(|t| t.decode_len as usize).max().unwrap_or(0);
    let mut stages: Vec<Vec<u64>> = types.iter().map(|t| vec![1; t.decode_len as usize + 1]).collect();
    let mut mems = Vec::with_capacity(depth + 1);
    for step in 0..=depth {
        for (j, st) in stages.iter_mut().enumerate() {
            st.rotate_right(1);
            st[0] = if step == 0 { shock[j] } else { mean_arrivals[j] };
        }
        let mem = stages
            .iter()
            .zip(types)
            .map(|(st, t)| {
                st.iter()
                    .enumerate()
                    .map(|(s, n)| n * (t.prefill_len as u64 + s as u64))
                    .sum::<u64>()
            })
            .sum();
        mems.push(mem);
    }
    mems
}

#[derive(Clone, Debug, Serialize)]
pub struct OverflowReport {
    pub samples: usize,
    pub estimate: f64,
    pub se: f64,
    /// Summed over arrival vectors up to a truncation with negligible mass.
    pub exact: f64,
    pub safe_set: Vec<Vec<u64>>,
}

/// Probability that one Poisson iteration from equilibrium pushes FCFS over
/// `cfg.capacity` within the next pipeline pass. Per-iteration arrival means
/// are `lambda_j * dT`, with `dT` the equilibrium iteration time.
pub fn fcfs_overflow_probability(
    types: &[PromptType],
    cfg: &SystemConfig,
    delta_t: f64,
    samples: usize,
    seed: u64,
) -> Result<OverflowReport> {
    validate_types(types)?;
    let means: Vec<f64> = types.iter().map(|t| t.rate * delta_t).collect();
    let mean_int: Vec<u64> = means.iter().map(|m| m.round() as u64).collect();
    let dists = means.iter().map(|&m| poisson_sampler(m)).collect::<Result<Vec<_>>>()?;
    let overflows = |x: &[u64]| fcfs_lookahead_memory(types, x, &mean_int).iter().any(|&m| m > cfg.capacity);

    let mut rng = stream_rng(seed, 0);
    let mut hits = 0usize;
    let mut x = vec![0u64; types.len()];
    for _ in 0..samples {
        for (xj, d) in x.iter_mut().zip(&dists) {
            *xj = draw(d, &mut rng);
        }
        hits += overflows(&x) as usize;
    }
    let estimate = hits as f64 / samples.max(1) as f64;

    // exact sum over a box covering all but ~1e-12 of each marginal
    let caps: Vec<u64> = means.iter().map(|m| (m + 12.0 * m.sqrt() + 30.0).ceil() as u64).collect();
    let pmf = |m: f64, k: u64| -> f64 {
        if m == 0.0 {
            return if k == 0 { 1.0 } else { 0.0 };
        }
        (-m + k as f64 * m.ln() - (1..=k).map(|i| (i as f64).ln()).sum::<f64>()).exp()
    };
    let mut safe_mass = 0.0;
    let mut safe_set = Vec::new();
    let mut idx = vec![0u64; types.len()];
    'outer: loop {
        if !overflows(&idx) {
            safe_mass += idx.iter().zip(&means).map(|(&k, &m)| pmf(m, k)).product::<f64>();
            safe_set.push(idx.clone());
        }
        for j in 0..idx.len() {
            idx[j] += 1;
            if idx[j] <= caps[j] {
                continue 'outer;
            }
            idx[j] = 0;
        }
        break;
    }
    Ok(OverflowReport {
        samples,
        estimate,
        se: (estimate * (1.0 - estimate) / samples.max(1) as f64).sqrt(),
        exact: 1.0 - safe_mass,
        safe_set,
    })
}

/// Fluid iteration time by fixed-point iteration `dT <- d0 + d1 * dT * A`,
/// independent of the closed form.
pub fn fixed_point_delta_t(types: &[PromptType], cfg: &SystemConfig) -> Option<f64> {
    let a: f64 = types
        .iter()
        .map(|t| {
            let mut per_prompt = 0.0;
            for s in 0..=t.decode_len {
                per_prompt += (t.prefill_len + s) as f64;
            }
            t.rate * per_prompt
        })
        .sum();
    if cfg.d1 * a >= 1.0 {
        return None;
    }
    let mut dt = cfg.d0;
    for _ in 0..100_000 {
        let next = cfg.d0 + cfg.d1 * dt * a;
        if (next - dt).abs() <= 1e-15 * next {
            return Some(next);
        }
        dt = next;
    }
    Some(dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lambda_walk_is_all_stuck() {
        let t = single_type_walk(0.0, 50, 1).unwrap();
        assert!(t.queue.iter().all(|w| *w == 0.0));
        assert_eq!(t.stuck_count, 50);
        assert!(t.telescope_holds() && t.dominance_holds());
    }

    #[test]
    fn walk_identities_hold() {
        for seed in 0..20 {
            let t = single_type_walk(4.0, 500, seed).unwrap();
            assert!(t.telescope_holds());
            assert!(t.dominance_holds());
        }
    }

    #[test]
    fn lindley_small_cases() {
        assert!(lindley_check(&[0.0, 0.0, 0.0], 4.0));
        assert!(lindley_check(&[3.0], 4.0));
        assert!(lindley_check(&[-4.0, 5.0, -1.0, 2.0], 4.0));
        assert!(lindley_check(&[], 1.0));
    }

    #[test]
    fn coupling_trivial_cases() {
        let r = nested_coupling_check(10, 3, 0.0, 1000, 1).unwrap();
        assert_eq!(r.max_queue, 0);
        assert!(r.dominance);
        let r = nested_coupling_check(10, 10, 0.7, 5000, 2).unwrap();
        assert!(r.max_queue < 10);
        assert!(nested_coupling_check(10, 5, 0.5, 10, 1).is_err());
    }

    #[test]
    fn two_type_safe_set() {
        let types = vec![PromptType::new(0, 1, 1, 1.0).unwrap(), PromptType::new(1, 1, 2, 1.0).unwrap()];
        let cfg = SystemConfig::new(0.5, 1.0 / 18.0, 9).unwrap();
        assert_eq!(fcfs_lookahead_memory(&types, &[1, 1], &[1, 1]), vec![9, 9, 9]);
        assert_eq!(fcfs_lookahead_memory(&types, &[2, 3], &[1, 1]), vec![12, 15, 15]);
        let r = fcfs_overflow_probability(&types, &cfg, 1.0, 1000, 3).unwrap();
        let mut safe = r.safe_set.clone();
        safe.sort();
        assert_eq!(safe, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1], vec![2, 0]]);
        assert!((r.exact - (1.0 - 4.5 * (-2f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_agrees_with_closed_form() {
        let types = vec![PromptType::new(0, 1, 1, 1.0).unwrap(), PromptType::new(1, 1, 2, 1.0).unwrap()];
        let cfg = SystemConfig::new(0.5, 1.0 / 18.0, 9).unwrap();
        assert!((fixed_point_delta_t(&types, &cfg).unwrap() - 1.0).abs() < 1e-12);
    }
}
