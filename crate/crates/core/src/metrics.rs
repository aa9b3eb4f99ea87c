//! Run summaries, throughput gaps and the zeta-scaling sweep.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::SimOutcome;
use crate::error::{invalid, Error, Result};
use crate::fluid::fluid_throughput;
use crate::scenario::Scenario;
use crate::workload::PromptType;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TypeMetrics {
    pub type_id: usize,
    pub arrivals: usize,
    pub completions: usize,
    pub throughput_tps: f64,
    pub mean_latency_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scheduler: String,
    pub horizon: f64,
    pub iterations: u64,
    pub completions: usize,
    pub completed_tokens: u64,
    /// Decode tokens of completed prompts per second.
    pub throughput_tps: f64,
    /// Over completed prompts, from original arrival.
    pub mean_latency_s: Option<f64>,
    /// Over completed prompts.
    pub mean_ttft_s: Option<f64>,
    pub evictions: usize,
    pub restarts_total: u64,
    pub completions_per_iteration: f64,
    pub fluid_throughput_tps: f64,
    /// `fluid - throughput`.
    pub gap_tps: f64,
    /// Set when the gap came out negative (sampling noise at short horizons).
    pub gap_negative: bool,
    pub arrived_tokens: u64,
    /// `(arrived - completed tokens) / horizon`; same mean as `gap_tps`,
    /// far less arrival noise.
    pub backlog_gap_tps: f64,
    pub invariant_violations: u64,
    pub per_type: Vec<TypeMetrics>,
    /// `(time, waiting per class)` at every traced event.
    pub queue_trace: Vec<(f64, Vec<usize>)>,
    /// `(time, memory_used)` at every traced event.
    pub memory_trace: Vec<(f64, u64)>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

pub fn finalize(out: &SimOutcome, types: &[PromptType]) -> Result<MetricsReport> {
    let horizon = out.horizon;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(invalid(format!("metrics need a positive finite horizon, got {horizon}")));
    }
    let per_sec = |x: f64| x / horizon;
    let completed_tokens: u64 = out.completed().map(|p| p.decode_len as u64).sum();
    let arrived_tokens: u64 = out.prompts.iter().map(|p| p.decode_len as u64).sum();
    let throughput = per_sec(completed_tokens as f64);
    let fluid = fluid_throughput(types);
    let completions = out.completions();
    let per_type = types
        .iter()
        .map(|t| {
            let done: Vec<_> = out.completed().filter(|p| p.type_id == t.id).collect();
            TypeMetrics {
                type_id: t.id,
                arrivals: out.prompts.iter().filter(|p| p.type_id == t.id).count(),
                completions: done.len(),
                throughput_tps: per_sec(done.iter().map(|p| p.decode_len as f64).sum()),
                mean_latency_s: mean(done.iter().map(|p| p.completion_time.unwrap() - p.arrival_time)),
            }
        })
        .collect();
    Ok(MetricsReport {
        scheduler: out.scheduler.clone(),
        horizon,
        iterations: out.iterations,
        completions,
        completed_tokens,
        throughput_tps: throughput,
        mean_latency_s: mean(out.completed().map(|p| p.completion_time.unwrap() - p.arrival_time)),
        mean_ttft_s: mean(out.completed().filter_map(|p| p.first_token_time.map(|t| t - p.arrival_time))),
        evictions: out.evictions.len(),
        restarts_total: out.prompts.iter().map(|p| p.restarts as u64).sum(),
        completions_per_iteration: if out.iterations > 0 {
            completions as f64 / out.iterations as f64
        } else {
            0.0
        },
        fluid_throughput_tps: fluid,
        gap_tps: fluid - throughput,
        gap_negative: fluid < throughput,
        arrived_tokens,
        backlog_gap_tps: per_sec(arrived_tokens as f64 - completed_tokens as f64),
        invariant_violations: out.invariant_violations,
        per_type,
        queue_trace: out.events.iter().map(|e| (e.time, e.queue_lengths.clone())).collect(),
        memory_trace: out.events.iter().map(|e| (e.time, e.memory_used)).collect(),
    })
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub scheduler: String,
    pub zeta: f64,
    pub seed: u64,
    pub throughput_tps: f64,
    pub mean_latency_s: Option<f64>,
    pub mean_ttft_s: Option<f64>,
    pub completions: usize,
    pub evictions: usize,
    pub gap_tps: f64,
}

impl MetricsRow {
    pub fn new(report: &MetricsReport, zeta: f64, seed: u64) -> Self {
        Self {
            scheduler: report.scheduler.clone(),
            zeta,
            seed,
            throughput_tps: report.throughput_tps,
            mean_latency_s: report.mean_latency_s,
            mean_ttft_s: report.mean_ttft_s,
            completions: report.completions,
            evictions: report.evictions,
            gap_tps: report.gap_tps,
        }
    }
}

pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Internal(e.to_string()))?;
    Ok(())
}

/// One `(zeta, seed)` run of a sweep. Gaps here are divided by `zeta`, so
/// every zeta is measured in the unscaled system's units.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub scheduler: String,
    pub zeta: f64,
    pub seed: u64,
    pub horizon: f64,
    pub throughput_tps: f64,
    pub gap: f64,
    pub backlog_gap: f64,
    pub evictions: usize,
}

pub fn scaling_sweep(scenario: &Scenario, zetas: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let grid: Vec<(f64, u64)> = zetas.iter().flat_map(|&z| seeds.iter().map(move |&s| (z, s))).collect();
    grid.par_iter()
        .map(|&(zeta, seed)| {
            let scaled = scenario.scaled(zeta);
            let out = scaled.run_seed(seed)?;
            let r = finalize(&out, &scaled.types)?;
            Ok(SweepRow {
                scheduler: r.scheduler,
                zeta,
                seed,
                horizon: r.horizon,
                throughput_tps: r.throughput_tps,
                gap: r.gap_tps / zeta,
                backlog_gap: r.backlog_gap_tps / zeta,
                evictions: r.evictions,
            })
        })
        .collect()
}

/// Per-zeta aggregate of a sweep (a line of `sweep.csv`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub scheduler: String,
    pub zeta: f64,
    pub runs: usize,
    pub mean_throughput_tps: f64,
    pub mean_gap: f64,
    pub se_gap: f64,
    pub mean_backlog_gap: f64,
    pub se_backlog_gap: f64,
    /// `mean_backlog_gap * zeta * T`.
    pub gap_times_zt: f64,
    /// `mean_backlog_gap * sqrt(zeta * T)`.
    pub gap_times_sqrt_zt: f64,
    pub mean_evictions: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut zetas: Vec<f64> = rows.iter().map(|r| r.zeta).collect();
    zetas.sort_by(f64::total_cmp);
    zetas.dedup();
    zetas
        .into_iter()
        .map(|zeta| {
            let rs: Vec<&SweepRow> = rows.iter().filter(|r| r.zeta == zeta).collect();
            let horizon = rs[0].horizon;
            let (g, gse) = mean_se(&rs.iter().map(|r| r.gap).collect::<Vec<_>>());
            let (b, bse) = mean_se(&rs.iter().map(|r| r.backlog_gap).collect::<Vec<_>>());
            let zt = zeta * horizon;
            SweepSummary {
                scheduler: rs[0].scheduler.clone(),
                zeta,
                runs: rs.len(),
                mean_throughput_tps: rs.iter().map(|r| r.throughput_tps).sum::<f64>() / rs.len() as f64,
                mean_gap: g,
                se_gap: gse,
                mean_backlog_gap: b,
                se_backlog_gap: bse,
                gap_times_zt: b * zt,
                gap_times_sqrt_zt: b * zt.sqrt(),
                mean_evictions: rs.iter().map(|r| r.evictions as f64).sum::<f64>() / rs.len() as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, RunOptions};
    use crate::fluid::SystemConfig;
    use crate::policy::ThresholdPolicy;
    use crate::scenario::SchedulerSpec;
    use crate::schedulers::{BaselineConfig, FcfsScheduler, Priority, WaitScheduler};
    use crate::workload::{poisson_jobs, Job};

    #[test]
    fn empty_run_has_zero_throughput() {
        let types = vec![PromptType::new(0, 1, 1, 1.0).unwrap()];
        let cfg = SystemConfig::new(0.5, 0.1, 100).unwrap();
        let mut s = WaitScheduler::new(&ThresholdPolicy::wait(vec![1]).unwrap()).unwrap();
        let out = run(&mut s, &[], &cfg, &RunOptions::horizon(10.0)).unwrap();
        let r = finalize(&out, &types).unwrap();
        assert_eq!(r.throughput_tps, 0.0);
        assert_eq!(r.mean_latency_s, None);
        assert_eq!(r.gap_tps, 1.0);
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let types = vec![PromptType::new(0, 1, 1, 1.0).unwrap()];
        let cfg = SystemConfig::new(0.5, 0.1, 100).unwrap();
        let mut s = WaitScheduler::new(&ThresholdPolicy::wait(vec![1]).unwrap()).unwrap();
        let out = run(&mut s, &[], &cfg, &RunOptions::horizon(0.0)).unwrap();
        assert!(finalize(&out, &types).is_err());
    }

    #[test]
    fn one_prompt_throughput() {
        let types = vec![PromptType::new(0, 1, 10, 1.0).unwrap()];
        let cfg = SystemConfig::new(0.1, 0.01, 100).unwrap();
        let jobs = vec![Job { time: 0.0, type_id: 0, prefill_len: 1, decode_len: 10 }];
        let mut s = FcfsScheduler::new(BaselineConfig { max_tokens: 100, max_prompts: 10, priority: Priority::NewFirst }).unwrap();
        let out = run(&mut s, &jobs, &cfg, &RunOptions::horizon(10.0)).unwrap();
        let r = finalize(&out, &types).unwrap();
        assert_eq!(r.throughput_tps, 1.0);
        assert!(r.mean_latency_s.unwrap() >= r.mean_ttft_s.unwrap());
    }

    #[test]
    fn unfinished_prompts_do_not_count() {
        let types = vec![PromptType::new(0, 1, 5, 1.0).unwrap()];
        let cfg = SystemConfig::new(1.0, 0.1, 100).unwrap();
        let jobs = vec![Job { time: 0.0, type_id: 0, prefill_len: 1, decode_len: 5 }];
        let mut s = FcfsScheduler::new(BaselineConfig { max_tokens: 100, max_prompts: 10, priority: Priority::NewFirst }).unwrap();
        // horizon ends mid-decode
        let out = run(&mut s, &jobs, &cfg, &RunOptions::horizon(3.0)).unwrap();
        let r = finalize(&out, &types).unwrap();
        assert_eq!(r.completed_tokens, 0);
        assert_eq!(r.arrived_tokens, 5);
        assert!(r.mean_ttft_s.is_none());
        assert!(out.prompts[0].first_token_time.is_some());
    }

    #[test]
    fn single_row_sweep_matches_finalize() {
        let types = vec![PromptType::new(0, 1, 1, 4.0).unwrap()];
        let cfg = SystemConfig::new(0.5, 1.0 / 24.0, 1000).unwrap();
        let sc = Scenario::new(cfg, types.clone(), SchedulerSpec::Wait { thresholds: Some(vec![5]), batch_budget: None }, 100.0);
        let rows = scaling_sweep(&sc, &[1.0], &[3]).unwrap();
        assert_eq!(rows.len(), 1);
        let jobs = poisson_jobs(&types, 100.0, 3).unwrap();
        let mut s = WaitScheduler::new(&ThresholdPolicy::wait(vec![5]).unwrap()).unwrap();
        let r = finalize(&run(&mut s, &jobs, &cfg, &RunOptions::horizon(100.0)).unwrap(), &types).unwrap();
        assert_eq!(rows[0].throughput_tps, r.throughput_tps);
        assert_eq!(rows[0].gap, r.gap_tps);
        let summary = summarize_sweep(&rows);
        assert_eq!(summary.len(), 1);
        assert_eq!(summary[0].se_gap, 0.0);
    }
}
