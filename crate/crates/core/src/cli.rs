//! Command-line front end: `fluid`, `validate`, `run`, `sweep`, `compare`
//! and `oracle`.
//!
//! Exit codes: 0 success, 1 usage/config/IO error, 2 unstable system,
//! 3 infeasible policy or oracle violation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::engine::SimOutcome;
use crate::error::{Error, Result};
use crate::fluid::{solve_equilibrium, SystemConfig};
use crate::metrics::{finalize, scaling_sweep, summarize_sweep, write_csv, MetricsReport, MetricsRow};
use crate::oracle::{
    expectation_bounds_check, fcfs_overflow_probability, lindley_check, memory_bound_check, nested_coupling_check,
    single_type_walk,
};
use crate::policy::{
    nested_memory_budget, solve_theta, validate_nested, validate_time_varying, validate_wait, GridOptions,
    PolicyKind, ThresholdPolicy,
};
use crate::scenario::{Scenario, SchedulerSpec};
use crate::workload::{PromptType, RateFunction};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_UNSTABLE: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "kvwait", version, about = "Threshold batching for memory-constrained LLM inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the fluid equilibrium of a scenario.
    Fluid {
        config: PathBuf,
    },
    /// Check the configured thresholds against their feasibility conditions.
    Validate {
        config: PathBuf,
        /// Failure probability for the nested memory budget.
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        /// Batch count for the nested memory budget.
        #[arg(long, default_value_t = 1000)]
        batches: u64,
    },
    /// Run every configured seed once and write metrics.csv.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the zeta-scaling sweep and write sweep.csv and sweep_runs.csv.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every scheduler of `[compare]` at every rate scale.
    Compare {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run oracle checks and print their reports as JSON.
    Oracle {
        #[arg(value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Nested scenario for the memory check; a built-in one otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random paths for the pathwise checks.
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    All,
    Walk,
    Expectation,
    Coupling,
    Theta,
    Memory,
    Overflow,
}

/// Parses `args` (program name first) and runs the command.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Unstable { .. } => EXIT_UNSTABLE,
        Error::Infeasible(_) => EXIT_VIOLATION,
        _ => EXIT_ERROR,
    }
}

pub fn execute(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Fluid { config } => cmd_fluid(&Scenario::from_path(config)?),
        Command::Validate { config, delta, batches } => cmd_validate(&Scenario::from_path(config)?, *delta, *batches),
        Command::Run { config, out } => {
            let s = Scenario::from_path(config)?;
            cmd_run(&s, out.as_deref().unwrap_or(&s.output_dir))
        }
        Command::Sweep { config, out } => {
            let s = Scenario::from_path(config)?;
            cmd_sweep(&s, out.as_deref().unwrap_or(&s.output_dir))
        }
        Command::Compare { config, out } => {
            let s = Scenario::from_path(config)?;
            cmd_compare(&s, out.as_deref().unwrap_or(&s.output_dir))
        }
        Command::Oracle {
            suite,
            config,
            seed,
            paths,
        } => {
            let scenario = config.as_deref().map(Scenario::from_path).transpose()?;
            cmd_oracle(*suite, scenario.as_ref(), *seed, *paths)
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Internal(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn cmd_fluid(s: &Scenario) -> Result<i32> {
    match solve_equilibrium(&s.types, &s.system) {
        Ok(eq) => {
            println!(
                "M* = {} tokens, dT = {} s, throughput* = {} tokens/s, margin = {}",
                eq.memory, eq.delta_t, eq.throughput, eq.margin
            );
            println!("{}", to_json(&eq)?);
            Ok(EXIT_OK)
        }
        Err(Error::Unstable { margin }) => {
            println!("UNSTABLE: stability margin {margin}");
            Ok(EXIT_UNSTABLE)
        }
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct ValidateOutput<'a, R: Serialize> {
    feasible: bool,
    report: &'a R,
    #[serde(skip_serializing_if = "Option::is_none")]
    memory_budget: Option<crate::policy::MemoryBudget>,
}

pub fn cmd_validate(s: &Scenario, delta: f64, batches: u64) -> Result<i32> {
    let policy = s
        .policy()?
        .ok_or_else(|| Error::Config("validate needs a threshold scheduler, not fcfs".into()))?;
    if let SchedulerSpec::TimeVaryingNested { .. } = s.scheduler {
        let fns = match &s.profiles {
            Some(p) => p.clone(),
            None => s.types.iter().map(|t| RateFunction::constant(t.rate)).collect::<Result<_>>()?,
        };
        let r = validate_time_varying(&policy, &fns, s.horizon, &s.system, GridOptions::default())?;
        print_constraints(r.feasible, &r.constraints);
        println!("{}", to_json(&ValidateOutput { feasible: r.feasible, report: &r, memory_budget: None })?);
        return Ok(if r.feasible { EXIT_OK } else { EXIT_VIOLATION });
    }
    let r = match policy.kind {
        PolicyKind::Wait => {
            let eq = match solve_equilibrium(&s.types, &s.system) {
                Ok(eq) => eq,
                Err(Error::Unstable { margin }) => {
                    println!("UNSTABLE: stability margin {margin}");
                    return Ok(EXIT_UNSTABLE);
                }
                Err(e) => return Err(e),
            };
            validate_wait(&policy, &s.types, &s.system, &eq)?
        }
        _ => validate_nested(&policy, &s.system)?,
    };
    let budget = if r.feasible && policy.kind != PolicyKind::Wait {
        Some(nested_memory_budget(&policy, &s.system, s.zeta, batches, delta)?)
    } else {
        None
    };
    print_constraints(r.feasible, &r.constraints);
    if let Some(b) = &budget {
        println!("memory budget (delta = {delta}, B = {batches}): {} tokens", b.total);
    }
    println!("{}", to_json(&ValidateOutput { feasible: r.feasible, report: &r, memory_budget: budget })?);
    Ok(if r.feasible { EXIT_OK } else { EXIT_VIOLATION })
}

fn print_constraints(feasible: bool, cs: &[crate::policy::Constraint]) {
    println!("{}", if feasible { "FEASIBLE" } else { "INFEASIBLE" });
    for c in cs {
        let status = if !c.pass {
            "FAIL"
        } else if c.tight {
            "tight"
        } else {
            "ok"
        };
        println!("  {:<24} lhs = {:<14.6} rhs = {:<14.6} slack = {:<14.6} {status}", c.name, c.lhs, c.rhs, c.slack);
    }
}

/// Runs one seed and returns the outcome with its metrics.
pub fn run_one(s: &Scenario, seed: u64) -> Result<(SimOutcome, MetricsReport)> {
    let out = s.run_seed(seed)?;
    let report = finalize(&out, &s.types)?;
    Ok((out, report))
}

/// Writes `metrics.csv`, `metrics.json` and, when traced, `events_seed{n}.csv`.
pub fn cmd_run(s: &Scenario, dir: &Path) -> Result<i32> {
    create_dir(dir)?;
    let results = s
        .seeds
        .par_iter()
        .map(|&seed| run_one(s, seed).map(|r| (seed, r)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (seed, (out, report)) in &results {
        rows.push(MetricsRow::new(report, s.zeta, *seed));
        if s.trace_events {
            let path = dir.join(format!("events_seed{seed}.csv"));
            out.write_events_csv(create_file(&path)?)?;
        }
        reports.push(report);
    }
    write_csv(create_file(&dir.join("metrics.csv"))?, &rows)?;
    write_text(&dir.join("metrics.json"), &to_json(&rows)?)?;
    for r in &rows {
        println!(
            "{} seed {}: {:.4} tokens/s, {} completions, {} evictions",
            r.scheduler, r.seed, r.throughput_tps, r.completions, r.evictions
        );
    }
    let violations: u64 = reports.iter().map(|r| r.invariant_violations).sum();
    if violations > 0 {
        eprintln!("{violations} invariant violations");
        return Ok(EXIT_VIOLATION);
    }
    Ok(EXIT_OK)
}

pub fn cmd_sweep(s: &Scenario, dir: &Path) -> Result<i32> {
    create_dir(dir)?;
    let rows = scaling_sweep(s, &s.zetas, &s.seeds)?;
    let summary = summarize_sweep(&rows);
    write_csv(create_file(&dir.join("sweep_runs.csv"))?, &rows)?;
    write_csv(create_file(&dir.join("sweep.csv"))?, &summary)?;
    write_text(&dir.join("sweep.json"), &to_json(&summary)?)?;
    for r in &summary {
        println!(
            "zeta {}: gap {:.6} (se {:.6}), gap*zT {:.4}, gap*sqrt(zT) {:.4}",
            r.zeta, r.mean_backlog_gap, r.se_backlog_gap, r.gap_times_zt, r.gap_times_sqrt_zt
        );
    }
    Ok(EXIT_OK)
}

/// One line of `compare.csv`.
#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub scheduler: String,
    pub rate_scale: f64,
    pub seeds: usize,
    pub throughput_tps: f64,
    pub mean_latency_s: Option<f64>,
    pub mean_ttft_s: Option<f64>,
    pub completions: f64,
    pub evictions: f64,
    pub invariant_violations: u64,
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn compare_rows(s: &Scenario) -> Result<Vec<CompareRow>> {
    let spec = s
        .compare
        .as_ref()
        .ok_or_else(|| Error::Config("compare needs a [compare] section".into()))?;
    let mut rows = Vec::new();
    for &scale in &spec.rate_scales {
        let scaled = s.with_rate_scale(scale);
        for sched in &spec.schedulers {
            let sc = scaled.with_scheduler(sched.clone());
            let reports = s
                .seeds
                .par_iter()
                .map(|&seed| run_one(&sc, seed).map(|r| r.1))
                .collect::<Result<Vec<_>>>()?;
            let n = reports.len() as f64;
            rows.push(CompareRow {
                scheduler: reports.first().map(|r| r.scheduler.clone()).unwrap_or_default(),
                rate_scale: scale,
                seeds: reports.len(),
                throughput_tps: reports.iter().map(|r| r.throughput_tps).sum::<f64>() / n,
                mean_latency_s: mean_opt(reports.iter().map(|r| r.mean_latency_s)),
                mean_ttft_s: mean_opt(reports.iter().map(|r| r.mean_ttft_s)),
                completions: reports.iter().map(|r| r.completions as f64).sum::<f64>() / n,
                evictions: reports.iter().map(|r| r.evictions as f64).sum::<f64>() / n,
                invariant_violations: reports.iter().map(|r| r.invariant_violations).sum(),
            });
        }
    }
    Ok(rows)
}

pub fn cmd_compare(s: &Scenario, dir: &Path) -> Result<i32> {
    create_dir(dir)?;
    let rows = compare_rows(s)?;
    write_csv(create_file(&dir.join("compare.csv"))?, &rows)?;
    write_text(&dir.join("compare.json"), &to_json(&rows)?)?;
    for r in &rows {
        println!(
            "x{} {:<20} {:.4} tokens/s, latency {:?} s, {:.1} evictions",
            r.rate_scale, r.scheduler, r.throughput_tps, r.mean_latency_s, r.evictions
        );
    }
    Ok(EXIT_OK)
}

#[derive(Clone, Debug, Serialize)]
pub struct WalkSuite {
    pub paths: usize,
    pub telescope_violations: usize,
    pub dominance_violations: usize,
    pub lindley_violations: usize,
}

/// Telescope, dominance and Lindley identities on `paths` single-type walks
/// with lambda cycling through a small grid.
pub fn walk_suite(paths: usize, batches: usize, seed: u64) -> Result<WalkSuite> {
    const LAMBDAS: [f64; 5] = [0.5, 1.0, 3.0, 4.0, 10.0];
    let res = (0..paths)
        .into_par_iter()
        .map(|i| {
            let lambda = LAMBDAS[i % LAMBDAS.len()];
            let t = single_type_walk(lambda, batches, seed.wrapping_add(i as u64))?;
            let inc: Vec<f64> = t.increments.iter().map(|&x| x as f64 - lambda).collect();
            Ok((t.telescope_holds(), t.dominance_holds(), lindley_check(&inc, lambda)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WalkSuite {
        paths,
        telescope_violations: res.iter().filter(|r| !r.0).count(),
        dominance_violations: res.iter().filter(|r| !r.1).count(),
        lindley_violations: res.iter().filter(|r| !r.2).count(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CouplingSuite {
    pub paths: usize,
    pub dominance_violations: usize,
    pub tail_failures: usize,
}

/// Nested Binomial coupling on `paths` paths over a grid of
/// `(n_prev, n_k, p)` with `n_prev p < n_k <= n_prev`.
pub fn coupling_suite(paths: usize, batches: usize, seed: u64) -> Result<CouplingSuite> {
    const GRID: [(u32, u32, f64); 6] = [
        (6, 5, 0.5),
        (5, 3, 0.5),
        (10, 7, 0.6),
        (20, 5, 0.2),
        (8, 8, 0.9),
        (12, 9, 0.7),
    ];
    let res = (0..paths)
        .into_par_iter()
        .map(|i| {
            let (a, b, p) = GRID[i % GRID.len()];
            nested_coupling_check(a, b, p, batches, seed.wrapping_add(i as u64)).map(|r| (r.dominance, r.tail_pass))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CouplingSuite {
        paths,
        dominance_violations: res.iter().filter(|r| !r.0).count(),
        tail_failures: res.iter().filter(|r| !r.1).count(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ThetaSuite {
    pub points: usize,
    pub max_residual: f64,
    pub lower_bound_failures: usize,
    pub monotonicity_failures: usize,
}

/// `solve_theta` over sweep lines `p` increasing for fixed `(n_prev, n_k)`;
/// drift `n_k - n_prev p` falls along each line so theta must fall too.
pub fn theta_suite() -> Result<ThetaSuite> {
    let lines: [(u32, u32); 10] = [(2, 1), (3, 2), (5, 3), (6, 5), (10, 7), (20, 5), (40, 39), (100, 60), (7, 1), (64, 32)];
    let per_line = 100;
    let mut suite = ThetaSuite {
        points: 0,
        max_residual: 0.0,
        lower_bound_failures: 0,
        monotonicity_failures: 0,
    };
    for (n_prev, n_k) in lines {
        let p_max = n_k as f64 / n_prev as f64;
        let mut prev: Option<f64> = None;
        for i in 1..=per_line {
            let p = p_max * i as f64 / (per_line + 1) as f64;
            let sol = solve_theta(n_prev, n_k, p)?;
            suite.points += 1;
            suite.max_residual = suite.max_residual.max(sol.residual);
            if sol.theta < sol.lower_bound {
                suite.lower_bound_failures += 1;
            }
            if prev.is_some_and(|t| sol.theta > t) {
                suite.monotonicity_failures += 1;
            }
            prev = Some(sol.theta);
        }
    }
    Ok(suite)
}

/// Three segments with room to spare in every nested condition.
pub fn builtin_nested_scenario() -> Result<(ThresholdPolicy, Vec<PromptType>, SystemConfig)> {
    let types = vec![
        PromptType::new(0, 4, 2, 1.0)?,
        PromptType::new(1, 4, 4, 1.0)?,
        PromptType::new(2, 4, 6, 1.0)?,
    ];
    let policy = ThresholdPolicy::nested(vec![6, 5, 3], &types)?;
    let cfg = SystemConfig::unbounded(0.5, 0.002)?;
    Ok((policy, types, cfg))
}

/// Two-type instance at `C = M* = 9`.
pub fn two_type_instance() -> Result<(Vec<PromptType>, SystemConfig)> {
    Ok((
        vec![PromptType::new(0, 1, 1, 1.0)?, PromptType::new(1, 1, 2, 1.0)?],
        SystemConfig::new(0.5, 1.0 / 18.0, 9)?,
    ))
}

#[derive(Serialize)]
struct OracleOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    walk: Option<WalkSuite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expectation: Option<crate::oracle::ExpectationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coupling: Option<CouplingSuite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theta: Option<ThetaSuite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    memory: Option<crate::oracle::MemoryCheckReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    overflow: Option<crate::oracle::OverflowReport>,
    violations: Vec<String>,
}

pub fn cmd_oracle(suite: Suite, scenario: Option<&Scenario>, seed: u64, paths: usize) -> Result<i32> {
    let want = |s: Suite| suite == Suite::All || suite == s;
    let mut o = OracleOutput {
        walk: None,
        expectation: None,
        coupling: None,
        theta: None,
        memory: None,
        overflow: None,
        violations: Vec::new(),
    };
    if want(Suite::Walk) {
        let w = walk_suite(paths, 200, seed)?;
        if w.telescope_violations + w.dominance_violations + w.lindley_violations > 0 {
            o.violations.push("walk".into());
        }
        o.walk = Some(w);
    }
    if want(Suite::Expectation) {
        let e = expectation_bounds_check(4.0, 200, 2000, seed)?;
        if !(e.zero_drift.pass && e.negative_drift.pass) {
            o.violations.push("expectation".into());
        }
        o.expectation = Some(e);
    }
    if want(Suite::Coupling) {
        let c = coupling_suite(paths, 200, seed)?;
        if c.dominance_violations > 0 {
            o.violations.push("coupling".into());
        }
        o.coupling = Some(c);
    }
    if want(Suite::Theta) {
        let t = theta_suite()?;
        if t.max_residual > 1e-10 || t.lower_bound_failures + t.monotonicity_failures > 0 {
            o.violations.push("theta".into());
        }
        o.theta = Some(t);
    }
    if want(Suite::Memory) {
        let (policy, types, cfg, zeta) = match scenario {
            Some(s) => {
                let p = s.policy()?.filter(|p| p.kind != PolicyKind::Wait).ok_or_else(|| {
                    Error::Config("memory oracle needs a nested scheduler".into())
                })?;
                (p, s.types.clone(), s.system, s.zetas.first().copied().unwrap_or(1.0))
            }
            None => {
                let (p, t, c) = builtin_nested_scenario()?;
                (p, t, c, 1.0)
            }
        };
        let m = memory_bound_check(&policy, &types, &cfg, zeta, 500, 0.1, 100, seed, None)?;
        if m.violation_rate > 0.1 || m.invariant_violations > 0 {
            o.violations.push("memory".into());
        }
        o.memory = Some(m);
    }
    if want(Suite::Overflow) {
        let (types, cfg) = two_type_instance()?;
        let r = fcfs_overflow_probability(&types, &cfg, 1.0, 100_000, seed)?;
        if (r.estimate - r.exact).abs() > 4.0 * r.se {
            o.violations.push("overflow".into());
        }
        o.overflow = Some(r);
    }
    println!("{}", to_json(&o)?);
    if o.violations.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("oracle violations: {}", o.violations.join(", "));
        Ok(EXIT_VIOLATION)
    }
}
