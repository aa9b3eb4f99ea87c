//! Scenario configuration: system, workload, scheduler and run settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{run, RunOptions, Scheduler, SimOutcome};
use crate::error::{invalid, Error, Result};
use crate::fluid::{scale_types, solve_equilibrium, FluidEquilibrium, SystemConfig};
use crate::policy::{heuristic_wait_thresholds, segment_partition, ThresholdPolicy};
use crate::schedulers::{BaselineConfig, FcfsScheduler, NestedScheduler, WaitScheduler};
use crate::workload::{
    bin_by_decode, load_trace, poisson_jobs, time_varying_jobs, trace_jobs, Job, PromptType, RateFunction,
    RateProfile, TraceRecord,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulerSpec {
    Wait {
        #[serde(default)]
        thresholds: Option<Vec<u32>>,
        /// Derive thresholds from a batch size limit instead.
        #[serde(default)]
        batch_budget: Option<u64>,
    },
    Nested {
        thresholds: Vec<u32>,
    },
    NestedSegmented {
        thresholds: Vec<u32>,
        segments: usize,
    },
    TimeVaryingNested {
        thresholds: Vec<u32>,
    },
    Fcfs {
        baseline: BaselineConfig,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemSection {
    d0_s: f64,
    d1_s_per_token: f64,
    #[serde(default)]
    capacity_tokens: Option<u64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TypeEntry {
    prefill_len: u32,
    decode_len: u32,
    rate: f64,
    #[serde(default)]
    profile: Option<RateProfile>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadSection {
    #[serde(default)]
    types: Option<Vec<TypeEntry>>,
    #[serde(default)]
    trace_path: Option<PathBuf>,
    #[serde(default)]
    bin_width: Option<u32>,
    #[serde(default)]
    total_rate: Option<f64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_zetas() -> Vec<f64> {
    vec![1.0]
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    horizon_s: f64,
    #[serde(default)]
    max_iterations: Option<u64>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_zetas")]
    zetas: Vec<f64>,
    #[serde(default)]
    hide_types: bool,
    #[serde(default)]
    check_invariants: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    #[serde(default = "default_out")]
    dir: PathBuf,
    #[serde(default)]
    trace_events: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_out(),
            trace_events: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    pub schedulers: Vec<SchedulerSpec>,
    #[serde(default = "default_scales")]
    pub rate_scales: Vec<f64>,
}

fn default_scales() -> Vec<f64> {
    vec![1.0]
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    system: SystemSection,
    workload: WorkloadSection,
    scheduler: SchedulerSpec,
    run: RunSection,
    #[serde(default)]
    output: OutputSection,
    #[serde(default)]
    compare: Option<CompareSpec>,
}

/// Trace records with the binning that produced the scenario's types.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSource {
    pub records: Vec<TraceRecord>,
    pub bin_width: u32,
    pub total_rate: f64,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub system: SystemConfig,
    pub types: Vec<PromptType>,
    /// Time-varying rate per type, when given.
    pub profiles: Option<Vec<RateFunction>>,
    pub trace: Option<TraceSource>,
    pub scheduler: SchedulerSpec,
    pub horizon: f64,
    pub max_iterations: Option<u64>,
    pub seeds: Vec<u64>,
    pub zetas: Vec<f64>,
    pub hide_types: bool,
    pub check_invariants: bool,
    pub output_dir: PathBuf,
    pub trace_events: bool,
    pub compare: Option<CompareSpec>,
    /// Scaling already applied to rates and speeds.
    pub zeta: f64,
}

impl Scenario {
    /// Minimal scenario over explicit types.
    pub fn new(system: SystemConfig, types: Vec<PromptType>, scheduler: SchedulerSpec, horizon: f64) -> Self {
        Self {
            system,
            types,
            profiles: None,
            trace: None,
            scheduler,
            horizon,
            max_iterations: None,
            seeds: default_seeds(),
            zetas: default_zetas(),
            hide_types: false,
            check_invariants: false,
            output_dir: default_out(),
            trace_events: false,
            compare: None,
            zeta: 1.0,
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses a TOML config; relative trace paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let system = SystemConfig::new(
            cfg.system.d0_s,
            cfg.system.d1_s_per_token,
            cfg.system.capacity_tokens.unwrap_or(u64::MAX),
        )?;
        let w = cfg.workload;
        let (types, profiles, trace) = match (w.types, w.trace_path) {
            (Some(entries), None) => {
                let types = entries
                    .iter()
                    .enumerate()
                    .map(|(i, e)| PromptType::new(i, e.prefill_len, e.decode_len, e.rate))
                    .collect::<Result<Vec<_>>>()?;
                let any = entries.iter().any(|e| e.profile.is_some());
                let profiles = if any {
                    Some(
                        entries
                            .iter()
                            .map(|e| match &e.profile {
                                Some(p) => RateFunction::new(p.clone()),
                                None => RateFunction::constant(e.rate),
                            })
                            .collect::<Result<Vec<_>>>()?,
                    )
                } else {
                    None
                };
                (types, profiles, None)
            }
            (None, Some(path)) => {
                let path = if path.is_relative() { base_dir.join(path) } else { path };
                let width = w.bin_width.ok_or_else(|| Error::Config("trace workload needs bin_width".into()))?;
                let rate = w.total_rate.ok_or_else(|| Error::Config("trace workload needs total_rate".into()))?;
                let records = load_trace(&path)?;
                let types = bin_by_decode(&records, width, rate)?;
                (
                    types,
                    None,
                    Some(TraceSource {
                        records,
                        bin_width: width,
                        total_rate: rate,
                    }),
                )
            }
            _ => return Err(Error::Config("workload needs exactly one of types or trace_path".into())),
        };
        if !(cfg.run.horizon_s.is_finite() && cfg.run.horizon_s > 0.0) {
            return Err(Error::Config("run.horizon_s must be positive".into()));
        }
        if cfg.run.seeds.is_empty() || cfg.run.zetas.iter().any(|z| !(z.is_finite() && *z > 0.0)) {
            return Err(Error::Config("run.seeds must be non-empty and zetas positive".into()));
        }
        let s = Self {
            system,
            types,
            profiles,
            trace,
            scheduler: cfg.scheduler,
            horizon: cfg.run.horizon_s,
            max_iterations: cfg.run.max_iterations,
            seeds: cfg.run.seeds,
            zetas: cfg.run.zetas,
            hide_types: cfg.run.hide_types,
            check_invariants: cfg.run.check_invariants,
            output_dir: cfg.output.dir,
            trace_events: cfg.output.trace_events,
            compare: cfg.compare,
            zeta: 1.0,
        };
        s.policy()?;
        Ok(s)
    }

    pub fn equilibrium(&self) -> Result<FluidEquilibrium> {
        solve_equilibrium(&self.types, &self.system)
    }

    /// Rates times `zeta`, iteration costs divided by `zeta`.
    pub fn scaled(&self, zeta: f64) -> Self {
        let mut s = self.with_rate_scale(zeta);
        s.system = self.system.scaled(zeta);
        s.zeta = self.zeta * zeta;
        s
    }

    /// Rates times `factor`, everything else unchanged.
    pub fn with_rate_scale(&self, factor: f64) -> Self {
        let mut s = self.clone();
        s.types = scale_types(&self.types, factor);
        s.profiles = self.profiles.as_ref().map(|ps| ps.iter().map(|p| p.scaled(factor)).collect());
        if let Some(t) = &mut s.trace {
            t.total_rate *= factor;
        }
        s
    }

    pub fn with_scheduler(&self, spec: SchedulerSpec) -> Self {
        Self {
            scheduler: spec,
            ..self.clone()
        }
    }

    /// Threshold policy of the configured scheduler; `None` for baselines.
    pub fn policy(&self) -> Result<Option<ThresholdPolicy>> {
        Ok(match &self.scheduler {
            SchedulerSpec::Wait {
                thresholds,
                batch_budget,
            } => {
                if self.hide_types {
                    return Err(Error::Config("WAIT needs visible types; use a nested scheduler".into()));
                }
                let n = match (thresholds, batch_budget) {
                    (Some(n), None) => n.clone(),
                    (None, Some(b)) => heuristic_wait_thresholds(*b, &self.types)?.thresholds,
                    _ => return Err(Error::Config("WAIT needs exactly one of thresholds or batch_budget".into())),
                };
                if n.len() != self.types.len() {
                    return Err(invalid(format!("{} thresholds for {} types", n.len(), self.types.len())));
                }
                Some(ThresholdPolicy::wait(n)?)
            }
            SchedulerSpec::Nested { thresholds } | SchedulerSpec::TimeVaryingNested { thresholds } => {
                Some(ThresholdPolicy::nested(thresholds.clone(), &self.types)?)
            }
            SchedulerSpec::NestedSegmented { thresholds, segments } => Some(ThresholdPolicy::segmented(
                thresholds.clone(),
                segment_partition(&self.types, *segments)?,
            )?),
            SchedulerSpec::Fcfs { .. } => None,
        })
    }

    pub fn build_scheduler(&self) -> Result<Box<dyn Scheduler>> {
        build_scheduler(self, &self.scheduler)
    }

    pub fn jobs(&self, seed: u64) -> Result<Vec<Job>> {
        if let Some(t) = &self.trace {
            return trace_jobs(&t.records, &self.types, t.bin_width, t.total_rate, self.horizon, seed);
        }
        match &self.profiles {
            Some(p) => time_varying_jobs(&self.types, p, self.horizon, seed),
            None => poisson_jobs(&self.types, self.horizon, seed),
        }
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            horizon: self.horizon,
            max_iterations: self.max_iterations,
            check_invariants: self.check_invariants,
            trace_events: self.trace_events,
        }
    }

    pub fn run_seed(&self, seed: u64) -> Result<SimOutcome> {
        let jobs = self.jobs(seed)?;
        let mut sched = self.build_scheduler()?;
        run(sched.as_mut(), &jobs, &self.system, &self.run_options())
    }
}

fn build_scheduler(s: &Scenario, spec: &SchedulerSpec) -> Result<Box<dyn Scheduler>> {
    let scenario = s.with_scheduler(spec.clone());
    let policy = scenario.policy()?;
    Ok(match spec {
        SchedulerSpec::Wait { .. } => Box::new(WaitScheduler::new(policy.as_ref().expect("wait policy"))?),
        SchedulerSpec::Nested { .. } | SchedulerSpec::NestedSegmented { .. } => {
            Box::new(NestedScheduler::new(policy.as_ref().expect("nested policy"))?)
        }
        SchedulerSpec::TimeVaryingNested { .. } => {
            let constant;
            let fns = match &s.profiles {
                Some(p) => p,
                None => {
                    constant = s
                        .types
                        .iter()
                        .map(|t| RateFunction::constant(t.rate))
                        .collect::<Result<Vec<_>>>()?;
                    &constant
                }
            };
            Box::new(NestedScheduler::time_varying(
                policy.as_ref().expect("nested policy"),
                fns,
                s.horizon,
                &s.system,
            )?)
        }
        SchedulerSpec::Fcfs { baseline } => Box::new(FcfsScheduler::new(*baseline)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
[system]
d0_s = 0.5
d1_s_per_token = 0.041666666666666664
capacity_tokens = 12

[workload]
types = [{ prefill_len = 1, decode_len = 1, rate = 4.0 }]

[scheduler]
kind = "wait"
thresholds = [4]

[run]
horizon_s = 50.0
seeds = [1, 2]
"#;

    #[test]
    fn parses_and_runs() {
        let s = Scenario::from_toml(BASIC, Path::new(".")).unwrap();
        assert_eq!(s.types.len(), 1);
        assert_eq!(s.system.capacity, 12);
        let out = s.run_seed(1).unwrap();
        assert!(out.completions() > 0);
        assert!(out.evictions.is_empty());
    }

    #[test]
    fn scaling_applies_to_rates_and_speeds() {
        let s = Scenario::from_toml(BASIC, Path::new(".")).unwrap().scaled(4.0);
        assert_eq!(s.types[0].rate, 16.0);
        assert_eq!(s.system.d0, 0.125);
        assert_eq!(s.zeta, 4.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let hidden = BASIC.replace("seeds = [1, 2]", "seeds = [1]\nhide_types = true");
        assert!(Scenario::from_toml(&hidden, Path::new(".")).is_err());
        let typo = BASIC.replace("thresholds", "threshold");
        assert!(matches!(Scenario::from_toml(&typo, Path::new(".")), Err(Error::Config(_))));
        let both = BASIC.replace("thresholds = [4]", "thresholds = [4]\nbatch_budget = 8");
        assert!(Scenario::from_toml(&both, Path::new(".")).is_err());
    }

    #[test]
    fn heuristic_budget_resolves_thresholds() {
        let text = BASIC.replace("thresholds = [4]", "batch_budget = 8");
        let s = Scenario::from_toml(&text, Path::new(".")).unwrap();
        assert_eq!(s.policy().unwrap().unwrap().thresholds, vec![4]);
    }
}
