//! Batch formation policies.

use serde::{Deserialize, Serialize};

use crate::engine::{ClassLayout, Scheduler, SchedulerView, Selection};
use crate::error::{invalid, Error, Result};
use crate::fluid::SystemConfig;
use crate::policy::{validate_time_varying, GridOptions, PolicyKind, SegmentLayout, ThresholdPolicy};
use crate::workload::RateFunction;

/// WAIT: a type joins the batch once `n_j` prompts wait for prefill; the
/// batch then takes up to `n_j` prompts from every stage of each joining type.
#[derive(Clone, Debug)]
pub struct WaitScheduler {
    thresholds: Vec<usize>,
}

impl WaitScheduler {
    pub fn new(policy: &ThresholdPolicy) -> Result<Self> {
        if policy.kind != PolicyKind::Wait {
            return Err(invalid("WAIT scheduler needs a WAIT policy"));
        }
        Ok(Self {
            thresholds: policy.thresholds.iter().map(|&n| n as usize).collect(),
        })
    }
}

impl Scheduler for WaitScheduler {
    fn name(&self) -> String {
        "wait".into()
    }

    fn class_layout(&self) -> ClassLayout {
        ClassLayout::PerType
    }

    fn decide(&mut self, view: &SchedulerView<'_>) -> Option<Selection> {
        let mut sel = Selection::default();
        for class in 0..view.num_classes().min(self.thresholds.len()) {
            let n = self.thresholds[class];
            if view.count(class, 0) < n {
                continue;
            }
            for stage in 0..view.num_stages(class) {
                sel.push(class, stage, n.min(view.count(class, stage)));
            }
        }
        (!sel.is_empty()).then_some(sel)
    }
}

/// Nested WAIT over decode segments. Types are never read: a prompt reveals
/// that it belongs to segment `k` or later by reaching the segment's entry
/// stage. Segments `1..=k*` run, where `k*` is the largest index whose every
/// entry queue holds at least its threshold.
#[derive(Clone, Debug)]
pub struct NestedScheduler {
    thresholds: Vec<usize>,
    layout: SegmentLayout,
    label: &'static str,
}

impl NestedScheduler {
    pub fn new(policy: &ThresholdPolicy) -> Result<Self> {
        Self::build(policy, "nested")
    }

    /// Same batching rule for time-varying rates; refuses thresholds that
    /// fail [`validate_time_varying`] over `[0, horizon]`.
    pub fn time_varying(
        policy: &ThresholdPolicy,
        rate_fns: &[RateFunction],
        horizon: f64,
        cfg: &SystemConfig,
    ) -> Result<Self> {
        let report = validate_time_varying(policy, rate_fns, horizon, cfg, GridOptions::default())?;
        if !report.feasible {
            return Err(Error::Infeasible(format!(
                "thresholds fail under time-varying rates (peak window arrivals {} at t={})",
                report.peak_window_arrivals, report.peak_time
            )));
        }
        Self::build(policy, "time_varying_nested")
    }

    fn build(policy: &ThresholdPolicy, label: &'static str) -> Result<Self> {
        let layout = policy
            .layout
            .clone()
            .ok_or_else(|| invalid("nested scheduler needs a nested policy"))?;
        Ok(Self {
            thresholds: policy.thresholds.iter().map(|&n| n as usize).collect(),
            layout,
            label,
        })
    }
}

impl Scheduler for NestedScheduler {
    fn name(&self) -> String {
        self.label.into()
    }

    fn class_layout(&self) -> ClassLayout {
        ClassLayout::Single
    }

    fn decide(&mut self, view: &SchedulerView<'_>) -> Option<Selection> {
        let ready = (0..self.layout.len())
            .take_while(|&k| view.count(0, self.layout.entry_stage(k) as usize) >= self.thresholds[k])
            .count();
        if ready == 0 {
            return None;
        }
        let mut sel = Selection::default();
        for k in 0..ready {
            let n = self.thresholds[k];
            let first = self.layout.entry_stage(k) as usize;
            let last = self.layout.bounds[k] as usize;
            for stage in first..=last {
                sel.push(0, stage, n.min(view.count(0, stage)));
            }
        }
        (!sel.is_empty()).then_some(sel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    /// Admit waiting prefills first, then ongoing decodes.
    NewFirst,
    /// Run every ongoing decode first, then admit prefills that fit.
    OngoingFirst,
}

/// Per-iteration budgets shared by the FCFS baselines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Tokens processed per iteration: `l` per prefill, 1 per decode.
    pub max_tokens: u64,
    pub max_prompts: usize,
    pub priority: Priority,
}

/// Work-conserving first-come-first-serve batching.
#[derive(Clone, Debug)]
pub struct FcfsScheduler {
    cfg: BaselineConfig,
}

impl FcfsScheduler {
    pub fn new(cfg: BaselineConfig) -> Result<Self> {
        if cfg.max_tokens == 0 || cfg.max_prompts == 0 {
            return Err(invalid("baseline budgets must be positive"));
        }
        Ok(Self { cfg })
    }
}

struct Budget {
    tokens: u64,
    prompts: usize,
    max_tokens: u64,
    max_prompts: usize,
}

impl Budget {
    fn admit(&mut self, tokens: u64) -> bool {
        if self.prompts < self.max_prompts && self.tokens + tokens <= self.max_tokens {
            self.prompts += 1;
            self.tokens += tokens;
            true
        } else {
            false
        }
    }
}

impl FcfsScheduler {
    /// Residents oldest first; returns the number of decodes taken.
    fn take_decodes(&self, view: &SchedulerView<'_>, budget: &mut Budget, sel: &mut Selection) -> u64 {
        let mut taken = 0;
        for stage in (1..view.num_stages(0)).rev() {
            let mut k = 0;
            for _ in view.prompts(0, stage) {
                if !budget.admit(1) {
                    break;
                }
                k += 1;
            }
            sel.push(0, stage, k);
            taken += k as u64;
            if k < view.count(0, stage) {
                break;
            }
        }
        taken
    }

    /// Waiting prompts by arrival while `reserved + prefill` fits in memory.
    fn take_prefills(&self, view: &SchedulerView<'_>, budget: &mut Budget, reserved: u64, sel: &mut Selection) {
        let mut mem = view.memory_used() + reserved;
        let mut k = 0;
        for p in view.prompts(0, 0) {
            let l = p.prefill_len as u64;
            if mem + l > view.capacity() || !budget.admit(l) {
                break;
            }
            mem += l;
            k += 1;
        }
        sel.push(0, 0, k);
    }
}

impl Scheduler for FcfsScheduler {
    fn name(&self) -> String {
        match self.cfg.priority {
            Priority::NewFirst => "fcfs_new_first".into(),
            Priority::OngoingFirst => "fcfs_ongoing_first".into(),
        }
    }

    fn class_layout(&self) -> ClassLayout {
        ClassLayout::Single
    }

    fn decide(&mut self, view: &SchedulerView<'_>) -> Option<Selection> {
        let mut budget = Budget {
            tokens: 0,
            prompts: 0,
            max_tokens: self.cfg.max_tokens,
            max_prompts: self.cfg.max_prompts,
        };
        let mut sel = Selection::default();
        match self.cfg.priority {
            Priority::NewFirst => {
                self.take_prefills(view, &mut budget, 0, &mut sel);
                self.take_decodes(view, &mut budget, &mut sel);
            }
            Priority::OngoingFirst => {
                let growth = self.take_decodes(view, &mut budget, &mut sel);
                self.take_prefills(view, &mut budget, growth, &mut sel);
            }
        }
        if sel.is_empty() {
            // never idle with work queued: run the oldest prompt if it fits at all
            if let Some(p) = view.prompts(0, 0).next() {
                if view.memory_used() + p.prefill_len as u64 <= view.capacity() {
                    sel.push(0, 0, 1);
                }
            }
        }
        (!sel.is_empty()).then_some(sel)
    }
}
