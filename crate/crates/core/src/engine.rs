//! Discrete-event simulator for iteration-level batching with a KV budget.
//!
//! A prompt sits at pipeline stage 0 while waiting for prefill. After prefill
//! it is resident at stage 1 with `l` tokens of KV; every decode iteration at
//! stage `s` grows its KV to `l + s` and moves it to `s + 1`, until the
//! `l'`-th token completes it. Iteration time is `d0 + d1 * tokens`, where
//! a prefill counts `l` tokens and a decode at stage `s` counts `l + s`.
//!
//! Decisions happen when the server is idle and an arrival lands, and at
//! every batch completion. Events sharing a timestamp are applied together
//! (completion first, then arrivals) before the scheduler is consulted.
//! When a batch would overflow the capacity, the most recently admitted
//! residents are evicted and restart from prefill.

use std::collections::VecDeque;
use std::io::Write;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fluid::SystemConfig;
use crate::workload::Job;

/// How prompts are grouped into queues.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassLayout {
    /// One queue family per prompt type.
    PerType,
    /// Every prompt shares one queue family; types are never consulted.
    Single,
}

#[derive(Clone, Debug, Serialize)]
pub struct PromptInstance {
    pub uid: usize,
    pub type_id: usize,
    pub prefill_len: u32,
    pub decode_len: u32,
    pub arrival_time: f64,
    /// Decode tokens produced in the current residency.
    pub tokens: u32,
    pub resident: bool,
    pub admission: u64,
    pub first_token_time: Option<f64>,
    pub completion_time: Option<f64>,
    pub restarts: u32,
}

impl PromptInstance {
    pub fn kv(&self) -> u64 {
        if self.resident {
            self.prefill_len as u64 + self.tokens as u64
        } else {
            0
        }
    }

    pub fn stage(&self) -> usize {
        if self.resident {
            self.tokens as usize + 1
        } else {
            0
        }
    }

    pub fn is_complete(&self) -> bool {
        self.completion_time.is_some()
    }
}

/// Work item for [`iteration_time`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchItem {
    Prefill { prefill_len: u32 },
    /// Decode at pipeline stage `stage >= 1`.
    Decode { prefill_len: u32, stage: u32 },
}

impl BatchItem {
    pub fn tokens(&self) -> u64 {
        match *self {
            BatchItem::Prefill { prefill_len } => prefill_len as u64,
            BatchItem::Decode { prefill_len, stage } => prefill_len as u64 + stage as u64,
        }
    }
}

pub fn iteration_time(items: &[BatchItem], cfg: &SystemConfig) -> f64 {
    cfg.iteration_time(items.iter().map(BatchItem::tokens).sum::<u64>() as f64)
}

/// Take the `count` oldest prompts of `class` at pipeline `stage`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageTake {
    pub class: usize,
    pub stage: usize,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Selection {
    pub takes: Vec<StageTake>,
}

impl Selection {
    pub fn push(&mut self, class: usize, stage: usize, count: usize) {
        if count > 0 {
            self.takes.push(StageTake { class, stage, count });
        }
    }

    pub fn is_empty(&self) -> bool {
        self.takes.iter().all(|t| t.count == 0)
    }
}

pub trait Scheduler: Send {
    fn name(&self) -> String;
    fn class_layout(&self) -> ClassLayout;
    /// Returns the next batch, or `None` to stay idle until the next event.
    fn decide(&mut self, view: &SchedulerView<'_>) -> Option<Selection>;
}

#[derive(Clone, Debug, Default)]
struct ClassQueues {
    waiting: VecDeque<usize>,
    /// `stages[s - 1]` holds residents at pipeline stage `s`, oldest first.
    stages: Vec<VecDeque<usize>>,
}

impl ClassQueues {
    fn queue(&self, stage: usize) -> Option<&VecDeque<usize>> {
        if stage == 0 {
            Some(&self.waiting)
        } else {
            self.stages.get(stage - 1)
        }
    }
}

/// Read-only state handed to schedulers.
pub struct SchedulerView<'a> {
    sim: &'a Simulator,
}

impl<'a> SchedulerView<'a> {
    pub fn now(&self) -> f64 {
        self.sim.now
    }

    pub fn memory_used(&self) -> u64 {
        self.sim.memory_used
    }

    pub fn capacity(&self) -> u64 {
        self.sim.cfg.capacity
    }

    pub fn num_classes(&self) -> usize {
        self.sim.classes.len()
    }

    /// Stages of `class` including stage 0.
    pub fn num_stages(&self, class: usize) -> usize {
        self.sim.classes.get(class).map_or(0, |c| c.stages.len() + 1)
    }

    pub fn count(&self, class: usize, stage: usize) -> usize {
        self.sim
            .classes
            .get(class)
            .and_then(|c| c.queue(stage))
            .map_or(0, VecDeque::len)
    }

    /// Prompts of `class` at `stage`, oldest first.
    pub fn prompts(&self, class: usize, stage: usize) -> impl Iterator<Item = &'a PromptInstance> + 'a {
        let sim = self.sim;
        sim.classes
            .get(class)
            .and_then(|c| c.queue(stage))
            .into_iter()
            .flatten()
            .map(move |&uid| &sim.prompts[uid])
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub horizon: f64,
    pub max_iterations: Option<u64>,
    pub check_invariants: bool,
    pub trace_events: bool,
}

impl RunOptions {
    pub fn horizon(horizon: f64) -> Self {
        Self {
            horizon,
            max_iterations: None,
            check_invariants: false,
            trace_events: false,
        }
    }

    pub fn iterations(max_iterations: u64) -> Self {
        Self {
            horizon: f64::INFINITY,
            max_iterations: Some(max_iterations),
            check_invariants: false,
            trace_events: false,
        }
    }

    pub fn checked(mut self) -> Self {
        self.check_invariants = true;
        self
    }

    pub fn traced(mut self) -> Self {
        self.trace_events = true;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    BatchStart,
    BatchEnd,
    FirstToken,
    Complete,
    Evict,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Arrival => "arrival",
            EventKind::BatchStart => "batch_start",
            EventKind::BatchEnd => "batch_end",
            EventKind::FirstToken => "first_token",
            EventKind::Complete => "complete",
            EventKind::Evict => "evict",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    pub time: f64,
    pub kind: EventKind,
    pub uid: Option<usize>,
    pub type_id: Option<usize>,
    pub stage: Option<usize>,
    pub memory_used: u64,
    pub queue_lengths: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvictionRecord {
    pub time: f64,
    pub uid: usize,
    pub type_id: usize,
    pub tokens_lost: u32,
}

#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub scheduler: String,
    pub prompts: Vec<PromptInstance>,
    pub evictions: Vec<EvictionRecord>,
    pub iterations: u64,
    /// Horizon for rate metrics: the configured one, or the stop time when
    /// the run ended on the iteration limit.
    pub horizon: f64,
    pub end_time: f64,
    pub busy_time: f64,
    /// Largest batch demand after evictions.
    pub peak_memory: u64,
    /// Largest batch demand before evictions.
    pub peak_requested: u64,
    pub invariant_violations: u64,
    pub violation_samples: Vec<String>,
    pub events: Vec<TraceEvent>,
}

impl SimOutcome {
    pub fn completed(&self) -> impl Iterator<Item = &PromptInstance> {
        self.prompts.iter().filter(|p| p.is_complete())
    }

    pub fn completions(&self) -> usize {
        self.completed().count()
    }

    /// Writes `time,event_kind,uid,type_id,stage,memory_used,q0,q1,...`.
    pub fn write_events_csv<W: Write>(&self, out: W) -> Result<()> {
        let classes = self.events.iter().map(|e| e.queue_lengths.len()).max().unwrap_or(0);
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["time", "event_kind", "uid", "type_id", "stage", "memory_used"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..classes).map(|c| format!("q{c}")));
        w.write_record(&header)?;
        let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.events {
            let mut row = vec![
                e.time.to_string(),
                e.kind.as_str().to_string(),
                opt(e.uid),
                opt(e.type_id),
                opt(e.stage),
                e.memory_used.to_string(),
            ];
            row.extend(e.queue_lengths.iter().map(|q| q.to_string()));
            row.resize(header.len(), String::new());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Internal(e.to_string()))?;
        Ok(())
    }
}

struct InFlight {
    end: f64,
    /// `takes[class][stage]` prompts taken from the front of each queue.
    takes: Vec<Vec<usize>>,
}

const MAX_VIOLATION_SAMPLES: usize = 16;

/// Engine state. [`run`] drives it; the step methods are public for tests
/// and embedding.
pub struct Simulator {
    cfg: SystemConfig,
    layout: ClassLayout,
    check: bool,
    trace: bool,
    prompts: Vec<PromptInstance>,
    classes: Vec<ClassQueues>,
    admissions: Vec<(u64, usize)>,
    next_admission: u64,
    memory_used: u64,
    now: f64,
    batch: Option<InFlight>,
    iterations: u64,
    evictions: Vec<EvictionRecord>,
    restarts: u64,
    completed: usize,
    busy_time: f64,
    peak_memory: u64,
    peak_requested: u64,
    violations: u64,
    violation_samples: Vec<String>,
    events: Vec<TraceEvent>,
}

impl Simulator {
    pub fn new(cfg: SystemConfig, layout: ClassLayout, num_types: usize) -> Result<Self> {
        cfg.validate()?;
        let n = match layout {
            ClassLayout::PerType => num_types.max(1),
            ClassLayout::Single => 1,
        };
        Ok(Self {
            cfg,
            layout,
            check: false,
            trace: false,
            prompts: Vec::new(),
            classes: vec![ClassQueues::default(); n],
            admissions: Vec::new(),
            next_admission: 0,
            memory_used: 0,
            now: 0.0,
            batch: None,
            iterations: 0,
            evictions: Vec::new(),
            restarts: 0,
            completed: 0,
            busy_time: 0.0,
            peak_memory: 0,
            peak_requested: 0,
            violations: 0,
            violation_samples: Vec::new(),
            events: Vec::new(),
        })
    }

    pub fn with_checks(mut self, on: bool) -> Self {
        self.check = on;
        self
    }

    pub fn with_trace(mut self, on: bool) -> Self {
        self.trace = on;
        self
    }

    pub fn view(&self) -> SchedulerView<'_> {
        SchedulerView { sim: self }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn memory_used(&self) -> u64 {
        self.memory_used
    }

    pub fn busy(&self) -> bool {
        self.batch.is_some()
    }

    pub fn batch_end(&self) -> Option<f64> {
        self.batch.as_ref().map(|b| b.end)
    }

    pub fn evictions(&self) -> &[EvictionRecord] {
        &self.evictions
    }

    pub fn prompts(&self) -> &[PromptInstance] {
        &self.prompts
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    fn class_of(&self, type_id: usize) -> usize {
        match self.layout {
            ClassLayout::PerType => type_id,
            ClassLayout::Single => 0,
        }
    }

    fn record(&mut self, kind: EventKind, uid: Option<usize>) {
        if !self.trace {
            return;
        }
        let (type_id, stage) = match uid {
            Some(u) => (Some(self.prompts[u].type_id), Some(self.prompts[u].stage())),
            None => (None, None),
        };
        self.events.push(TraceEvent {
            time: self.now,
            kind,
            uid,
            type_id,
            stage,
            memory_used: self.memory_used,
            queue_lengths: self.classes.iter().map(|c| c.waiting.len()).collect(),
        });
    }

    fn violation(&mut self, msg: String) {
        self.violations += 1;
        if self.violation_samples.len() < MAX_VIOLATION_SAMPLES {
            self.violation_samples.push(msg);
        }
    }

    /// Appends an arriving prompt at its arrival time.
    pub fn arrive(&mut self, job: &Job) -> Result<usize> {
        if job.time < self.now {
            return Err(invalid(format!("arrival at {} before clock {}", job.time, self.now)));
        }
        if job.prefill_len == 0 || job.decode_len == 0 {
            return Err(invalid("job lengths must be positive"));
        }
        let class = self.class_of(job.type_id);
        if class >= self.classes.len() {
            return Err(invalid(format!("type {} outside the class layout", job.type_id)));
        }
        self.now = job.time;
        let uid = self.prompts.len();
        self.prompts.push(PromptInstance {
            uid,
            type_id: job.type_id,
            prefill_len: job.prefill_len,
            decode_len: job.decode_len,
            arrival_time: job.time,
            tokens: 0,
            resident: false,
            admission: 0,
            first_token_time: None,
            completion_time: None,
            restarts: 0,
        });
        let q = &mut self.classes[class];
        if q.stages.len() < job.decode_len as usize {
            q.stages.resize_with(job.decode_len as usize, VecDeque::new);
        }
        q.waiting.push_back(uid);
        self.record(EventKind::Arrival, Some(uid));
        Ok(uid)
    }

    /// Materializes `sel`, evicts until it fits and starts the batch.
    /// Returns `false` when nothing is left to run.
    pub fn start_batch(&mut self, sel: &Selection) -> Result<bool> {
        if self.batch.is_some() {
            return Err(Error::Internal("batch already in flight".into()));
        }
        let mut takes: Vec<Vec<usize>> = self.classes.iter().map(|c| vec![0; c.stages.len() + 1]).collect();
        for t in &sel.takes {
            let available = self.classes.get(t.class).and_then(|c| c.queue(t.stage)).map(VecDeque::len);
            let slot = takes.get_mut(t.class).and_then(|v| v.get_mut(t.stage));
            match (available, slot) {
                (Some(avail), Some(slot)) if *slot + t.count <= avail => *slot += t.count,
                _ => {
                    return Err(Error::Internal(format!(
                        "selection takes {} at class {} stage {} beyond the queue",
                        t.count, t.class, t.stage
                    )))
                }
            }
        }
        let mut demand = self.memory_used;
        for (c, tk) in takes.iter().enumerate() {
            let q = &self.classes[c];
            demand += q.waiting.iter().take(tk[0]).map(|&u| self.prompts[u].prefill_len as u64).sum::<u64>();
            demand += tk[1..].iter().sum::<usize>() as u64;
        }
        self.peak_requested = self.peak_requested.max(demand);
        self.enforce_memory(&mut takes, &mut demand)?;
        self.peak_memory = self.peak_memory.max(demand);
        if self.check && demand > self.cfg.capacity {
            self.violation(format!("t={}: batch demand {demand} above capacity", self.now));
        }

        let mut tokens = 0u64;
        let mut members = 0usize;
        for (c, tk) in takes.iter().enumerate() {
            let q = &self.classes[c];
            for (s, &k) in tk.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                members += k;
                let queue = q.queue(s).expect("materialized stage exists");
                if s == 0 {
                    tokens += queue.iter().take(k).map(|&u| self.prompts[u].prefill_len as u64).sum::<u64>();
                } else {
                    tokens += queue.iter().take(k).map(|&u| self.prompts[u].prefill_len as u64 + s as u64).sum::<u64>();
                }
            }
        }
        if members == 0 {
            return Ok(false);
        }
        let duration = self.cfg.iteration_time(tokens as f64);
        self.busy_time += duration;
        self.batch = Some(InFlight {
            end: self.now + duration,
            takes,
        });
        self.record(EventKind::BatchStart, None);
        Ok(true)
    }

    /// LIFO eviction until `demand <= capacity`. Victims inside the plan are
    /// dropped from it.
    fn enforce_memory(&mut self, takes: &mut [Vec<usize>], demand: &mut u64) -> Result<()> {
        while *demand > self.cfg.capacity {
            let Some(uid) = self.pop_latest_resident() else {
                return Err(Error::Unsatisfiable {
                    demand: *demand,
                    capacity: self.cfg.capacity,
                });
            };
            let class = self.class_of(self.prompts[uid].type_id);
            let stage = self.prompts[uid].stage();
            let kv = self.prompts[uid].kv();
            let queue = &mut self.classes[class].stages[stage - 1];
            if queue.back() != Some(&uid) {
                return Err(Error::Internal(format!("eviction victim {uid} is not last at its stage")));
            }
            if takes[class][stage] == queue.len() {
                takes[class][stage] -= 1;
                *demand -= kv + 1;
            } else {
                *demand -= kv;
            }
            queue.pop_back();
            self.memory_used -= kv;
            let p = &mut self.prompts[uid];
            self.evictions.push(EvictionRecord {
                time: self.now,
                uid,
                type_id: p.type_id,
                tokens_lost: p.tokens,
            });
            p.resident = false;
            p.tokens = 0;
            p.restarts += 1;
            self.restarts += 1;
            self.classes[class].waiting.push_back(uid);
            self.record(EventKind::Evict, Some(uid));
        }
        Ok(())
    }

    fn pop_latest_resident(&mut self) -> Option<usize> {
        while let Some((seq, uid)) = self.admissions.pop() {
            let p = &self.prompts[uid];
            if p.resident && p.admission == seq {
                return Some(uid);
            }
        }
        None
    }

    /// Applies the in-flight batch at its end time.
    pub fn finish_batch(&mut self) -> Result<()> {
        let batch = self.batch.take().ok_or_else(|| Error::Internal("no batch in flight".into()))?;
        self.now = batch.end;
        for (c, tk) in batch.takes.iter().enumerate() {
            for s in (1..tk.len()).rev() {
                for _ in 0..tk[s] {
                    let uid = self.classes[c].stages[s - 1]
                        .pop_front()
                        .ok_or_else(|| Error::Internal("stage queue drained mid-batch".into()))?;
                    let p = &mut self.prompts[uid];
                    p.tokens += 1;
                    self.memory_used += 1;
                    if p.tokens == 1 {
                        p.first_token_time = Some(self.now);
                    }
                    if p.tokens == p.decode_len {
                        self.memory_used -= p.prefill_len as u64 + p.tokens as u64;
                        p.resident = false;
                        p.completion_time = Some(self.now);
                        self.completed += 1;
                        self.record(EventKind::Complete, Some(uid));
                    } else {
                        let first = p.tokens == 1;
                        self.classes[c].stages[s].push_back(uid);
                        if first {
                            self.record(EventKind::FirstToken, Some(uid));
                        }
                    }
                }
            }
            for _ in 0..tk[0] {
                let uid = self.classes[c]
                    .waiting
                    .pop_front()
                    .ok_or_else(|| Error::Internal("waiting queue drained mid-batch".into()))?;
                let seq = self.next_admission;
                self.next_admission += 1;
                let p = &mut self.prompts[uid];
                p.resident = true;
                p.tokens = 0;
                p.admission = seq;
                self.memory_used += p.prefill_len as u64;
                self.classes[c].stages[0].push_back(uid);
                self.admissions.push((seq, uid));
            }
        }
        self.iterations += 1;
        self.record(EventKind::BatchEnd, None);
        Ok(())
    }

    fn check_invariants(&mut self, last_time: f64) {
        if self.now < last_time {
            self.violation(format!("clock moved back from {last_time} to {}", self.now));
        }
        if self.memory_used > self.cfg.capacity {
            self.violation(format!("t={}: memory {} above capacity", self.now, self.memory_used));
        }
        let mut resident_kv = 0u64;
        let mut resident = 0usize;
        let mut waiting = 0usize;
        for c in &self.classes {
            waiting += c.waiting.len();
            for q in &c.stages {
                resident += q.len();
                resident_kv += q.iter().map(|&u| self.prompts[u].kv()).sum::<u64>();
            }
        }
        if resident_kv != self.memory_used {
            self.violation(format!("t={}: memory {} but residents hold {resident_kv}", self.now, self.memory_used));
        }
        if waiting + resident + self.completed != self.prompts.len() {
            self.violation(format!(
                "t={}: {} arrived but {waiting} waiting + {resident} resident + {} completed",
                self.now,
                self.prompts.len(),
                self.completed
            ));
        }
        if self.restarts != self.evictions.len() as u64 {
            self.violation(format!("t={}: restarts and evictions disagree", self.now));
        }
    }

    pub fn into_outcome(self, scheduler: String, horizon: f64) -> SimOutcome {
        SimOutcome {
            scheduler,
            prompts: self.prompts,
            evictions: self.evictions,
            iterations: self.iterations,
            horizon,
            end_time: self.now,
            busy_time: self.busy_time,
            peak_memory: self.peak_memory,
            peak_requested: self.peak_requested,
            invariant_violations: self.violations,
            violation_samples: self.violation_samples,
            events: self.events,
        }
    }
}

/// Runs `scheduler` over time-ordered `jobs`.
pub fn run(scheduler: &mut dyn Scheduler, jobs: &[Job], cfg: &SystemConfig, opts: &RunOptions) -> Result<SimOutcome> {
    if jobs.windows(2).any(|w| w[0].time > w[1].time) {
        return Err(invalid("jobs must be sorted by arrival time"));
    }
    if opts.horizon.is_nan() || opts.horizon < 0.0 {
        return Err(invalid("horizon must be non-negative"));
    }
    if opts.horizon.is_infinite() && opts.max_iterations.is_none() && jobs.is_empty() {
        return Ok(Simulator::new(*cfg, scheduler.class_layout(), 1)?.into_outcome(scheduler.name(), 0.0));
    }
    let num_types = jobs.iter().map(|j| j.type_id + 1).max().unwrap_or(1);
    let mut sim = Simulator::new(*cfg, scheduler.class_layout(), num_types)?
        .with_checks(opts.check_invariants)
        .with_trace(opts.trace_events);
    let mut next_job = 0usize;
    let mut hit_limit = false;
    loop {
        let last_time = sim.now;
        let next_arrival = jobs.get(next_job).map(|j| j.time);
        let t = match (sim.batch_end(), next_arrival) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => break,
        };
        if t > opts.horizon {
            break;
        }
        if sim.batch_end() == Some(t) {
            sim.finish_batch()?;
        }
        while next_job < jobs.len() && jobs[next_job].time == t {
            sim.arrive(&jobs[next_job])?;
            next_job += 1;
        }
        sim.now = t;
        if opts.max_iterations.is_some_and(|m| sim.iterations >= m) {
            hit_limit = true;
            break;
        }
        if !sim.busy() {
            if let Some(sel) = scheduler.decide(&sim.view()) {
                if !sel.is_empty() {
                    sim.start_batch(&sel)?;
                }
            }
        }
        if sim.check {
            sim.check_invariants(last_time);
        }
    }
    let horizon = if hit_limit || opts.horizon.is_infinite() { sim.now } else { opts.horizon };
    Ok(sim.into_outcome(scheduler.name(), horizon))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(time: f64, l: u32, lp: u32) -> Job {
        Job {
            time,
            type_id: 0,
            prefill_len: l,
            decode_len: lp,
        }
    }

    fn sel(items: &[(usize, usize, usize)]) -> Selection {
        let mut s = Selection::default();
        for &(c, st, n) in items {
            s.push(c, st, n);
        }
        s
    }

    #[test]
    fn iteration_time_counts_prefill_and_decode_tokens() {
        let cfg = SystemConfig::new(0.5, 1.0 / 24.0, 100).unwrap();
        let mut items = vec![BatchItem::Prefill { prefill_len: 1 }; 4];
        items.extend(vec![BatchItem::Decode { prefill_len: 1, stage: 1 }; 4]);
        assert!((iteration_time(&items, &cfg) - (0.5 + 12.0 / 24.0)).abs() < 1e-12);
        assert_eq!(iteration_time(&[], &cfg), 0.5);
    }

    #[test]
    fn lifo_eviction_frees_exactly_enough() {
        // six residents of kv 1 who will grow to 2, plus four new prefills
        let cfg = SystemConfig::new(0.5, 1.0 / 24.0, 12).unwrap();
        let mut sim = Simulator::new(cfg, ClassLayout::Single, 1).unwrap().with_checks(true);
        for _ in 0..6 {
            sim.arrive(&job(0.0, 1, 1)).unwrap();
        }
        assert!(sim.start_batch(&sel(&[(0, 0, 6)])).unwrap());
        sim.finish_batch().unwrap();
        assert_eq!(sim.memory_used(), 6);
        for _ in 0..4 {
            sim.arrive(&job(sim.now(), 1, 1)).unwrap();
        }
        assert!(sim.start_batch(&sel(&[(0, 0, 4), (0, 1, 6)])).unwrap());
        assert_eq!(sim.evictions().len(), 2);
        // most recent admissions go first
        let victims: Vec<usize> = sim.evictions().iter().map(|e| e.uid).collect();
        assert_eq!(victims, vec![5, 4]);
        sim.finish_batch().unwrap();
        assert_eq!(sim.memory_used(), 4);
        sim.check_invariants(0.0);
        assert_eq!(sim.violations, 0, "{:?}", sim.violation_samples);
    }

    #[test]
    fn prefill_alone_over_capacity_is_unsatisfiable() {
        let cfg = SystemConfig::new(0.5, 0.1, 3).unwrap();
        let mut sim = Simulator::new(cfg, ClassLayout::Single, 1).unwrap();
        sim.arrive(&job(0.0, 5, 1)).unwrap();
        assert!(matches!(sim.start_batch(&sel(&[(0, 0, 1)])), Err(Error::Unsatisfiable { .. })));
    }

    #[test]
    fn over_selection_is_an_internal_error() {
        let cfg = SystemConfig::new(0.5, 0.1, 30).unwrap();
        let mut sim = Simulator::new(cfg, ClassLayout::Single, 1).unwrap();
        sim.arrive(&job(0.0, 1, 1)).unwrap();
        assert!(matches!(sim.start_batch(&sel(&[(0, 0, 2)])), Err(Error::Internal(_))));
        assert!(matches!(sim.start_batch(&sel(&[(0, 3, 1)])), Err(Error::Internal(_))));
    }

    #[test]
    fn single_prompt_lifecycle() {
        let cfg = SystemConfig::new(1.0, 0.5, 100).unwrap();
        let mut sim = Simulator::new(cfg, ClassLayout::Single, 1).unwrap();
        sim.arrive(&job(0.0, 2, 2)).unwrap();
        sim.start_batch(&sel(&[(0, 0, 1)])).unwrap();
        sim.finish_batch().unwrap();
        assert_eq!(sim.now(), 2.0);
        assert_eq!(sim.memory_used(), 2);
        sim.start_batch(&sel(&[(0, 1, 1)])).unwrap();
        sim.finish_batch().unwrap();
        assert_eq!(sim.now(), 2.0 + 2.5);
        assert_eq!(sim.prompts()[0].first_token_time, Some(4.5));
        assert_eq!(sim.memory_used(), 3);
        sim.start_batch(&sel(&[(0, 2, 1)])).unwrap();
        sim.finish_batch().unwrap();
        assert_eq!(sim.now(), 4.5 + 3.0);
        assert_eq!(sim.prompts()[0].completion_time, Some(7.5));
        assert_eq!(sim.memory_used(), 0);
    }
}
