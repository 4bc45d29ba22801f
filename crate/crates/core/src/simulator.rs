//! Discrete-event execution of a workload under an execution plan.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::bridge::{SubmissionBuffer, TaskRecord};
use crate::error::{Error, Result};
use crate::metrics::{EntityKind, Trace};
use crate::pilot::{
    schedule_early, schedule_late, submit_pilot, BindingMode, ComputeUnit, Pilot, PilotDescription, PilotId,
    PilotState, UnitState, TIME_EPS,
};
use crate::resource::{QueueStream, ResourceLedger, Site};
use crate::strategy::{pack_pilots, ExecutionPlan, PackParams, Provisioning, SiteScoreState, UnitShape};
use crate::workload::Workload;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    /// Retry period while throttles hold back work.
    pub scheduler_interval_s: f64,
    /// Per-unit dispatch cost: base plus a per-site term.
    pub sched_overhead_base_s: f64,
    pub sched_overhead_per_site_s: f64,
    pub bootstrap_s: f64,
    pub shutdown_s: f64,
    /// Delay between the start of a run and the first pilot submission.
    pub middleware_s: f64,
    pub staging: bool,
    pub bridge_idle_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            scheduler_interval_s: 1.0,
            sched_overhead_base_s: 0.1,
            sched_overhead_per_site_s: 0.05,
            bootstrap_s: 120.0,
            shutdown_s: 120.0,
            middleware_s: 0.0,
            staging: false,
            bridge_idle_s: 10.0,
        }
    }
}

impl SimConfig {
    /// No overheads, no staging, immediate bridge flushes.
    pub fn ideal(seed: u64) -> Self {
        SimConfig {
            seed,
            scheduler_interval_s: 1.0,
            sched_overhead_base_s: 0.0,
            sched_overhead_per_site_s: 0.0,
            bootstrap_s: 0.0,
            shutdown_s: 0.0,
            middleware_s: 0.0,
            staging: false,
            bridge_idle_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("scheduler_interval_s", self.scheduler_interval_s),
            ("sched_overhead_base_s", self.sched_overhead_base_s),
            ("sched_overhead_per_site_s", self.sched_overhead_per_site_s),
            ("bootstrap_s", self.bootstrap_s),
            ("shutdown_s", self.shutdown_s),
            ("middleware_s", self.middleware_s),
            ("bridge_idle_s", self.bridge_idle_s),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("simulation.{name}"), "must be a finite value >= 0"));
            }
        }
        if self.scheduler_interval_s <= 0.0 {
            return Err(Error::config("simulation.scheduler_interval_s", "must be > 0"));
        }
        Ok(())
    }

    pub fn sched_overhead(&self, n_sites: usize) -> f64 {
        self.sched_overhead_base_s + self.sched_overhead_per_site_s * n_sites as f64
    }

    /// Worst-case time a unit of `w` holds its pilot beyond its duration.
    pub fn unit_margin(&self, w: &Workload, sites: &[Site]) -> f64 {
        let sched = self.sched_overhead(sites.len());
        if !self.staging {
            return sched;
        }
        let worst = w
            .tasks()
            .iter()
            .flat_map(|t| {
                sites.iter().map(move |s| {
                    t.inputs.iter().chain(&t.outputs).map(|f| s.transfer_time(f.size_bytes)).sum::<f64>()
                })
            })
            .fold(0.0, f64::max);
        sched + worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Start,
    PilotActivates(usize),
    PilotReady(usize),
    PilotExpires(usize),
    PilotShutdownDone(usize),
    UnitDispatched(usize, u32),
    UnitStageInDone(usize, u32),
    UnitExecDone(usize, u32),
    UnitStageOutDone(usize, u32),
    Tick,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // reversed so the max-heap pops the earliest event first
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

/// Outcome of one simulated execution.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub trace: Trace,
    pub unschedulable: Vec<String>,
    /// Plans used, one per stage for staged runs.
    pub plans: Vec<ExecutionPlan>,
}

impl RunResult {
    pub fn completed(&self) -> bool {
        self.unschedulable.is_empty()
    }
}

pub(crate) struct Streams {
    streams: HashMap<String, QueueStream>,
}

impl Streams {
    pub(crate) fn new(seed: u64, sites: &[Site]) -> Self {
        Streams {
            streams: sites.iter().map(|s| (s.name.clone(), QueueStream::new(seed, s))).collect(),
        }
    }
}

struct StageOutcome {
    last_done: f64,
    unschedulable: Vec<String>,
}

#[derive(Debug, Default, Clone)]
struct SiteRuntime {
    completed: u32,
    failed: u32,
    recent: VecDeque<f64>,
    stalled: bool,
    waiting_activation: VecDeque<usize>,
}

struct Engine<'a> {
    plan: &'a ExecutionPlan,
    sites: &'a [Site],
    site_idx: HashMap<&'a str, usize>,
    config: &'a SimConfig,
    trace: &'a mut Trace,
    streams: &'a mut Streams,
    next_pilot_id: &'a mut u32,

    t0: f64,
    now: f64,
    seq: u64,
    events: BinaryHeap<Event>,
    ledger: ResourceLedger,

    pilots: Vec<Pilot>,
    pilot_site: Vec<usize>,
    site_pilot_cap: Vec<u32>,

    units: Vec<ComputeUnit>,
    attempt: Vec<u32>,
    /// (stage-in, stage-out) seconds per unit per site
    staging: Vec<Vec<(f64, f64)>>,
    unit_site: Vec<Option<usize>>,
    remaining_deps: Vec<usize>,
    consumers: Vec<Vec<usize>>,
    terminal: Vec<bool>,
    open: usize,

    /// Ready units waiting for a pilot (late) or a site (early).
    queue: Vec<usize>,
    site_queue: Vec<Vec<usize>>,
    site_rt: Vec<SiteRuntime>,

    sched_overhead: f64,
    tick_pending: bool,
    finished: bool,
    last_done: f64,
    unschedulable: Vec<String>,
}

impl<'a> Engine<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        plan: &'a ExecutionPlan,
        w: &Workload,
        sites: &'a [Site],
        config: &'a SimConfig,
        trace: &'a mut Trace,
        streams: &'a mut Streams,
        next_pilot_id: &'a mut u32,
        t0: f64,
    ) -> Result<Self> {
        validate_plan(plan, sites)?;
        let site_idx: HashMap<&str, usize> = sites.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
        let site_pilot_cap = sites.iter().map(|s| plan.pilots_on(&s.name)).collect();

        let units: Vec<ComputeUnit> = w.tasks().iter().map(|t| ComputeUnit::from_task(t, t0)).collect();
        let staging = w
            .tasks()
            .iter()
            .map(|t| {
                sites
                    .iter()
                    .map(|s| {
                        if !config.staging {
                            return (0.0, 0.0);
                        }
                        let sum = |fs: &[crate::workload::FileRef]| fs.iter().map(|f| s.transfer_time(f.size_bytes)).sum();
                        (sum(&t.inputs), sum(&t.outputs))
                    })
                    .collect()
            })
            .collect();
        let mut consumers = vec![Vec::new(); units.len()];
        let remaining_deps: Vec<usize> = (0..units.len()).map(|i| w.producers(i).len()).collect();
        for i in 0..units.len() {
            for &p in w.producers(i) {
                consumers[p].push(i);
            }
        }
        let n = units.len();
        Ok(Engine {
            plan,
            sites,
            site_idx,
            config,
            trace,
            streams,
            next_pilot_id,
            t0,
            now: t0,
            seq: 0,
            events: BinaryHeap::new(),
            ledger: ResourceLedger::new(sites),
            pilots: Vec::new(),
            pilot_site: Vec::new(),
            site_pilot_cap,
            units,
            attempt: vec![0; n],
            staging,
            unit_site: vec![None; n],
            remaining_deps,
            consumers,
            terminal: vec![false; n],
            open: n,
            queue: Vec::new(),
            site_queue: vec![Vec::new(); sites.len()],
            site_rt: vec![SiteRuntime::default(); sites.len()],
            sched_overhead: config.sched_overhead(plan.sites().len()),
            tick_pending: false,
            finished: false,
            last_done: t0,
            unschedulable: Vec::new(),
        })
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn record_unit(&mut self, u: usize, state: &str) {
        let bound = self.units[u].bound_pilot.map(|p| p.to_string());
        let id = self.units[u].task_id.clone();
        self.trace.push(EntityKind::Unit, id, state, self.now, bound);
    }

    fn record_pilot(&mut self, p: usize, state: &str) {
        let site = self.sites[self.pilot_site[p]].name.clone();
        self.trace.push(EntityKind::Pilot, self.pilots[p].id.to_string(), state, self.now, Some(site));
    }

    fn run(mut self) -> Result<StageOutcome> {
        for u in 0..self.units.len() {
            self.record_unit(u, "new");
        }
        for u in 0..self.units.len() {
            if self.remaining_deps[u] == 0 {
                self.queue.push(u);
            }
        }
        self.push(self.t0 + self.config.middleware_s, EventKind::Start);

        while let Some(first) = self.events.pop() {
            self.now = first.time;
            let mut dirty = self.handle(first.kind)?;
            while self.events.peek().is_some_and(|e| e.time == self.now) {
                let e = self.events.pop().expect("peeked");
                dirty |= self.handle(e.kind)?;
            }
            if dirty && !self.finished {
                self.pass()?;
            }
            if self.open == 0 && !self.finished {
                self.finish()?;
            }
        }
        // whatever is still open could never run
        for u in 0..self.units.len() {
            if !self.terminal[u] {
                self.mark_unschedulable(u);
            }
        }
        Ok(StageOutcome {
            last_done: self.last_done,
            unschedulable: self.unschedulable,
        })
    }

    fn handle(&mut self, kind: EventKind) -> Result<bool> {
        if self.finished && !matches!(kind, EventKind::PilotShutdownDone(_)) {
            return Ok(false);
        }
        match kind {
            EventKind::Start => {
                self.trace.push(EntityKind::Middleware, "scheduler", "submitting", self.now, None);
                if self.plan.provisioning == Provisioning::Static {
                    for d in self.plan.pilot_descriptions.clone() {
                        self.submit(d)?;
                    }
                }
                Ok(true)
            }
            EventKind::PilotActivates(p) => {
                if self.pilots[p].state != PilotState::Queued {
                    return Ok(false);
                }
                self.activate(p)
            }
            EventKind::PilotReady(p) => {
                if self.pilots[p].state != PilotState::Active || self.pilots[p].draining {
                    return Ok(false);
                }
                self.record_pilot(p, "ready");
                Ok(true)
            }
            EventKind::PilotExpires(p) => {
                if self.pilots[p].state == PilotState::Active && !self.pilots[p].draining {
                    self.drain(p);
                }
                Ok(false)
            }
            EventKind::PilotShutdownDone(p) => {
                let site = self.pilot_site[p];
                self.pilots[p].transition(PilotState::Done, self.now)?;
                self.record_pilot(p, "done");
                let cores = self.pilots[p].description.cores;
                self.ledger.release(&self.sites[site].name, cores, true)?;
                if matches!(self.plan.provisioning, Provisioning::Packed(_)) && self.pilots[p].units_run == 0 && !self.site_queue[site].is_empty() {
                    // a repacked pilot that could not take any of the backlog
                    self.site_rt[site].stalled = true;
                }
                let waiting: Vec<usize> = self.site_rt[site].waiting_activation.drain(..).collect();
                for q in waiting {
                    if self.pilots[q].state == PilotState::Queued {
                        self.activate(q)?;
                    }
                }
                Ok(true)
            }
            EventKind::UnitDispatched(u, a) if a == self.attempt[u] => {
                let p = self.unit_pilot(u);
                let (si, _) = self.staging[u][self.pilot_site[p]];
                if self.units[u].has_inputs {
                    self.units[u].advance(UnitState::StagingInput, self.now)?;
                    self.record_unit(u, "staging_input");
                    self.push(self.now + si, EventKind::UnitStageInDone(u, a));
                } else {
                    self.start_exec(u, a)?;
                }
                Ok(false)
            }
            EventKind::UnitStageInDone(u, a) if a == self.attempt[u] => {
                self.start_exec(u, a)?;
                Ok(false)
            }
            EventKind::UnitExecDone(u, a) if a == self.attempt[u] => {
                if self.units[u].has_outputs {
                    let p = self.unit_pilot(u);
                    let (_, so) = self.staging[u][self.pilot_site[p]];
                    self.units[u].advance(UnitState::StagingOutput, self.now)?;
                    self.record_unit(u, "staging_output");
                    self.push(self.now + so, EventKind::UnitStageOutDone(u, a));
                    Ok(false)
                } else {
                    self.complete(u)
                }
            }
            EventKind::UnitStageOutDone(u, a) if a == self.attempt[u] => self.complete(u),
            EventKind::UnitDispatched(..)
            | EventKind::UnitStageInDone(..)
            | EventKind::UnitExecDone(..)
            | EventKind::UnitStageOutDone(..) => Ok(false),
            EventKind::Tick => {
                self.tick_pending = false;
                Ok(true)
            }
        }
    }

    fn unit_pilot(&self, u: usize) -> usize {
        let id = self.units[u].bound_pilot.expect("dispatched unit is bound");
        self.pilots.iter().position(|p| p.id == id).expect("bound pilot exists")
    }

    fn start_exec(&mut self, u: usize, a: u32) -> Result<()> {
        self.units[u].advance(UnitState::Executing, self.now)?;
        self.record_unit(u, "executing");
        self.push(self.now + self.units[u].duration_s, EventKind::UnitExecDone(u, a));
        Ok(())
    }

    fn complete(&mut self, u: usize) -> Result<bool> {
        self.units[u].advance(UnitState::Done, self.now)?;
        self.record_unit(u, "done");
        let p = self.unit_pilot(u);
        self.pilots[p].free_cores += self.units[u].cores;
        self.pilots[p].units_run += 1;
        self.site_rt[self.pilot_site[p]].completed += 1;
        self.terminal[u] = true;
        self.open -= 1;
        self.last_done = self.last_done.max(self.now);
        for k in 0..self.consumers[u].len() {
            let c = self.consumers[u][k];
            self.remaining_deps[c] -= 1;
            if self.remaining_deps[c] == 0 && !self.terminal[c] {
                self.queue.push(c);
            }
        }
        Ok(true)
    }

    fn submit(&mut self, d: PilotDescription) -> Result<()> {
        let site = *self.site_idx.get(d.site.as_str()).ok_or_else(|| Error::UnknownSite(d.site.clone()))?;
        let id = PilotId(*self.next_pilot_id);
        let stream = self.streams.streams.get_mut(&d.site).ok_or_else(|| Error::UnknownSite(d.site.clone()))?;
        let (pilot, at) = submit_pilot(id, d, &self.sites[site], &mut self.ledger, stream, self.now)?;
        *self.next_pilot_id += 1;
        self.pilots.push(pilot);
        self.pilot_site.push(site);
        let p = self.pilots.len() - 1;
        self.record_pilot(p, "queued");
        self.push(at, EventKind::PilotActivates(p));
        Ok(())
    }

    fn activate(&mut self, p: usize) -> Result<bool> {
        let site = self.pilot_site[p];
        let waited = self.now - self.pilots[p].submit_time.unwrap_or(self.now);
        let cores = self.pilots[p].description.cores;
        if !self.ledger.try_activate(&self.sites[site], cores, waited)? {
            self.site_rt[site].waiting_activation.push_back(p);
            return Ok(false);
        }
        self.pilots[p].transition(PilotState::Active, self.now)?;
        self.record_pilot(p, "active");
        let d = &self.pilots[p].description;
        let (ready, expiry) = (self.now + d.bootstrap_s, self.now + d.walltime_s - d.shutdown_s);
        if ready > self.now {
            self.push(ready, EventKind::PilotReady(p));
        } else {
            self.record_pilot(p, "ready");
        }
        self.push(expiry, EventKind::PilotExpires(p));
        Ok(true)
    }

    fn drain(&mut self, p: usize) {
        self.pilots[p].draining = true;
        self.record_pilot(p, "draining");
        let at = self.now + self.pilots[p].description.shutdown_s;
        self.push(at, EventKind::PilotShutdownDone(p));
    }

    fn occupancy(&self, u: usize, site: usize) -> f64 {
        let (si, so) = self.staging[u][site];
        self.sched_overhead + si + self.units[u].duration_s + so
    }

    fn mark_unschedulable(&mut self, u: usize) {
        let mut stack = vec![u];
        while let Some(u) = stack.pop() {
            if self.terminal[u] {
                continue;
            }
            self.terminal[u] = true;
            self.open -= 1;
            self.record_unit(u, "unschedulable");
            self.unschedulable.push(self.units[u].task_id.clone());
            stack.extend(self.consumers[u].iter().copied());
        }
    }

    fn pass(&mut self) -> Result<()> {
        loop {
            let mut progress = false;
            if self.plan.binding == BindingMode::EarlyToResource {
                progress |= self.bind_to_sites();
            }
            progress |= self.assign()?;
            if !progress {
                break;
            }
        }
        self.release_idle();
        if let Provisioning::Packed(pack) = self.plan.provisioning {
            self.provision(&pack)?;
        }
        #[cfg(debug_assertions)]
        self.check_conservation();
        Ok(())
    }

    fn bind_to_sites(&mut self) -> bool {
        let window = self.plan.scheduler.throttle.rate_window_s;
        let sites: Vec<usize> = self.plan.sites().iter().map(|s| self.site_idx[s]).collect();
        let mut states: Vec<SiteScoreState> = sites
            .iter()
            .map(|&k| {
                let rt = &mut self.site_rt[k];
                while rt.recent.front().is_some_and(|&t| t <= self.now - window) {
                    rt.recent.pop_front();
                }
                let elapsed = (self.now - self.t0).max(self.config.scheduler_interval_s);
                let ended = rt.completed + rt.failed;
                SiteScoreState {
                    site: self.sites[k].name.clone(),
                    queued_count: self.site_queue[k].len() as u32,
                    completion_rate: rt.completed as f64 / elapsed,
                    failure_rate: if ended == 0 { 0.0 } else { rt.failed as f64 / ended as f64 },
                    recent_submissions: rt.recent.len() as u32,
                }
            })
            .collect();
        let refs: Vec<&ComputeUnit> = self.queue.iter().map(|&u| &self.units[u]).collect();
        let bound = schedule_early(&refs, &mut states, &self.plan.scheduler);
        let mut taken = vec![false; self.queue.len()];
        let mut any = false;
        for (site, positions) in bound {
            let k = self.site_idx[site.as_str()];
            for pos in positions {
                let u = self.queue[pos];
                taken[pos] = true;
                self.unit_site[u] = Some(k);
                self.site_queue[k].push(u);
                self.site_rt[k].recent.push_back(self.now);
                any = true;
            }
        }
        let mut i = 0;
        self.queue.retain(|_| {
            i += 1;
            !taken[i - 1]
        });
        if !self.queue.is_empty() && !self.tick_pending {
            self.tick_pending = true;
            self.push(self.now + self.config.scheduler_interval_s, EventKind::Tick);
        }
        any
    }

    fn assign(&mut self) -> Result<bool> {
        let mut any = false;
        match self.plan.binding {
            BindingMode::LateToPilot => {
                let queue = std::mem::take(&mut self.queue);
                let (rest, changed) = self.assign_from(queue, None)?;
                self.queue = rest;
                any |= changed;
            }
            BindingMode::EarlyToResource => {
                for k in 0..self.sites.len() {
                    if self.site_queue[k].is_empty() {
                        continue;
                    }
                    let queue = std::mem::take(&mut self.site_queue[k]);
                    let (rest, changed) = self.assign_from(queue, Some(k))?;
                    self.site_queue[k] = rest;
                    any |= changed;
                }
            }
        }
        Ok(any)
    }

    /// Runs one backfill sweep of `queue` over the pilots of `site` (or all
    /// pilots) and dispatches the assignments. Returns the units left over.
    fn assign_from(&mut self, queue: Vec<usize>, site: Option<usize>) -> Result<(Vec<usize>, bool)> {
        let candidates: Vec<usize> = (0..self.pilots.len())
            .filter(|&p| site.is_none_or(|k| self.pilot_site[p] == k))
            .filter(|&p| !self.pilots[p].state.is_terminal())
            .collect();
        let cand_pilots: Vec<Pilot> = candidates.iter().map(|&p| self.pilots[p].clone()).collect();
        let site_of: HashMap<PilotId, usize> = candidates.iter().map(|&p| (self.pilots[p].id, self.pilot_site[p])).collect();
        let units: Vec<&ComputeUnit> = queue.iter().map(|&u| &self.units[u]).collect();
        let schedule = schedule_late(&units, &cand_pilots, self.now, |pos, p| self.occupancy(queue[pos], site_of[&p.id]));

        let mut gone = vec![false; queue.len()];
        for &(pos, pid) in &schedule.assignments {
            let u = queue[pos];
            let p = candidates[cand_pilots.iter().position(|c| c.id == pid).expect("pilot from candidates")];
            gone[pos] = true;
            self.pilots[p].free_cores -= self.units[u].cores;
            self.units[u].bound_pilot = Some(pid);
            self.units[u].advance(UnitState::Scheduled, self.now)?;
            self.record_unit(u, "scheduled");
            self.push(self.now + self.sched_overhead, EventKind::UnitDispatched(u, self.attempt[u]));
        }
        // with packed provisioning, wide units wait for a pilot sized to them
        if !matches!(self.plan.provisioning, Provisioning::Packed(_)) {
            for &pos in &schedule.unschedulable {
                gone[pos] = true;
                self.mark_unschedulable(queue[pos]);
            }
        }
        let changed = gone.iter().any(|&g| g);
        let rest = queue.into_iter().enumerate().filter(|(i, _)| !gone[*i]).map(|(_, u)| u).collect();
        Ok((rest, changed))
    }

    /// Drains ready, idle pilots that no remaining unit could still use.
    fn release_idle(&mut self) {
        for p in 0..self.pilots.len() {
            let pilot = &self.pilots[p];
            if !pilot.accepts_work(self.now) || pilot.free_cores != pilot.description.cores {
                continue;
            }
            let site = self.pilot_site[p];
            let end = pilot.usable_until().unwrap_or(f64::NEG_INFINITY);
            let usable = (0..self.units.len()).any(|u| {
                !self.terminal[u]
                    && self.units[u].state == UnitState::New
                    && self.units[u].cores <= pilot.description.cores
                    && self.unit_site[u].is_none_or(|k| k == site)
                    && self.now + self.occupancy(u, site) <= end + TIME_EPS
            });
            if !usable {
                self.drain(p);
            }
        }
    }

    /// Tops up each site's pilots to cover its bound backlog.
    fn provision(&mut self, pack: &PackParams) -> Result<()> {
        let width = pack.width();
        for k in 0..self.sites.len() {
            if self.site_rt[k].stalled || self.site_queue[k].is_empty() {
                continue;
            }
            let mut backlog: Vec<usize> = Vec::new();
            for &u in &self.site_queue[k] {
                if self.units[u].cores > width {
                    backlog.push(u);
                }
            }
            for u in backlog {
                self.site_queue[k].retain(|&v| v != u);
                self.mark_unschedulable(u);
            }
            let shortest = self.site_queue[k]
                .iter()
                .map(|&u| self.occupancy(u, k))
                .fold(f64::INFINITY, f64::min);
            let mut capacity: u64 = 0;
            for p in 0..self.pilots.len() {
                if self.pilot_site[p] != k {
                    continue;
                }
                let pilot = &self.pilots[p];
                match pilot.state {
                    PilotState::Queued => capacity += u64::from(pilot.description.cores),
                    PilotState::Active if !pilot.draining => {
                        let start = self.now.max(pilot.ready_time().unwrap_or(self.now));
                        if start + shortest <= pilot.usable_until().unwrap_or(0.0) + TIME_EPS {
                            capacity += u64::from(pilot.free_cores);
                        }
                    }
                    _ => {}
                }
            }
            let mut covered: u64 = 0;
            let mut uncovered: Vec<UnitShape> = Vec::new();
            for &u in &self.site_queue[k] {
                let c = u64::from(self.units[u].cores);
                if covered + c <= capacity {
                    covered += c;
                } else {
                    covered = capacity;
                    uncovered.push(UnitShape {
                        cores: self.units[u].cores,
                        duration_s: self.units[u].duration_s,
                    });
                }
            }
            if uncovered.is_empty() {
                continue;
            }
            let held = self.ledger.usage(&self.sites[k].name).map_or(0, |u| u.pilots());
            let limit = self.sites[k].max_concurrent_pilots.min(self.site_pilot_cap[k]);
            let room = limit.saturating_sub(held) as usize;
            let boxes = pack_pilots(&self.sites[k].name, &uncovered, pack, self.config.bootstrap_s, self.config.shutdown_s)?;
            for d in boxes.into_iter().take(room) {
                self.submit(d)?;
            }
        }
        Ok(())
    }

    #[cfg(debug_assertions)]
    fn check_conservation(&self) {
        if self.plan.binding != BindingMode::LateToPilot {
            return;
        }
        for &u in &self.queue {
            for (p, pilot) in self.pilots.iter().enumerate() {
                let occ = self.occupancy(u, self.pilot_site[p]);
                debug_assert!(
                    !pilot.fits(self.units[u].cores, occ, self.now),
                    "unit {} waits while {} has room",
                    self.units[u].task_id,
                    pilot.id
                );
            }
        }
    }

    /// All units are terminal: cancel queued pilots, drain the rest.
    fn finish(&mut self) -> Result<()> {
        self.finished = true;
        for p in 0..self.pilots.len() {
            match self.pilots[p].state {
                PilotState::Queued => {
                    self.pilots[p].transition(PilotState::Canceled, self.now)?;
                    self.record_pilot(p, "canceled");
                    let site = &self.sites[self.pilot_site[p]].name;
                    self.ledger.release(site, 0, false)?;
                }
                PilotState::Active if !self.pilots[p].draining => self.drain(p),
                _ => {}
            }
        }
        Ok(())
    }
}

fn validate_plan(plan: &ExecutionPlan, sites: &[Site]) -> Result<()> {
    if plan.pilot_descriptions.is_empty() {
        return Err(Error::InfeasiblePlan("plan has no pilots".into()));
    }
    if matches!(plan.provisioning, Provisioning::Packed(_)) && plan.binding != BindingMode::EarlyToResource {
        return Err(Error::invalid("packed provisioning requires early binding"));
    }
    let mut per_site: BTreeMap<&str, u32> = BTreeMap::new();
    for d in &plan.pilot_descriptions {
        d.validate()?;
        let site = sites
            .iter()
            .find(|s| s.name == d.site)
            .ok_or_else(|| Error::UnknownSite(d.site.clone()))?;
        if d.cores > site.total_cores {
            return Err(Error::CapacityExceeded {
                site: site.name.clone(),
                requested: d.cores,
                available: site.total_cores,
            });
        }
        *per_site.entry(&site.name).or_default() += 1;
    }
    if plan.provisioning == Provisioning::Static {
        for (name, n) in per_site {
            let site = sites.iter().find(|s| s.name == name).expect("checked above");
            if n > site.max_concurrent_pilots {
                return Err(Error::RejectedSubmission {
                    site: name.to_string(),
                    active: n,
                    max: site.max_concurrent_pilots,
                });
            }
        }
    }
    Ok(())
}

/// Executes `w` under one plan. Staged workloads run with units held back
/// until their inputs exist; pilots are shared across stages.
pub fn run(plan: &ExecutionPlan, w: &Workload, sites: &[Site], config: &SimConfig) -> Result<RunResult> {
    config.validate()?;
    for s in sites {
        s.validate()?;
    }
    let mut trace = Trace::new();
    trace.push(EntityKind::Middleware, "scheduler", "start", 0.0, None);
    let mut streams = Streams::new(config.seed, sites);
    let mut next_id = 0;
    let out = Engine::new(plan, w, sites, config, &mut trace, &mut streams, &mut next_id, 0.0)?.run()?;
    Ok(RunResult {
        trace,
        unschedulable: out.unschedulable,
        plans: vec![plan.clone()],
    })
}

/// Executes a staged workload one stage at a time. Each stage's tasks are
/// submitted to the bridge as they become ready; the flushed bag is planned by
/// `planner` and run on fresh pilots.
pub fn run_staged<F>(w: &Workload, sites: &[Site], config: &SimConfig, mut planner: F) -> Result<RunResult>
where
    F: FnMut(u32, &Workload) -> Result<ExecutionPlan>,
{
    config.validate()?;
    for s in sites {
        s.validate()?;
    }
    let mut trace = Trace::new();
    trace.push(EntityKind::Middleware, "scheduler", "start", 0.0, None);
    let mut streams = Streams::new(config.seed, sites);
    let mut next_id = 0;
    let mut buffer = SubmissionBuffer::new(config.bridge_idle_s)?;
    let mut plans = Vec::new();
    let mut unschedulable = Vec::new();
    let mut t = 0.0;

    for stage in 0..w.stages() {
        let stage_tasks: Vec<_> = w.tasks().iter().filter(|task| task.stage == stage).collect();
        if !unschedulable.is_empty() {
            for task in stage_tasks {
                trace.push(EntityKind::Unit, task.id.clone(), "unschedulable", t, None);
                unschedulable.push(task.id.clone());
            }
            continue;
        }
        for task in &stage_tasks {
            let record = TaskRecord::from_task(task, &format!("stage{}", stage + 1));
            buffer
                .submit_record(record, t)
                .map_err(|e| Error::InvalidState(format!("bridge rejected {}: {e}", task.id)))?;
        }
        let flush_at = t + config.bridge_idle_s;
        let bag = buffer
            .idle_flush(flush_at)
            .ok_or_else(|| Error::InvalidState(format!("stage {stage} was not flushed")))?;
        trace.push(EntityKind::Middleware, "bridge", "flush", flush_at, None);
        let plan = planner(stage, &bag)?;
        let out = Engine::new(&plan, &bag, sites, config, &mut trace, &mut streams, &mut next_id, flush_at)?.run()?;
        plans.push(plan);
        t = out.last_done;
        unschedulable.extend(out.unschedulable);
    }
    Ok(RunResult {
        trace,
        unschedulable,
        plans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ttc, ttc_ideal};
    use crate::resource::QueueModel;
    use crate::strategy::{plan_aimes, plan_fixed, FixedShape, PlanOverheads};
    use crate::workload::{make_bot, make_extasy};

    fn single_pilot(site: &str, cores: u32, binding: BindingMode) -> ExecutionPlan {
        let w = make_bot(1, 1.0, 1).unwrap();
        let shape = FixedShape {
            pilots_per_site: 1,
            cores_per_pilot: cores,
            walltime_s: 1e6,
        };
        plan_fixed(&w, &[Site::idle(site, 1 << 20)], shape, binding, PlanOverheads::ZERO).unwrap()
    }

    fn makespan(r: &RunResult) -> f64 {
        ttc(&r.trace).unwrap().ttc_s
    }

    #[test]
    fn one_pilot_one_task() {
        let sites = [Site::idle("s", 64)];
        let w = make_bot(1, 100.0, 1).unwrap();
        let plan = single_pilot("s", 1, BindingMode::LateToPilot);
        let r = run(&plan, &w, &sites, &SimConfig::ideal(0)).unwrap();
        assert!(r.completed());
        assert_eq!(makespan(&r), 100.0);
    }

    #[test]
    fn one_core_serialises() {
        let sites = [Site::idle("s", 64)];
        let w = make_bot(8, 100.0, 1).unwrap();
        let plan = single_pilot("s", 1, BindingMode::LateToPilot);
        let r = run(&plan, &w, &sites, &SimConfig::ideal(0)).unwrap();
        assert_eq!(makespan(&r), 800.0);
    }

    #[test]
    fn no_pilots_is_infeasible() {
        let sites = [Site::idle("s", 64)];
        let w = make_bot(1, 100.0, 1).unwrap();
        let mut plan = single_pilot("s", 1, BindingMode::LateToPilot);
        plan.pilot_descriptions.clear();
        assert!(matches!(run(&plan, &w, &sites, &SimConfig::ideal(0)), Err(Error::InfeasiblePlan(_))));
    }

    #[test]
    fn too_many_pilots_rejected() {
        let site = Site {
            max_concurrent_pilots: 20,
            ..Site::idle("s", 10_000)
        };
        let w = make_bot(1, 100.0, 1).unwrap();
        let shape = FixedShape {
            pilots_per_site: 21,
            cores_per_pilot: 1,
            walltime_s: 1000.0,
        };
        let plan = plan_fixed(&w, std::slice::from_ref(&site), shape, BindingMode::LateToPilot, PlanOverheads::ZERO).unwrap();
        assert!(matches!(
            run(&plan, &w, &[site], &SimConfig::ideal(0)),
            Err(Error::RejectedSubmission { .. })
        ));
    }

    #[test]
    fn wide_unit_is_reported() {
        let sites = [Site::idle("s", 64)];
        let w = make_bot(2, 100.0, 4).unwrap();
        let plan = single_pilot("s", 2, BindingMode::LateToPilot);
        let r = run(&plan, &w, &sites, &SimConfig::ideal(0)).unwrap();
        assert_eq!(r.unschedulable.len(), 2);
        assert_eq!(r.trace.unschedulable().len(), 2);
    }

    #[test]
    fn aimes_closure() {
        let sites = [Site::idle("a", 100_000), Site::idle("b", 100_000)];
        for n in [8, 32, 256, 2048] {
            let w = make_bot(n, 1200.0, 1).unwrap();
            let plan = plan_aimes(&w, &sites, 1200.0, 1).unwrap();
            let r = run(&plan, &w, &sites, &SimConfig::ideal(1)).unwrap();
            assert!((makespan(&r) - ttc_ideal(&plan, &w).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn waits_and_overheads_add() {
        let site = Site {
            queue: QueueModel::constant(600.0),
            ..Site::idle("s", 64)
        };
        let w = make_bot(4, 1200.0, 1).unwrap();
        let config = SimConfig {
            sched_overhead_base_s: 0.0,
            sched_overhead_per_site_s: 0.0,
            ..SimConfig::default()
        };
        let overheads = PlanOverheads {
            bootstrap_s: 120.0,
            shutdown_s: 120.0,
            unit_margin_s: 0.0,
        };
        let plan = crate::strategy::AimesPlanner::new(1, overheads).plan(&w, std::slice::from_ref(&site), 1200.0).unwrap();
        let r = run(&plan, &w, &[site], &config).unwrap();
        let b = ttc(&r.trace).unwrap();
        assert_eq!(b.ttc_s, 600.0 + 120.0 + 1200.0 + 120.0);
        assert_eq!(b.tw_s, 600.0);
    }

    #[test]
    fn staged_under_one_plan() {
        let sites = [Site::idle("s", 64)];
        let w = make_extasy(1, 1000).unwrap();
        let plan = single_pilot("s", 1, BindingMode::LateToPilot);
        let r = run(&plan, &w, &sites, &SimConfig::ideal(0)).unwrap();
        assert!(r.completed());
        assert_eq!(makespan(&r), 870.0);
    }

    #[test]
    fn staged_through_bridge() {
        let sites = [Site::idle("s", 64)];
        let w = make_extasy(1, 1000).unwrap();
        let r = run_staged(&w, &sites, &SimConfig::ideal(0), |_, _| Ok(single_pilot("s", 1, BindingMode::LateToPilot))).unwrap();
        assert!(r.completed());
        assert_eq!(makespan(&r), 870.0);
        assert_eq!(r.plans.len(), 4);
    }

    #[test]
    fn staged_wide_stage_is_reported() {
        let sites = [Site::idle("s", 64)];
        let w = make_extasy(2, 1000).unwrap();
        let r = run_staged(&w, &sites, &SimConfig::ideal(0), |_, _| Ok(single_pilot("s", 1, BindingMode::LateToPilot))).unwrap();
        assert_eq!(r.unschedulable, vec!["s3.000000".to_string(), "s4.000000".to_string()]);
    }

    #[test]
    fn same_seed_same_trace() {
        let sites = [Site {
            queue: QueueModel::lognormal(5.0, 1.0),
            ..Site::idle("s", 4096)
        }];
        let w = make_bot(64, 100.0, 1).unwrap();
        let plan = plan_aimes(&w, &sites, 100.0, 4).unwrap();
        let cfg = |seed| SimConfig {
            seed,
            ..SimConfig::default()
        };
        let a = run(&plan, &w, &sites, &cfg(7)).unwrap().trace;
        let b = run(&plan, &w, &sites, &cfg(7)).unwrap().trace;
        let c = run(&plan, &w, &sites, &cfg(8)).unwrap().trace;
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
