//! Pilot lifecycle, compute units, and the two task-to-pilot binding schedulers.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resource::{sample_queue_wait_loaded, QueueStream, ResourceLedger, Site};
use crate::strategy::{site_select, throttle_gate, SchedulerParams, SiteScoreState};
use crate::workload::Task;

/// Slack for floating-point comparisons against pilot walltime.
pub(crate) const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PilotId(pub u32);

impl fmt::Display for PilotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pilot.{:04}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotDescription {
    pub site: String,
    pub cores: u32,
    pub walltime_s: f64,
    pub bootstrap_s: f64,
    pub shutdown_s: f64,
}

impl PilotDescription {
    pub fn validate(&self) -> Result<()> {
        if self.cores < 1 {
            return Err(Error::invalid("pilot cores must be >= 1"));
        }
        if !(self.bootstrap_s >= 0.0 && self.shutdown_s >= 0.0) {
            return Err(Error::invalid("pilot bootstrap and shutdown must be >= 0"));
        }
        if !(self.walltime_s.is_finite() && self.walltime_s > self.bootstrap_s + self.shutdown_s) {
            return Err(Error::invalid(format!(
                "pilot walltime {} s must exceed bootstrap + shutdown ({} s)",
                self.walltime_s,
                self.bootstrap_s + self.shutdown_s
            )));
        }
        Ok(())
    }

    /// Time available for units between bootstrap and shutdown.
    pub fn usable_s(&self) -> f64 {
        self.walltime_s - self.bootstrap_s - self.shutdown_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotState {
    Described,
    Queued,
    Active,
    Done,
    Canceled,
    Failed,
}

impl PilotState {
    pub fn as_str(self) -> &'static str {
        match self {
            PilotState::Described => "described",
            PilotState::Queued => "queued",
            PilotState::Active => "active",
            PilotState::Done => "done",
            PilotState::Canceled => "canceled",
            PilotState::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, PilotState::Done | PilotState::Canceled | PilotState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pilot {
    pub id: PilotId,
    pub description: PilotDescription,
    pub state: PilotState,
    pub submit_time: Option<f64>,
    pub activate_time: Option<f64>,
    pub end_time: Option<f64>,
    pub free_cores: u32,
    /// Set once the pilot stops accepting units (walltime drain or release).
    pub draining: bool,
    pub units_run: u32,
}

impl Pilot {
    pub fn new(id: PilotId, description: PilotDescription) -> Self {
        Pilot {
            id,
            free_cores: description.cores,
            description,
            state: PilotState::Described,
            submit_time: None,
            activate_time: None,
            end_time: None,
            draining: false,
            units_run: 0,
        }
    }

    pub fn transition(&mut self, to: PilotState, now: f64) -> Result<()> {
        use PilotState::*;
        let ok = matches!(
            (self.state, to),
            (Described, Queued) | (Queued, Active) | (Queued, Canceled) | (Queued, Failed) | (Active, Done) | (Active, Canceled) | (Active, Failed)
        );
        if !ok {
            return Err(Error::InvalidState(format!(
                "{}: {} -> {}",
                self.id,
                self.state.as_str(),
                to.as_str()
            )));
        }
        match to {
            Queued => self.submit_time = Some(now),
            Active => self.activate_time = Some(now),
            _ => self.end_time = Some(now),
        }
        self.state = to;
        Ok(())
    }

    pub fn ready_time(&self) -> Option<f64> {
        self.activate_time.map(|t| t + self.description.bootstrap_s)
    }

    /// Latest instant by which a unit must be finished on this pilot.
    pub fn usable_until(&self) -> Option<f64> {
        self.activate_time
            .map(|t| t + self.description.walltime_s - self.description.shutdown_s)
    }

    pub fn accepts_work(&self, now: f64) -> bool {
        self.state == PilotState::Active
            && !self.draining
            && self.ready_time().is_some_and(|r| r <= now + TIME_EPS)
    }

    /// Whether a unit of `cores` occupying the pilot for `occupancy_s` could start now.
    pub fn fits(&self, cores: u32, occupancy_s: f64, now: f64) -> bool {
        self.accepts_work(now)
            && self.free_cores >= cores
            && self.usable_until().is_some_and(|end| now + occupancy_s <= end + TIME_EPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitState {
    New,
    Scheduled,
    StagingInput,
    Executing,
    StagingOutput,
    Done,
    Failed,
}

impl UnitState {
    pub const ALL: [UnitState; 7] = [
        UnitState::New,
        UnitState::Scheduled,
        UnitState::StagingInput,
        UnitState::Executing,
        UnitState::StagingOutput,
        UnitState::Done,
        UnitState::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            UnitState::New => "new",
            UnitState::Scheduled => "scheduled",
            UnitState::StagingInput => "staging_input",
            UnitState::Executing => "executing",
            UnitState::StagingOutput => "staging_output",
            UnitState::Done => "done",
            UnitState::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        UnitState::ALL.into_iter().find(|u| u.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, UnitState::Done | UnitState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeUnit {
    pub task_id: String,
    pub cores: u32,
    pub duration_s: f64,
    pub has_inputs: bool,
    pub has_outputs: bool,
    pub state: UnitState,
    pub bound_pilot: Option<PilotId>,
    timestamps: [Option<f64>; 7],
}

impl ComputeUnit {
    pub fn from_task(task: &Task, now: f64) -> Self {
        let mut timestamps = [None; 7];
        timestamps[UnitState::New as usize] = Some(now);
        ComputeUnit {
            task_id: task.id.clone(),
            cores: task.cores,
            duration_s: task.duration_s,
            has_inputs: !task.inputs.is_empty(),
            has_outputs: !task.outputs.is_empty(),
            state: UnitState::New,
            bound_pilot: None,
            timestamps,
        }
    }

    pub fn timestamp(&self, state: UnitState) -> Option<f64> {
        self.timestamps[state as usize]
    }

    /// Moves the unit along its state path. Staging states may be skipped only
    /// when the unit has no files in that direction.
    pub fn advance(&mut self, to: UnitState, now: f64) -> Result<()> {
        use UnitState::*;
        let ok = match (self.state, to) {
            (s, Failed) => !s.is_terminal(),
            (New, Scheduled) => true,
            (Scheduled, StagingInput) => self.has_inputs,
            (Scheduled, Executing) => !self.has_inputs,
            (StagingInput, Executing) => true,
            (Executing, StagingOutput) => self.has_outputs,
            (Executing, Done) => !self.has_outputs,
            (StagingOutput, Done) => true,
            _ => false,
        };
        let last = self.timestamps[self.state as usize].unwrap_or(f64::NEG_INFINITY);
        if !ok || now < last {
            return Err(Error::InvalidState(format!(
                "unit {}: {} -> {} at {now}",
                self.task_id,
                self.state.as_str(),
                to.as_str()
            )));
        }
        self.state = to;
        self.timestamps[to as usize] = Some(now);
        Ok(())
    }

    /// Puts a bound but unfinished unit back to `new`.
    pub fn requeue(&mut self, now: f64) {
        self.state = UnitState::New;
        self.bound_pilot = None;
        self.timestamps = [None; 7];
        self.timestamps[UnitState::New as usize] = Some(now);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingMode {
    /// Units wait in one global queue and go to whichever pilot is active.
    LateToPilot,
    /// Units are committed to sites first, then to pilots on that site.
    EarlyToResource,
}

/// Queues a pilot on `site` and returns it with its activation time.
pub fn submit_pilot(
    id: PilotId,
    desc: PilotDescription,
    site: &Site,
    ledger: &mut ResourceLedger,
    stream: &mut QueueStream,
    now: f64,
) -> Result<(Pilot, f64)> {
    if desc.site != site.name {
        return Err(Error::invalid(format!("pilot for {} submitted to {}", desc.site, site.name)));
    }
    desc.validate()?;
    if desc.cores > site.total_cores {
        return Err(Error::CapacityExceeded {
            site: site.name.clone(),
            requested: desc.cores,
            available: site.total_cores,
        });
    }
    let held = ledger.usage(&site.name).map_or(0, |u| u.pilots());
    ledger.admit(site)?;
    let wait = sample_queue_wait_loaded(site, desc.cores, held, stream)?;
    let mut pilot = Pilot::new(id, desc);
    pilot.transition(PilotState::Queued, now)?;
    Ok((pilot, now + wait))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LateSchedule {
    /// (position in the queue, pilot)
    pub assignments: Vec<(usize, PilotId)>,
    /// Queue positions of units wider than every pilot.
    pub unschedulable: Vec<usize>,
}

/// Greedy backfill over the queue in order. A unit that fits nowhere stays
/// queued without blocking later units. `occupancy(pos, pilot)` gives the full
/// time the unit at queue position `pos` would hold its cores on that pilot.
pub fn schedule_late<F>(queue: &[&ComputeUnit], pilots: &[Pilot], now: f64, occupancy: F) -> LateSchedule
where
    F: Fn(usize, &Pilot) -> f64,
{
    let mut out = LateSchedule::default();
    let Some(widest) = pilots.iter().map(|p| p.description.cores).max() else {
        return out;
    };
    let mut free: Vec<u32> = pilots
        .iter()
        .map(|p| if p.accepts_work(now) { p.free_cores } else { 0 })
        .collect();
    let mut total_free: u64 = free.iter().map(|&f| u64::from(f)).sum();

    for (pos, unit) in queue.iter().enumerate() {
        if unit.cores > widest {
            out.unschedulable.push(pos);
            continue;
        }
        if total_free < u64::from(unit.cores) {
            continue;
        }
        let mut best: Option<usize> = None;
        for (j, p) in pilots.iter().enumerate() {
            if free[j] < unit.cores {
                continue;
            }
            let end = p.usable_until().unwrap_or(f64::NEG_INFINITY);
            if now + occupancy(pos, p) > end + TIME_EPS {
                continue;
            }
            best = match best {
                None => Some(j),
                Some(b) => {
                    let key = |k: usize| (pilots[k].activate_time.unwrap_or(f64::INFINITY), std::cmp::Reverse(free[k]), pilots[k].id);
                    let (ta, fa, ia) = key(j);
                    let (tb, fb, ib) = key(b);
                    let better = ta.total_cmp(&tb).then(fa.cmp(&fb)).then(ia.cmp(&ib)).is_lt();
                    Some(if better { j } else { b })
                }
            };
        }
        if let Some(j) = best {
            free[j] -= unit.cores;
            total_free -= u64::from(unit.cores);
            out.assignments.push((pos, pilots[j].id));
        }
    }
    out
}

/// Commits units to sites. Each site that passes its throttle first receives
/// one unit; the rest go one at a time to the best-scoring open site.
/// `states` is updated with the new queued and submission counts. Returns
/// queue positions per site, in assignment order.
pub fn schedule_early(
    units: &[&ComputeUnit],
    states: &mut [SiteScoreState],
    params: &SchedulerParams,
) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut next = 0usize;

    let mut give = |k: usize, pos: usize, states: &mut [SiteScoreState]| {
        states[k].queued_count += 1;
        states[k].recent_submissions += 1;
        out.entry(states[k].site.clone()).or_default().push(pos);
    };

    let mut seeded = vec![false; states.len()];
    while next < units.len() {
        let open: Vec<SiteScoreState> = states
            .iter()
            .enumerate()
            .filter(|(k, s)| !seeded[*k] && throttle_gate(s, &params.throttle))
            .map(|(_, s)| s.clone())
            .collect();
        let Some(name) = site_select(&open, &params.weights) else {
            break;
        };
        let k = states.iter().position(|s| s.site == name).expect("selected site exists");
        seeded[k] = true;
        give(k, next, states);
        next += 1;
    }

    while next < units.len() {
        let open: Vec<SiteScoreState> = states
            .iter()
            .filter(|s| throttle_gate(s, &params.throttle))
            .cloned()
            .collect();
        let Some(name) = site_select(&open, &params.weights) else {
            break;
        };
        let k = states.iter().position(|s| s.site == name).expect("selected site exists");
        give(k, next, states);
        next += 1;
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CancelOutcome {
    pub requeued: Vec<usize>,
    pub failed: Vec<usize>,
}

/// Cancels a queued or active pilot. Unfinished units bound to it go back to
/// the queue under late binding and fail under early binding.
pub fn cancel_pilot(
    pilot: &mut Pilot,
    units: &mut [ComputeUnit],
    mode: BindingMode,
    now: f64,
) -> Result<CancelOutcome> {
    pilot.transition(PilotState::Canceled, now)?;
    pilot.draining = true;
    let mut out = CancelOutcome::default();
    for (i, u) in units.iter_mut().enumerate() {
        if u.bound_pilot != Some(pilot.id) || u.state.is_terminal() {
            continue;
        }
        match mode {
            BindingMode::LateToPilot => {
                u.requeue(now);
                out.requeued.push(i);
            }
            BindingMode::EarlyToResource => {
                u.advance(UnitState::Failed, now)?;
                out.failed.push(i);
            }
        }
    }
    pilot.free_cores = pilot.description.cores;
    Ok(out)
}
