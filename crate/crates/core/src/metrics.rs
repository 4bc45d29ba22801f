//! Execution traces and the time-to-completion breakdown derived from them.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::strategy::ExecutionPlan;
use crate::workload::Workload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Pilot,
    Unit,
    Middleware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub entity_kind: EntityKind,
    pub entity_id: String,
    pub state: String,
    pub time_s: f64,
    /// Pilot id for units, site name for pilots.
    pub bound_to: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn push(&mut self, kind: EntityKind, id: impl Into<String>, state: &str, time_s: f64, bound_to: Option<String>) {
        self.records.push(TraceRecord {
            entity_kind: kind,
            entity_id: id.into(),
            state: state.to_string(),
            time_s,
            bound_to,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_ndjson<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_ndjson<R: BufRead>(input: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Trace { records })
    }

    /// SHA-256 of the NDJSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_ndjson().as_bytes());
        hex::encode(h.finalize())
    }

    /// Units recorded as unschedulable.
    pub fn unschedulable(&self) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| r.entity_kind == EntityKind::Unit && r.state == "unschedulable")
            .map(|r| r.entity_id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub scheduling_s: f64,
    pub bootstrap_s: f64,
    pub stage_in_s: f64,
    pub exec_s: f64,
    pub stage_out_s: f64,
    pub shutdown_s: f64,
    pub pilot_queue_s: f64,
    pub middleware_s: f64,
}

impl Components {
    pub const NAMES: [&'static str; 8] = [
        "scheduling_s",
        "bootstrap_s",
        "stage_in_s",
        "exec_s",
        "stage_out_s",
        "shutdown_s",
        "pilot_queue_s",
        "middleware_s",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.scheduling_s,
            self.bootstrap_s,
            self.stage_in_s,
            self.exec_s,
            self.stage_out_s,
            self.shutdown_s,
            self.pilot_queue_s,
            self.middleware_s,
        ]
    }

    /// Waiting: queue time plus middleware gaps.
    pub fn waiting(&self) -> f64 {
        self.pilot_queue_s + self.middleware_s
    }

    pub fn executing(&self) -> f64 {
        self.scheduling_s + self.bootstrap_s + self.stage_in_s + self.exec_s + self.stage_out_s + self.shutdown_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtcBreakdown {
    pub ttc_s: f64,
    pub tx_s: f64,
    pub tw_s: f64,
    pub components: Components,
}

#[derive(Debug, Default, Clone)]
struct UnitTimes {
    scheduled: Option<f64>,
    staging_input: Option<f64>,
    executing: Option<f64>,
    staging_output: Option<f64>,
    done: Option<f64>,
    pilot: Option<String>,
}

#[derive(Debug, Default, Clone)]
struct PilotTimes {
    queued: Option<f64>,
    active: Option<f64>,
    ready: Option<f64>,
}

struct Done<'a> {
    done: f64,
    scheduled: f64,
    stage_in_start: f64,
    executing: f64,
    exec_end: f64,
    pilot: &'a str,
}

/// Splits the span of a trace into components along one critical path,
/// walking back from the last unit to finish. Components sum to the span.
pub fn ttc(trace: &Trace) -> Result<TtcBreakdown> {
    if trace.is_empty() {
        return Err(Error::IncompleteTrace("trace is empty".into()));
    }
    let t0 = trace.records.iter().map(|r| r.time_s).fold(f64::INFINITY, f64::min);
    let t_end = trace.records.iter().map(|r| r.time_s).fold(f64::NEG_INFINITY, f64::max);

    let mut units: BTreeMap<&str, UnitTimes> = BTreeMap::new();
    let mut pilots: HashMap<&str, PilotTimes> = HashMap::new();
    for r in &trace.records {
        match r.entity_kind {
            EntityKind::Unit => {
                let u = units.entry(&r.entity_id).or_default();
                let t = Some(r.time_s);
                match r.state.as_str() {
                    "new" => *u = UnitTimes::default(),
                    "scheduled" => {
                        u.scheduled = t;
                        u.pilot = r.bound_to.clone();
                    }
                    "staging_input" => u.staging_input = t,
                    "executing" => u.executing = t,
                    "staging_output" => u.staging_output = t,
                    "done" => u.done = t,
                    _ => {}
                }
            }
            EntityKind::Pilot => {
                let p = pilots.entry(&r.entity_id).or_default();
                match r.state.as_str() {
                    "queued" => p.queued = Some(r.time_s),
                    "active" => p.active = Some(r.time_s),
                    "ready" => p.ready = Some(r.time_s),
                    _ => {}
                }
            }
            EntityKind::Middleware => {}
        }
    }
    if units.is_empty() {
        return Err(Error::IncompleteTrace("trace has no units".into()));
    }

    let mut done: Vec<Done> = Vec::with_capacity(units.len());
    for (id, u) in &units {
        let missing = |what: &str| Error::IncompleteTrace(format!("unit {id} has no {what} record"));
        let d = u.done.ok_or_else(|| missing("done"))?;
        let scheduled = u.scheduled.ok_or_else(|| missing("scheduled"))?;
        let executing = u.executing.ok_or_else(|| missing("executing"))?;
        let pilot = u.pilot.as_deref().ok_or_else(|| missing("pilot binding"))?;
        if !pilots.contains_key(pilot) {
            return Err(Error::IncompleteTrace(format!("unit {id} ran on unknown pilot {pilot}")));
        }
        done.push(Done {
            done: d,
            scheduled,
            stage_in_start: u.staging_input.unwrap_or(executing),
            executing,
            exec_end: u.staging_output.unwrap_or(d),
            pilot,
        });
    }
    done.sort_by(|a, b| a.done.total_cmp(&b.done));

    // Latest unit finished at or before `t`, preferring `pilot` among ties.
    let latest = |t: f64, pilot: Option<&str>| -> Option<usize> {
        let end = done.partition_point(|d| d.done <= t);
        if end == 0 {
            return None;
        }
        let top = done[end - 1].done;
        let mut k = end - 1;
        if let Some(p) = pilot {
            let mut j = end;
            while j > 0 && done[j - 1].done == top {
                if done[j - 1].pilot == p {
                    return Some(j - 1);
                }
                j -= 1;
            }
        }
        while k > 0 && done[k - 1].done == top {
            k -= 1;
        }
        Some(k)
    };

    let mut c = Components::default();
    let mut cur = done.len() - 1;
    c.shutdown_s += t_end - done[cur].done;
    loop {
        let u = &done[cur];
        c.stage_out_s += u.done - u.exec_end;
        c.exec_s += u.exec_end - u.executing;
        c.stage_in_s += u.executing - u.stage_in_start;
        c.scheduling_s += u.stage_in_start - u.scheduled;
        let mut cursor = u.scheduled;

        let p = &pilots[u.pilot];
        let active = p.active.unwrap_or(cursor);
        let ready = p.ready.unwrap_or(active).min(cursor);
        let blocker = latest(cursor, Some(u.pilot));
        let next = match blocker {
            Some(v) if done[v].done > ready => Some(v),
            _ => {
                c.middleware_s += cursor - ready;
                c.bootstrap_s += ready - active;
                let queued = p.queued.unwrap_or(active).min(active);
                c.pilot_queue_s += active - queued;
                cursor = queued;
                latest(cursor, None)
            }
        };
        match next {
            Some(v) => {
                c.middleware_s += cursor - done[v].done;
                cur = v;
            }
            None => {
                c.middleware_s += cursor - t0;
                break;
            }
        }
    }

    Ok(TtcBreakdown {
        ttc_s: t_end - t0,
        tx_s: c.executing(),
        tw_s: c.waiting(),
        components: c,
    })
}

/// Makespan with every pilot available at once and no overheads.
pub fn ttc_ideal(plan: &ExecutionPlan, w: &Workload) -> Result<f64> {
    if plan.pilot_descriptions.is_empty() {
        return Err(Error::InfeasiblePlan("plan has no pilots".into()));
    }
    if w.is_empty() {
        return Err(Error::invalid("workload is empty"));
    }
    let widest_pilot = plan.pilot_descriptions.iter().map(|d| d.cores).max().unwrap_or(0);
    let total_cores: f64 = plan.pilot_descriptions.iter().map(|d| d.cores as f64).sum();
    let mut sum = 0.0;
    for stage in 0..w.stages() {
        let tasks: Vec<_> = w.tasks().iter().filter(|t| t.stage == stage).collect();
        if tasks.is_empty() {
            continue;
        }
        let widest = tasks.iter().map(|t| t.cores).max().unwrap_or(1);
        if widest > widest_pilot {
            return Err(Error::InfeasiblePlan(format!(
                "a task needs {widest} cores but the widest pilot has {widest_pilot}"
            )));
        }
        let (c0, d0) = (tasks[0].cores, tasks[0].duration_s);
        let uniform = tasks.iter().all(|t| t.cores == c0 && t.duration_s == d0);
        sum += if uniform {
            let slots: u64 = plan.pilot_descriptions.iter().map(|d| u64::from(d.cores / c0)).sum();
            (tasks.len() as u64).div_ceil(slots) as f64 * d0
        } else {
            let longest = tasks.iter().map(|t| t.duration_s).fold(0.0, f64::max);
            let work: f64 = tasks.iter().map(|t| t.cores as f64 * t.duration_s).sum();
            longest.max(work / total_cores)
        };
    }
    Ok(sum)
}

/// Percentage of the ideal makespan achieved.
pub fn p_es(ttc_ideal_s: f64, ttc_s: f64) -> Result<f64> {
    if !(ttc_ideal_s > 0.0 && ttc_s > 0.0) {
        return Err(Error::invalid(format!(
            "P_ES needs positive times, got ideal {ttc_ideal_s} and ttc {ttc_s}"
        )));
    }
    Ok(100.0 * ttc_ideal_s / ttc_s)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub stddev: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Stats> {
        if values.is_empty() {
            return Err(Error::invalid("no values to aggregate"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Stats {
            mean,
            stddev,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub ttc_s: Stats,
    pub tx_s: Stats,
    pub tw_s: Stats,
    pub components: BTreeMap<String, Stats>,
}

pub fn aggregate(runs: &[TtcBreakdown]) -> Result<Summary> {
    if runs.is_empty() {
        return Err(Error::invalid("no runs to aggregate"));
    }
    let col = |f: &dyn Fn(&TtcBreakdown) -> f64| Stats::of(&runs.iter().map(f).collect::<Vec<_>>());
    let mut components = BTreeMap::new();
    for (k, name) in Components::NAMES.iter().enumerate() {
        components.insert(name.to_string(), col(&|r| r.components.values()[k])?);
    }
    Ok(Summary {
        runs: runs.len(),
        ttc_s: col(&|r| r.ttc_s)?,
        tx_s: col(&|r| r.tx_s)?,
        tw_s: col(&|r| r.tw_s)?,
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilot::{BindingMode, PilotDescription};
    use crate::strategy::{Provisioning, SchedulerParams};
    use crate::workload::{make_bot, make_extasy};

    fn pilot(tr: &mut Trace, id: &str, q: f64, a: f64, r: f64) {
        tr.push(EntityKind::Pilot, id, "queued", q, Some("s".into()));
        tr.push(EntityKind::Pilot, id, "active", a, Some("s".into()));
        tr.push(EntityKind::Pilot, id, "ready", r, Some("s".into()));
    }

    fn unit(tr: &mut Trace, id: &str, p: &str, sched: f64, exec: f64, done: f64) {
        tr.push(EntityKind::Unit, id, "new", 0.0, None);
        tr.push(EntityKind::Unit, id, "scheduled", sched, Some(p.into()));
        tr.push(EntityKind::Unit, id, "executing", exec, Some(p.into()));
        tr.push(EntityKind::Unit, id, "done", done, Some(p.into()));
    }

    fn sum(b: &TtcBreakdown) -> f64 {
        b.components.values().iter().sum()
    }

    #[test]
    fn queue_wait_is_waiting() {
        let mut tr = Trace::new();
        pilot(&mut tr, "p", 0.0, 600.0, 600.0);
        unit(&mut tr, "u", "p", 600.0, 600.0, 1800.0);
        tr.push(EntityKind::Pilot, "p", "done", 1800.0, Some("s".into()));
        let b = ttc(&tr).unwrap();
        assert_eq!(b.ttc_s, 1800.0);
        assert_eq!(b.tw_s, 600.0);
        assert_eq!(b.tx_s, 1200.0);
    }

    #[test]
    fn components_add_up() {
        let mut tr = Trace::new();
        tr.push(EntityKind::Middleware, "m", "start", 0.0, None);
        pilot(&mut tr, "p0", 5.0, 100.0, 130.0);
        pilot(&mut tr, "p1", 5.0, 900.0, 950.0);
        unit(&mut tr, "a", "p0", 130.0, 131.0, 731.0);
        unit(&mut tr, "b", "p0", 731.0, 732.0, 1332.0);
        unit(&mut tr, "c", "p1", 950.0, 951.0, 1551.0);
        tr.push(EntityKind::Pilot, "p1", "done", 1700.0, Some("s".into()));
        let b = ttc(&tr).unwrap();
        assert_eq!(b.ttc_s, 1700.0);
        assert!((sum(&b) - b.ttc_s).abs() < 1e-9);
        assert!((b.tx_s + b.tw_s - b.ttc_s).abs() < 1e-9);
        // critical path goes through p1's queue
        assert_eq!(b.components.pilot_queue_s, 895.0);
        assert_eq!(b.components.bootstrap_s, 50.0);
        assert_eq!(b.components.shutdown_s, 149.0);
    }

    #[test]
    fn incomplete() {
        let mut tr = Trace::new();
        pilot(&mut tr, "p", 0.0, 0.0, 0.0);
        tr.push(EntityKind::Unit, "u", "new", 0.0, None);
        tr.push(EntityKind::Unit, "u", "scheduled", 0.0, Some("p".into()));
        assert!(matches!(ttc(&tr), Err(Error::IncompleteTrace(_))));
        let mut tr = Trace::new();
        pilot(&mut tr, "p", 0.0, 0.0, 0.0);
        assert!(matches!(ttc(&tr), Err(Error::IncompleteTrace(_))));
        assert!(matches!(ttc(&Trace::new()), Err(Error::IncompleteTrace(_))));
    }

    fn plan(cores: &[u32]) -> ExecutionPlan {
        ExecutionPlan {
            binding: BindingMode::LateToPilot,
            pilot_descriptions: cores
                .iter()
                .map(|&c| PilotDescription {
                    site: "s".into(),
                    cores: c,
                    walltime_s: 1e6,
                    bootstrap_s: 0.0,
                    shutdown_s: 0.0,
                })
                .collect(),
            scheduler: SchedulerParams::default(),
            provisioning: Provisioning::Static,
            concurrency_pct: 100.0,
            resource_pct: 100.0,
        }
    }

    #[test]
    fn ideal_examples() {
        let w = make_bot(2048, 1200.0, 1).unwrap();
        assert_eq!(ttc_ideal(&plan(&[1024, 1024]), &w).unwrap(), 1200.0);
        assert_eq!(ttc_ideal(&plan(&[1024]), &w).unwrap(), 2400.0);
        assert_eq!(ttc_ideal(&plan(&[2048]), &w).unwrap(), 1200.0);
        let w = make_bot(2048, 1200.0, 4).unwrap();
        assert!(matches!(ttc_ideal(&plan(&[2, 2]), &w), Err(Error::InfeasiblePlan(_))));
        let w = make_extasy(256, 1000).unwrap();
        assert_eq!(ttc_ideal(&plan(&[256]), &w).unwrap(), 870.0);
    }

    #[test]
    fn p_es_values() {
        assert_eq!(p_es(1200.0, 1200.0).unwrap(), 100.0);
        assert_eq!(p_es(1200.0, 2400.0).unwrap(), 50.0);
        assert!(p_es(0.0, 10.0).is_err());
        assert!(p_es(10.0, -1.0).is_err());
    }

    #[test]
    fn aggregate_stats() {
        let b = |t: f64| TtcBreakdown {
            ttc_s: t,
            tx_s: t,
            tw_s: 0.0,
            components: Components::default(),
        };
        let s = aggregate(&[b(100.0)]).unwrap();
        assert_eq!(s.ttc_s.mean, 100.0);
        assert_eq!(s.ttc_s.stddev, 0.0);
        let s = aggregate(&[b(100.0), b(200.0)]).unwrap();
        assert_eq!(s.ttc_s.mean, 150.0);
        assert!((s.ttc_s.stddev - 70.710678).abs() < 1e-5);
        assert_eq!((s.ttc_s.min, s.ttc_s.max), (100.0, 200.0));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn ndjson_round_trip() {
        let mut tr = Trace::new();
        pilot(&mut tr, "p", 0.0, 1.5, 2.0);
        unit(&mut tr, "u", "p", 2.0, 2.0, 3.25);
        let text = tr.to_ndjson();
        let back = Trace::read_ndjson(text.as_bytes()).unwrap();
        assert_eq!(back, tr);
        assert_eq!(back.hash(), tr.hash());
        assert!(text.starts_with("{\"entity_kind\":\"pilot\",\"entity_id\":\"p\",\"state\":\"queued\""));
    }
}
