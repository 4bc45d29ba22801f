//! Experiment configuration, bundled presets, seeded repeats and reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, p_es, ttc, ttc_ideal, Stats, Summary, Trace, TtcBreakdown};
use crate::pilot::BindingMode;
use crate::resource::Site;
use crate::simulator::{run, run_staged, RunResult, SimConfig};
use crate::strategy::{
    plan_fixed, plan_packed, AimesPlanner, ExecutionPlan, FixedShape, PackParams, PlanOverheads, SchedulerParams,
};
use crate::workload::{make_bot, make_extasy_with, StageProfile, Workload, DEFAULT_FILE_SIZE_BYTES};

pub const PRESETS: [&str; 5] = ["exp1", "exp2", "exp3", "exp4", "integrated"];

const PRESET_FILES: [(&str, &str); 5] = [
    ("exp1", include_str!("../presets/exp1.toml")),
    ("exp2", include_str!("../presets/exp2.toml")),
    ("exp3", include_str!("../presets/exp3.toml")),
    ("exp4", include_str!("../presets/exp4.toml")),
    ("integrated", include_str!("../presets/integrated.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    Bot {
        sizes: Vec<usize>,
        task_duration_s: f64,
        #[serde(default = "one")]
        cores_per_task: u32,
    },
    Extasy {
        sizes: Vec<usize>,
        #[serde(default = "default_file_size")]
        file_size_bytes: u64,
        #[serde(default)]
        profile: StageProfile,
    },
}

fn one() -> u32 {
    1
}

fn hundred() -> f64 {
    100.0
}

fn default_file_size() -> u64 {
    DEFAULT_FILE_SIZE_BYTES
}

impl WorkloadSpec {
    pub fn sizes(&self) -> &[usize] {
        match self {
            WorkloadSpec::Bot { sizes, .. } | WorkloadSpec::Extasy { sizes, .. } => sizes,
        }
    }

    pub fn build(&self, n: usize, seed: u64) -> Result<Workload> {
        match self {
            WorkloadSpec::Bot {
                task_duration_s,
                cores_per_task,
                ..
            } => make_bot(n, *task_duration_s, *cores_per_task),
            WorkloadSpec::Extasy {
                file_size_bytes,
                profile,
                ..
            } => make_extasy_with(n, *file_size_bytes, profile, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySpec {
    /// Late binding; pilots sized so the whole workload runs concurrently.
    Aimes {
        #[serde(default = "one")]
        pilots_per_site: u32,
        #[serde(default = "hundred")]
        concurrency_pct: f64,
        #[serde(default = "hundred")]
        resource_pct: f64,
    },
    /// The same pilot shape on every site.
    Fixed {
        pilots_per_site: u32,
        cores_per_pilot: u32,
        walltime_s: f64,
        binding: BindingMode,
    },
    /// Early binding with pilots packed from each site's backlog.
    Packed {
        max_pilots_per_site: u32,
        max_nodes: u32,
        cores_per_node: u32,
        slack: f64,
        #[serde(default)]
        scheduler: SchedulerParams,
    },
}

impl StrategySpec {
    pub fn plan(&self, w: &Workload, sites: &[Site], sim: &SimConfig) -> Result<ExecutionPlan> {
        let overheads = PlanOverheads {
            bootstrap_s: sim.bootstrap_s,
            shutdown_s: sim.shutdown_s,
            unit_margin_s: sim.unit_margin(w, sites),
        };
        match self {
            StrategySpec::Aimes {
                pilots_per_site,
                concurrency_pct,
                resource_pct,
            } => {
                let planner = AimesPlanner {
                    pilots_per_site: *pilots_per_site,
                    concurrency_pct: *concurrency_pct,
                    resource_pct: *resource_pct,
                    overheads,
                };
                let longest = w.tasks().iter().map(|t| t.duration_s).fold(0.0, f64::max);
                planner.plan(w, sites, longest)
            }
            StrategySpec::Fixed {
                pilots_per_site,
                cores_per_pilot,
                walltime_s,
                binding,
            } => {
                let shape = FixedShape {
                    pilots_per_site: *pilots_per_site,
                    cores_per_pilot: *cores_per_pilot,
                    walltime_s: *walltime_s,
                };
                plan_fixed(w, sites, shape, *binding, overheads)
            }
            StrategySpec::Packed {
                max_pilots_per_site,
                max_nodes,
                cores_per_node,
                slack,
                scheduler,
            } => {
                let pack = PackParams {
                    max_nodes: *max_nodes,
                    cores_per_node: *cores_per_node,
                    slack: *slack,
                };
                plan_packed(w, sites, *max_pilots_per_site, pack, scheduler.clone(), overheads)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let pos = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("strategy.{field}"), "must be > 0"))
            }
        };
        match self {
            StrategySpec::Aimes {
                pilots_per_site,
                concurrency_pct,
                resource_pct,
            } => {
                pos("pilots_per_site", f64::from(*pilots_per_site))?;
                for (name, v) in [("concurrency_pct", concurrency_pct), ("resource_pct", resource_pct)] {
                    if !(*v > 0.0 && *v <= 100.0) {
                        return Err(Error::config(format!("strategy.{name}"), "must be in (0, 100]"));
                    }
                }
            }
            StrategySpec::Fixed {
                pilots_per_site,
                cores_per_pilot,
                walltime_s,
                ..
            } => {
                pos("pilots_per_site", f64::from(*pilots_per_site))?;
                pos("cores_per_pilot", f64::from(*cores_per_pilot))?;
                pos("walltime_s", *walltime_s)?;
            }
            StrategySpec::Packed {
                max_pilots_per_site,
                max_nodes,
                cores_per_node,
                slack,
                scheduler,
            } => {
                pos("max_pilots_per_site", f64::from(*max_pilots_per_site))?;
                pos("max_nodes", f64::from(*max_nodes))?;
                pos("cores_per_node", f64::from(*cores_per_node))?;
                if !(*slack >= 1.0 && slack.is_finite()) {
                    return Err(Error::config("strategy.slack", "must be >= 1"));
                }
                pos("scheduler.throttle.rate_window_s", scheduler.throttle.rate_window_s)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Also store every run's trace as NDJSON.
    pub keep_traces: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: PathBuf::from("out"),
            keep_traces: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default)]
    pub base_seed: u64,
    pub workload: WorkloadSpec,
    pub strategy: StrategySpec,
    #[serde(default)]
    pub simulation: SimConfig,
    #[serde(default)]
    pub output: OutputSpec,
    pub sites: Vec<Site>,
}

fn default_repeats() -> u32 {
    20
}

/// Pulls the first backquoted name out of a parser message.
fn quoted_field(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| {
            let msg = e.message().to_string();
            let field = quoted_field(&msg).unwrap_or("<document>").to_string();
            Error::config(field, msg.trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        if self.repeats < 1 {
            return Err(Error::config("repeats", "must be >= 1"));
        }
        let sizes = self.workload.sizes();
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::config("workload.sizes", "must list at least one size, all >= 1"));
        }
        match &self.workload {
            WorkloadSpec::Bot {
                task_duration_s,
                cores_per_task,
                ..
            } => {
                if !(*task_duration_s > 0.0 && task_duration_s.is_finite()) {
                    return Err(Error::config("workload.task_duration_s", "must be > 0"));
                }
                if *cores_per_task < 1 {
                    return Err(Error::config("workload.cores_per_task", "must be >= 1"));
                }
            }
            WorkloadSpec::Extasy {
                file_size_bytes,
                profile,
                ..
            } => {
                if *file_size_bytes < 1 {
                    return Err(Error::config("workload.file_size_bytes", "must be >= 1"));
                }
                if profile.stage_durations_s.iter().any(|d| !(*d > 0.0)) {
                    return Err(Error::config("workload.profile.stage_durations_s", "must all be > 0"));
                }
                if !(0.0..1.0).contains(&profile.jitter) {
                    return Err(Error::config("workload.profile.jitter", "must be in [0, 1)"));
                }
            }
        }
        if self.sites.is_empty() {
            return Err(Error::config("sites", "at least one site is required"));
        }
        for (i, s) in self.sites.iter().enumerate() {
            if self.sites[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::config(format!("sites[{i}].name"), format!("duplicate site `{}`", s.name)));
            }
            s.validate()
                .map_err(|e| Error::config(format!("sites[{i}]"), e.to_string()))?;
        }
        self.strategy.validate()?;
        self.simulation.validate()
    }

    fn sim(&self, seed: u64) -> SimConfig {
        SimConfig { seed, ..self.simulation }
    }

    /// Ideal makespan for one size, summed over stages for staged workloads.
    pub fn ideal(&self, n: usize) -> Result<f64> {
        let w = self.workload.build(n, self.base_seed)?;
        let sim = self.sim(self.base_seed);
        if w.stages() <= 1 {
            let plan = self.strategy.plan(&w, &self.sites, &sim)?;
            return ttc_ideal(&plan, &w);
        }
        let mut sum = 0.0;
        for k in 0..w.stages() {
            let stage = w.stage_workload(k)?;
            let plan = self.strategy.plan(&stage, &self.sites, &sim)?;
            sum += ttc_ideal(&plan, &stage)?;
        }
        Ok(sum)
    }

    /// One simulated execution of size `n` with the given seed.
    pub fn simulate(&self, n: usize, seed: u64) -> Result<RunResult> {
        let w = self.workload.build(n, seed)?;
        let sim = self.sim(seed);
        if w.stages() <= 1 {
            let plan = self.strategy.plan(&w, &self.sites, &sim)?;
            run(&plan, &w, &self.sites, &sim)
        } else {
            run_staged(&w, &self.sites, &sim, |_, bag| self.strategy.plan(bag, &self.sites, &sim))
        }
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (_, text) = PRESET_FILES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}` (known: {})", PRESETS.join(", "))))?;
    ExperimentConfig::from_toml_str(text)
}

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESET_FILES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// One row of the per-run CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub experiment: String,
    pub size: usize,
    pub repeat: u32,
    pub seed: u64,
    pub completed: bool,
    pub ttc_s: Option<f64>,
    pub tx_s: Option<f64>,
    pub tw_s: Option<f64>,
    pub ttc_ideal_s: Option<f64>,
    pub p_es: Option<f64>,
    pub p_es_rounded: Option<i64>,
    /// Set when a run beat its ideal makespan.
    pub above_ideal: bool,
    pub scheduling_s: Option<f64>,
    pub bootstrap_s: Option<f64>,
    pub stage_in_s: Option<f64>,
    pub exec_s: Option<f64>,
    pub stage_out_s: Option<f64>,
    pub shutdown_s: Option<f64>,
    pub pilot_queue_s: Option<f64>,
    pub middleware_s: Option<f64>,
    pub unschedulable: usize,
    pub trace_hash: String,
}

impl RunRow {
    fn from_trace(experiment: &str, size: usize, repeat: u32, seed: u64, trace: &Trace, ideal: Option<f64>) -> Result<Self> {
        let unschedulable = trace.unschedulable().len();
        let breakdown = if unschedulable == 0 { Some(ttc(trace)?) } else { None };
        let pes = match (ideal, breakdown) {
            (Some(i), Some(b)) => Some(p_es(i, b.ttc_s)?),
            _ => None,
        };
        let c = breakdown.map(|b| b.components);
        Ok(RunRow {
            experiment: experiment.to_string(),
            size,
            repeat,
            seed,
            completed: unschedulable == 0,
            ttc_s: breakdown.map(|b| b.ttc_s),
            tx_s: breakdown.map(|b| b.tx_s),
            tw_s: breakdown.map(|b| b.tw_s),
            ttc_ideal_s: ideal,
            p_es: pes,
            p_es_rounded: pes.map(|p| p.round() as i64),
            above_ideal: pes.is_some_and(|p| p > 100.0 + 1e-9),
            scheduling_s: c.map(|c| c.scheduling_s),
            bootstrap_s: c.map(|c| c.bootstrap_s),
            stage_in_s: c.map(|c| c.stage_in_s),
            exec_s: c.map(|c| c.exec_s),
            stage_out_s: c.map(|c| c.stage_out_s),
            shutdown_s: c.map(|c| c.shutdown_s),
            pilot_queue_s: c.map(|c| c.pilot_queue_s),
            middleware_s: c.map(|c| c.middleware_s),
            unschedulable,
            trace_hash: trace.hash(),
        })
    }

    pub fn breakdown(&self) -> Option<TtcBreakdown> {
        Some(TtcBreakdown {
            ttc_s: self.ttc_s?,
            tx_s: self.tx_s?,
            tw_s: self.tw_s?,
            components: crate::metrics::Components {
                scheduling_s: self.scheduling_s?,
                bootstrap_s: self.bootstrap_s?,
                stage_in_s: self.stage_in_s?,
                exec_s: self.exec_s?,
                stage_out_s: self.stage_out_s?,
                shutdown_s: self.shutdown_s?,
                pilot_queue_s: self.pilot_queue_s?,
                middleware_s: self.middleware_s?,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub size: usize,
    /// Set when the size could not be planned or simulated.
    pub error: Option<String>,
    pub ttc_ideal_s: Option<f64>,
    pub runs: usize,
    pub completed_runs: usize,
    pub p_es: Option<Stats>,
    pub breakdown: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub sizes: Vec<SizeReport>,
    #[serde(skip)]
    pub rows: Vec<RunRow>,
    #[serde(skip)]
    pub traces: Vec<(usize, u32, Trace)>,
}

impl ExperimentReport {
    /// True when every size was planned and every run finished all units.
    pub fn all_completed(&self) -> bool {
        self.sizes.iter().all(|s| s.error.is_none() && s.completed_runs == s.runs)
    }

    pub fn rows_for(&self, size: usize) -> impl Iterator<Item = &RunRow> {
        self.rows.iter().filter(move |r| r.size == size)
    }

    pub fn runs_csv(&self) -> Result<String> {
        runs_csv(&self.rows)
    }

    /// Mean P_ES per size as a one-row table, rounded and unrounded.
    pub fn pes_table(&self) -> String {
        let mut out = String::from("experiment");
        for s in &self.sizes {
            let _ = write!(out, ",{}", s.size);
        }
        out.push('\n');
        for (label, rounded) in [(self.experiment.clone(), true), (format!("{} (unrounded)", self.experiment), false)] {
            out.push_str(&label);
            for s in &self.sizes {
                match s.p_es {
                    Some(st) if rounded => {
                        let _ = write!(out, ",{}%", st.mean.round() as i64);
                    }
                    Some(st) => {
                        let _ = write!(out, ",{}", st.mean);
                    }
                    None => out.push_str(",n/a"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Writes runs.csv, summary.json, pes_table.csv and, if asked, traces.
    pub fn write(&self, dir: &Path, keep_traces: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("runs.csv"), self.runs_csv()?)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(self)? + "\n")?;
        fs::write(dir.join("pes_table.csv"), self.pes_table())?;
        if keep_traces {
            let tdir = dir.join("traces");
            fs::create_dir_all(&tdir)?;
            for (size, repeat, trace) in &self.traces {
                let f = fs::File::create(tdir.join(trace_file(*size, *repeat)))?;
                trace.write_ndjson(std::io::BufWriter::new(f))?;
            }
        }
        Ok(())
    }
}

fn trace_file(size: usize, repeat: u32) -> String {
    format!("n{size}_r{repeat:03}.ndjson")
}

pub fn runs_csv(rows: &[RunRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Runs every size and repeat of `config`. Repeats run in parallel; repeat
/// `r` uses seed `base_seed + r`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut sizes = Vec::new();
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for &n in config.workload.sizes() {
        let ideal = match config.ideal(n) {
            Ok(v) => v,
            Err(e) => {
                sizes.push(failed_size(n, &e, None));
                continue;
            }
        };
        let results: Vec<Result<(u32, u64, Trace)>> = (0..config.repeats)
            .into_par_iter()
            .map(|r| {
                let seed = config.base_seed + u64::from(r);
                config.simulate(n, seed).map(|out| (r, seed, out.trace))
            })
            .collect();
        let mut size_rows = Vec::new();
        let mut first_err = None;
        for res in results {
            match res {
                Ok((r, seed, trace)) => {
                    size_rows.push(RunRow::from_trace(&config.name, n, r, seed, &trace, Some(ideal))?);
                    if config.output.keep_traces {
                        traces.push((n, r, trace));
                    }
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_err {
            sizes.push(failed_size(n, &e, Some(ideal)));
            continue;
        }
        sizes.push(summarize(n, ideal, &size_rows)?);
        rows.extend(size_rows);
    }
    Ok(ExperimentReport {
        experiment: config.name.clone(),
        sizes,
        rows,
        traces,
    })
}

fn failed_size(n: usize, e: &Error, ideal: Option<f64>) -> SizeReport {
    SizeReport {
        size: n,
        error: Some(e.to_string()),
        ttc_ideal_s: ideal,
        runs: 0,
        completed_runs: 0,
        p_es: None,
        breakdown: None,
    }
}

fn summarize(n: usize, ideal: f64, rows: &[RunRow]) -> Result<SizeReport> {
    let done: Vec<TtcBreakdown> = rows.iter().filter_map(RunRow::breakdown).collect();
    let pes: Vec<f64> = rows.iter().filter_map(|r| r.p_es).collect();
    Ok(SizeReport {
        size: n,
        error: None,
        ttc_ideal_s: Some(ideal),
        runs: rows.len(),
        completed_runs: done.len(),
        p_es: if pes.is_empty() { None } else { Some(Stats::of(&pes)?) },
        breakdown: if done.is_empty() { None } else { Some(aggregate(&done)?) },
    })
}

/// Recomputes the per-run CSV from traces stored by a previous run.
pub fn rebuild_runs_csv(config: &ExperimentConfig, dir: &Path) -> Result<String> {
    let mut rows = Vec::new();
    for &n in config.workload.sizes() {
        let Ok(ideal) = config.ideal(n) else { continue };
        for r in 0..config.repeats {
            let path = dir.join("traces").join(trace_file(n, r));
            let f = fs::File::open(&path)?;
            let trace = Trace::read_ndjson(std::io::BufReader::new(f))?;
            let seed = config.base_seed + u64::from(r);
            rows.push(RunRow::from_trace(&config.name, n, r, seed, &trace, Some(ideal))?);
        }
    }
    runs_csv(&rows)
}
