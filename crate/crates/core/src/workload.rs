//! Tasks, bags of tasks and staged dataflow workflows.
//!
//! A [`Workload`] is immutable once built. Dependencies are expressed through
//! files: a task that lists an input with [`FileOrigin::TaskOutput`] depends on
//! the task that lists the same file id among its outputs.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default size of every ExTASY file, in bytes.
pub const DEFAULT_FILE_SIZE_BYTES: u64 = 200 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileOrigin {
    UserWorkstation,
    TaskOutput,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FileRef {
    pub id: String,
    pub size_bytes: u64,
    pub origin: FileOrigin,
}

impl FileRef {
    pub fn user(id: impl Into<String>, size_bytes: u64) -> Self {
        FileRef {
            id: id.into(),
            size_bytes,
            origin: FileOrigin::UserWorkstation,
        }
    }

    pub fn produced(id: impl Into<String>, size_bytes: u64) -> Self {
        FileRef {
            id: id.into(),
            size_bytes,
            origin: FileOrigin::TaskOutput,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub cores: u32,
    pub duration_s: f64,
    #[serde(default)]
    pub stage: u32,
    #[serde(default)]
    pub inputs: Vec<FileRef>,
    #[serde(default)]
    pub outputs: Vec<FileRef>,
}

impl Task {
    pub fn new(id: impl Into<String>, cores: u32, duration_s: f64) -> Self {
        Task {
            id: id.into(),
            cores,
            duration_s,
            stage: 0,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn has_files(&self) -> bool {
        !self.inputs.is_empty() || !self.outputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Bot,
    Staged,
}

/// Validated, immutable collection of tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    tasks: Vec<Task>,
    stages: u32,
    kind: WorkloadKind,
    /// For each task, the indices of the tasks producing its `task_output` inputs.
    producers: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
}

impl Workload {
    /// Validates `tasks` and builds a workload of the given kind.
    pub fn new(tasks: Vec<Task>, kind: WorkloadKind) -> Result<Self> {
        let mut index = HashMap::with_capacity(tasks.len());
        for (i, t) in tasks.iter().enumerate() {
            if t.cores < 1 {
                return Err(Error::invalid(format!("task {}: cores must be >= 1", t.id)));
            }
            if !(t.duration_s > 0.0 && t.duration_s.is_finite()) {
                return Err(Error::invalid(format!(
                    "task {}: duration_s must be positive and finite",
                    t.id
                )));
            }
            if index.insert(t.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate task id {}", t.id)));
            }
        }

        // Every distinct file id must describe the same file everywhere it appears,
        // and every produced file has exactly one producer.
        let mut files: HashMap<&str, &FileRef> = HashMap::new();
        let mut producer_of: HashMap<&str, usize> = HashMap::new();
        for (i, t) in tasks.iter().enumerate() {
            for f in t.inputs.iter().chain(&t.outputs) {
                match files.get(f.id.as_str()) {
                    Some(prev) if prev.size_bytes != f.size_bytes || prev.origin != f.origin => {
                        return Err(Error::invalid(format!(
                            "file {} declared with conflicting size or origin",
                            f.id
                        )));
                    }
                    Some(_) => {}
                    None => {
                        files.insert(&f.id, f);
                    }
                }
            }
            for f in &t.outputs {
                if producer_of.insert(&f.id, i).is_some() {
                    return Err(Error::invalid(format!("file {} produced by more than one task", f.id)));
                }
            }
        }

        let mut producers = Vec::with_capacity(tasks.len());
        for t in &tasks {
            let mut deps = Vec::new();
            for f in t.inputs.iter().filter(|f| f.origin == FileOrigin::TaskOutput) {
                let Some(&p) = producer_of.get(f.id.as_str()) else {
                    return Err(Error::invalid(format!(
                        "task {}: input {} is not produced by any task",
                        t.id, f.id
                    )));
                };
                if tasks[p].stage >= t.stage {
                    return Err(Error::invalid(format!(
                        "task {}: input {} comes from stage {} which is not earlier than {}",
                        t.id, f.id, tasks[p].stage, t.stage
                    )));
                }
                if !deps.contains(&p) {
                    deps.push(p);
                }
            }
            deps.sort_unstable();
            producers.push(deps);
        }

        let stages = tasks.iter().map(|t| t.stage + 1).max().unwrap_or(0);
        if kind == WorkloadKind::Bot {
            if let Some(t) = tasks.iter().find(|t| t.stage != 0) {
                return Err(Error::invalid(format!("bag of tasks contains task {} in stage {}", t.id, t.stage)));
            }
            if producers.iter().any(|d| !d.is_empty()) {
                return Err(Error::invalid("bag of tasks cannot contain task_output inputs"));
            }
        }

        Ok(Workload {
            tasks,
            stages,
            kind,
            producers,
            index,
        })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn stages(&self) -> u32 {
        self.stages
    }

    pub fn kind(&self) -> WorkloadKind {
        self.kind
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.index.get(id).map(|&i| &self.tasks[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Indices of the tasks whose outputs task `i` consumes.
    pub fn producers(&self, i: usize) -> &[usize] {
        &self.producers[i]
    }

    pub fn total_core_seconds(&self) -> f64 {
        self.tasks.iter().map(|t| t.cores as f64 * t.duration_s).sum()
    }

    pub fn max_cores(&self) -> u32 {
        self.tasks.iter().map(|t| t.cores).max().unwrap_or(0)
    }

    /// Tasks of one stage as a self-contained bag of tasks. Inputs produced by
    /// earlier stages are treated as already available files.
    pub fn stage_workload(&self, stage: u32) -> Result<Workload> {
        let tasks = self
            .tasks
            .iter()
            .filter(|t| t.stage == stage)
            .map(|t| {
                let mut t = t.clone();
                t.stage = 0;
                for f in &mut t.inputs {
                    f.origin = FileOrigin::UserWorkstation;
                }
                for f in &mut t.outputs {
                    f.origin = FileOrigin::UserWorkstation;
                }
                t
            })
            .collect();
        Workload::new(tasks, WorkloadKind::Bot)
    }

    /// Kahn topological order over task indices.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.tasks.len();
        let mut indegree: Vec<usize> = self.producers.iter().map(Vec::len).collect();
        let mut consumers = vec![Vec::new(); n];
        for (i, deps) in self.producers.iter().enumerate() {
            for &p in deps {
                consumers[p].push(i);
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.tasks)?)
    }

    /// Parses the task-array document. The kind is `bot` when every task sits in
    /// stage 0 without produced inputs, `staged` otherwise.
    pub fn from_json(s: &str) -> Result<Self> {
        let tasks: Vec<Task> = serde_json::from_str(s)?;
        let staged = tasks.iter().any(|t| {
            t.stage != 0 || t.inputs.iter().any(|f| f.origin == FileOrigin::TaskOutput)
        });
        Workload::new(tasks, if staged { WorkloadKind::Staged } else { WorkloadKind::Bot })
    }
}

impl Serialize for Workload {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tasks.serialize(s)
    }
}

/// `n` identical independent tasks.
pub fn make_bot(n: usize, duration_s: f64, cores_per_task: u32) -> Result<Workload> {
    if n < 1 {
        return Err(Error::invalid("bag of tasks needs n >= 1"));
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::invalid("task duration must be positive"));
    }
    if cores_per_task < 1 {
        return Err(Error::invalid("cores per task must be >= 1"));
    }
    let tasks = (0..n)
        .map(|i| Task::new(format!("task.{i:06}"), cores_per_task, duration_s))
        .collect();
    Workload::new(tasks, WorkloadKind::Bot)
}

/// Nominal per-stage durations of the ExTASY workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stage_durations_s: [f64; 4],
    /// Relative half-width of a uniform perturbation applied per task; 0 keeps
    /// every task at its stage's nominal duration.
    #[serde(default)]
    pub jitter: f64,
}

impl Default for StageProfile {
    fn default() -> Self {
        // Simulation stages dominate; the four entries add up to 870 s.
        StageProfile {
            stage_durations_s: [360.0, 360.0, 90.0, 60.0],
            jitter: 0.0,
        }
    }
}

impl StageProfile {
    pub fn total_s(&self) -> f64 {
        self.stage_durations_s.iter().sum()
    }

    fn validate(&self) -> Result<()> {
        if self.stage_durations_s.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::invalid("stage durations must be positive"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::invalid("jitter must be in [0, 1)"));
        }
        Ok(())
    }
}

/// ExTASY simulation-analysis workflow with the default profile.
pub fn make_extasy(n: usize, file_size_bytes: u64) -> Result<Workload> {
    make_extasy_with(n, file_size_bytes, &StageProfile::default(), 0)
}

/// Four stages: `n` simulations, `n` simulations, one `n`-core analysis, one
/// aggregation; five workflow input files.
pub fn make_extasy_with(n: usize, file_size_bytes: u64, profile: &StageProfile, seed: u64) -> Result<Workload> {
    if n < 1 {
        return Err(Error::invalid("ExTASY needs n >= 1"));
    }
    if file_size_bytes < 1 {
        return Err(Error::invalid("file size must be positive"));
    }
    profile.validate()?;
    let n_cores = u32::try_from(n).map_err(|_| Error::invalid("n too large"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut duration = |stage: usize| {
        let nominal = profile.stage_durations_s[stage];
        if profile.jitter > 0.0 {
            nominal * (1.0 + rng.random_range(-profile.jitter..=profile.jitter))
        } else {
            nominal
        }
    };

    let input = |colour: &str| FileRef::user(format!("input.{colour}"), file_size_bytes);
    let out = |stage: u32, i: usize| FileRef::produced(format!("s{stage}.out.{i:06}"), file_size_bytes);

    let mut tasks = Vec::with_capacity(2 * n + 2);
    for i in 0..n {
        let mut t = Task::new(format!("s1.{i:06}"), 1, duration(0));
        t.stage = 0;
        t.inputs = vec![input("green"), input("azure"), input("red")];
        t.outputs = vec![out(1, i)];
        tasks.push(t);
    }
    for i in 0..n {
        let mut t = Task::new(format!("s2.{i:06}"), 1, duration(1));
        t.stage = 1;
        t.inputs = vec![out(1, i), input("red"), input("blue")];
        t.outputs = vec![out(2, i)];
        tasks.push(t);
    }
    let mut analysis = Task::new("s3.000000", n_cores, duration(2));
    analysis.stage = 2;
    analysis.inputs = (0..n).map(|i| out(2, i)).chain([input("red")]).collect();
    analysis.outputs = (0..n).map(|i| out(3, i)).collect();
    tasks.push(analysis);

    let mut aggregate = Task::new("s4.000000", 1, duration(3));
    aggregate.stage = 3;
    aggregate.inputs = (0..n).map(|i| out(3, i)).chain([input("orange")]).collect();
    aggregate.outputs = vec![out(4, 0)];
    tasks.push(aggregate);

    Workload::new(tasks, WorkloadKind::Staged)
}

/// Tasks not yet completed whose produced inputs all come from completed tasks.
pub fn ready_tasks(w: &Workload, completed: &BTreeSet<String>) -> Result<BTreeSet<String>> {
    let mut done = vec![false; w.len()];
    for id in completed {
        let i = w
            .position(id)
            .ok_or_else(|| Error::invalid(format!("unknown task id {id}")))?;
        done[i] = true;
    }
    Ok(w.tasks
        .iter()
        .enumerate()
        .filter(|&(i, _)| !done[i] && w.producers(i).iter().all(|&p| done[p]))
        .map(|(_, t)| t.id.clone())
        .collect())
}
