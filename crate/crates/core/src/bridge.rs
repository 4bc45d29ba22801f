//! Buffer that turns a stream of single-task submissions into bags of tasks.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::workload::{FileRef, Task, Workload, WorkloadKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSpec {
    pub id: String,
    pub size_bytes: u64,
}

/// One task as submitted over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub executable: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    pub cores: u32,
    pub duration_s: f64,
    #[serde(default)]
    pub inputs: Vec<FileSpec>,
    #[serde(default)]
    pub outputs: Vec<FileSpec>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BridgeError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
}

impl BridgeError {
    /// The offending field, when one can be named.
    pub fn field(&self) -> Option<&str> {
        match self {
            BridgeError::Malformed(_) => None,
            BridgeError::MissingField(f) | BridgeError::InvalidField { field: f, .. } => Some(f),
        }
    }

    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        BridgeError::InvalidField {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

fn get<'v>(obj: &'v serde_json::Map<String, Value>, field: &str) -> Result<&'v Value, BridgeError> {
    obj.get(field).ok_or_else(|| BridgeError::MissingField(field.to_string()))
}

fn non_empty_str(v: &Value, field: &str) -> Result<String, BridgeError> {
    match v.as_str() {
        Some(s) if !s.trim().is_empty() => Ok(s.to_string()),
        Some(_) => Err(BridgeError::invalid(field, "must not be empty")),
        None => Err(BridgeError::invalid(field, "must be a string")),
    }
}

fn files(obj: &serde_json::Map<String, Value>, field: &str) -> Result<Vec<FileSpec>, BridgeError> {
    let Some(v) = obj.get(field) else {
        return Ok(Vec::new());
    };
    let arr = v.as_array().ok_or_else(|| BridgeError::invalid(field, "must be an array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, f)| {
            let path = format!("{field}[{i}]");
            let o = f.as_object().ok_or_else(|| BridgeError::invalid(&path, "must be an object"))?;
            let id = o.get("id").ok_or_else(|| BridgeError::MissingField(format!("{path}.id")))?;
            let size = o
                .get("size_bytes")
                .ok_or_else(|| BridgeError::MissingField(format!("{path}.size_bytes")))?;
            Ok(FileSpec {
                id: non_empty_str(id, &format!("{path}.id"))?,
                size_bytes: size
                    .as_u64()
                    .ok_or_else(|| BridgeError::invalid(format!("{path}.size_bytes"), "must be a non-negative integer"))?,
            })
        })
        .collect()
}

impl TaskRecord {
    pub fn parse(json: &str) -> Result<TaskRecord, BridgeError> {
        let v: Value = serde_json::from_str(json).map_err(|e| BridgeError::Malformed(e.to_string()))?;
        TaskRecord::from_value(&v)
    }

    pub fn from_value(v: &Value) -> Result<TaskRecord, BridgeError> {
        let obj = v
            .as_object()
            .ok_or_else(|| BridgeError::Malformed("record must be a JSON object".into()))?;
        let id = non_empty_str(get(obj, "id")?, "id")?;
        let executable = non_empty_str(get(obj, "executable")?, "executable")?;
        let arguments = match obj.get("arguments") {
            None => Vec::new(),
            Some(Value::Array(a)) => a
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    x.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| BridgeError::invalid(format!("arguments[{i}]"), "must be a string"))
                })
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(BridgeError::invalid("arguments", "must be an array of strings")),
        };
        let cores = get(obj, "cores")?
            .as_u64()
            .filter(|&c| c >= 1 && c <= u64::from(u32::MAX))
            .ok_or_else(|| BridgeError::invalid("cores", "must be an integer >= 1"))? as u32;
        let duration_s = get(obj, "duration_s")?
            .as_f64()
            .filter(|d| *d > 0.0 && d.is_finite())
            .ok_or_else(|| BridgeError::invalid("duration_s", "must be a positive number"))?;
        Ok(TaskRecord {
            id,
            executable,
            arguments,
            cores,
            duration_s,
            inputs: files(obj, "inputs")?,
            outputs: files(obj, "outputs")?,
        })
    }

    pub fn from_task(task: &Task, executable: &str) -> TaskRecord {
        let spec = |f: &FileRef| FileSpec {
            id: f.id.clone(),
            size_bytes: f.size_bytes,
        };
        TaskRecord {
            id: task.id.clone(),
            executable: executable.to_string(),
            arguments: Vec::new(),
            cores: task.cores,
            duration_s: task.duration_s,
            inputs: task.inputs.iter().map(spec).collect(),
            outputs: task.outputs.iter().map(spec).collect(),
        }
    }

    fn to_task(&self) -> Task {
        Task {
            id: self.id.clone(),
            cores: self.cores,
            duration_s: self.duration_s,
            stage: 0,
            inputs: self.inputs.iter().map(|f| FileRef::user(&f.id, f.size_bytes)).collect(),
            outputs: self.outputs.iter().map(|f| FileRef::user(&f.id, f.size_bytes)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub task_id: String,
    /// Position in overall submission order.
    pub sequence: u64,
    pub accepted_at_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Flushed { workload: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum FlushPolicy {
    /// Flush once nothing has been submitted for this long.
    IdleSeconds { threshold_s: f64 },
    /// Flush once the submission rate over the window drops below the bound.
    RateBelow { tasks_per_s: f64, window_s: f64 },
}

#[derive(Debug, Clone)]
pub struct SubmissionBuffer {
    policy: FlushPolicy,
    pending: Vec<TaskRecord>,
    pending_files: HashMap<String, u64>,
    pending_outputs: HashSet<String>,
    last_submit_s: Option<f64>,
    recent: VecDeque<f64>,
    acks: HashMap<String, Ack>,
    status: HashMap<String, TaskStatus>,
    flushed: Vec<Workload>,
    next_seq: u64,
}

impl SubmissionBuffer {
    pub fn new(idle_threshold_s: f64) -> Result<Self> {
        Self::with_policy(FlushPolicy::IdleSeconds {
            threshold_s: idle_threshold_s,
        })
    }

    pub fn with_policy(policy: FlushPolicy) -> Result<Self> {
        let ok = match policy {
            FlushPolicy::IdleSeconds { threshold_s } => threshold_s >= 0.0 && threshold_s.is_finite(),
            FlushPolicy::RateBelow { tasks_per_s, window_s } => tasks_per_s > 0.0 && window_s > 0.0,
        };
        if !ok {
            return Err(Error::invalid(format!("invalid flush policy {policy:?}")));
        }
        Ok(SubmissionBuffer {
            policy,
            pending: Vec::new(),
            pending_files: HashMap::new(),
            pending_outputs: HashSet::new(),
            last_submit_s: None,
            recent: VecDeque::new(),
            acks: HashMap::new(),
            status: HashMap::new(),
            flushed: Vec::new(),
            next_seq: 0,
        })
    }

    pub fn policy(&self) -> FlushPolicy {
        self.policy
    }

    pub fn submit_task(&mut self, json: &str, now: f64) -> Result<Ack, BridgeError> {
        self.submit_record(TaskRecord::parse(json)?, now)
    }

    /// Accepts a record. Resubmitting a known id returns its original ack.
    pub fn submit_record(&mut self, record: TaskRecord, now: f64) -> Result<Ack, BridgeError> {
        if let Some(ack) = self.acks.get(&record.id) {
            return Ok(ack.clone());
        }
        TaskRecord::from_value(&serde_json::to_value(&record).map_err(|e| BridgeError::Malformed(e.to_string()))?)?;
        self.check_files(&record)?;

        for f in record.inputs.iter().chain(&record.outputs) {
            self.pending_files.insert(f.id.clone(), f.size_bytes);
        }
        for f in &record.outputs {
            self.pending_outputs.insert(f.id.clone());
        }
        let ack = Ack {
            task_id: record.id.clone(),
            sequence: self.next_seq,
            accepted_at_s: now,
        };
        self.next_seq += 1;
        self.acks.insert(record.id.clone(), ack.clone());
        self.status.insert(record.id.clone(), TaskStatus::Pending);
        self.pending.push(record);
        self.last_submit_s = Some(self.last_submit_s.map_or(now, |t| t.max(now)));
        self.recent.push_back(now);
        Ok(ack)
    }

    fn check_files(&self, record: &TaskRecord) -> Result<(), BridgeError> {
        let mut seen: HashMap<&str, u64> = HashMap::new();
        let all = record
            .inputs
            .iter()
            .enumerate()
            .map(|(i, f)| (format!("inputs[{i}]"), f))
            .chain(record.outputs.iter().enumerate().map(|(i, f)| (format!("outputs[{i}]"), f)));
        for (path, f) in all {
            let known = seen.get(f.id.as_str()).or(self.pending_files.get(&f.id));
            if known.is_some_and(|&s| s != f.size_bytes) {
                return Err(BridgeError::invalid(
                    format!("{path}.size_bytes"),
                    format!("file {} was declared with a different size", f.id),
                ));
            }
            seen.insert(&f.id, f.size_bytes);
        }
        let mut produced: HashSet<&str> = HashSet::new();
        for (i, f) in record.outputs.iter().enumerate() {
            if self.pending_outputs.contains(&f.id) || !produced.insert(&f.id) {
                return Err(BridgeError::invalid(
                    format!("outputs[{i}].id"),
                    format!("file {} already has a producer", f.id),
                ));
            }
        }
        Ok(())
    }

    fn due(&mut self, now: f64) -> bool {
        match self.policy {
            FlushPolicy::IdleSeconds { threshold_s } => {
                self.last_submit_s.is_none_or(|t| now - t >= threshold_s - 1e-9)
            }
            FlushPolicy::RateBelow { tasks_per_s, window_s } => {
                while self.recent.front().is_some_and(|&t| t <= now - window_s) {
                    self.recent.pop_front();
                }
                (self.recent.len() as f64 / window_s) < tasks_per_s
            }
        }
    }

    /// Hands the pending tasks over as one bag of tasks once the policy says
    /// submissions have paused.
    pub fn idle_flush(&mut self, now: f64) -> Option<Workload> {
        if self.pending.is_empty() || !self.due(now) {
            return None;
        }
        let records = std::mem::take(&mut self.pending);
        self.pending_files.clear();
        self.pending_outputs.clear();
        let tasks: Vec<Task> = records.iter().map(TaskRecord::to_task).collect();
        let w = Workload::new(tasks, WorkloadKind::Bot).expect("records are validated on submission");
        let k = self.flushed.len();
        for r in &records {
            self.status.insert(r.id.clone(), TaskStatus::Flushed { workload: k });
        }
        self.flushed.push(w.clone());
        Some(w)
    }

    pub fn pending(&self) -> &[TaskRecord] {
        &self.pending
    }

    pub fn flushed(&self) -> &[Workload] {
        &self.flushed
    }

    pub fn status(&self, id: &str) -> Option<TaskStatus> {
        self.status.get(id).copied()
    }

    pub fn ack(&self, id: &str) -> Option<&Ack> {
        self.acks.get(id)
    }

    /// Seconds since the last accepted submission.
    pub fn idle_for(&self, now: f64) -> Option<f64> {
        self.last_submit_s.map(|t| now - t)
    }
}
