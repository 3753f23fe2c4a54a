//! Training trajectory pool: task contexts, labeled trajectories, ingestion,
//! label views and evidence compaction.
//!
//! A pool is read from a line-delimited JSON file, one record per line:
//!
//! ```text
//! {"task_id":"t1","benchmark":"bigcode","description":"...","metadata":{...},
//!  "steps":[{"role":"agent","content":"..."}],"label":"failure"}
//! ```
//!
//! Unknown extra fields are kept on the record so that re-serializing a pool
//! reproduces its input, but nothing in the engine reads them.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed_text::leak_list;

/// Ordered metadata map (`m` of a task).
pub type Metadata = IndexMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Spreadsheet,
    Alfworld,
    #[serde(rename = "bigcode")]
    BigCode,
    Synthetic,
}

impl Benchmark {
    pub const ALL: [Benchmark; 4] = [
        Benchmark::Spreadsheet,
        Benchmark::Alfworld,
        Benchmark::BigCode,
        Benchmark::Synthetic,
    ];

    /// Metadata keys every context of this benchmark must carry.
    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            Benchmark::Spreadsheet => &["instruction_type", "output_position"],
            Benchmark::Alfworld => &[
                "task_family",
                "goal_object",
                "object_category",
                "target_receptacle",
                "room_type",
                "goal_sentence",
                "initial_receptacles",
                "subgoals",
            ],
            Benchmark::BigCode => &["code_prompt", "libraries"],
            Benchmark::Synthetic => &["family", "input"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Benchmark::Spreadsheet => "spreadsheet",
            Benchmark::Alfworld => "alfworld",
            Benchmark::BigCode => "bigcode",
            Benchmark::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown benchmark `{s}`"))
    }
}

/// Violation of a [`TaskContext`] invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContextError {
    #[error("task_id is empty")]
    EmptyTaskId,
    #[error("missing metadata key `{0}`")]
    MissingKey(String),
    #[error("metadata key `{0}` must not be present for this benchmark")]
    ForbiddenKey(String),
}

/// Visible task context `(x, m)` of a training or test task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskContext {
    pub task_id: String,
    pub benchmark: Benchmark,
    pub description: String,
    #[serde(default)]
    pub metadata: Metadata,
}

impl TaskContext {
    pub fn new(task_id: impl Into<String>, benchmark: Benchmark, description: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            benchmark,
            description: description.into(),
            metadata: Metadata::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        if self.task_id.is_empty() {
            return Err(ContextError::EmptyTaskId);
        }
        for key in self.benchmark.required_keys() {
            if !self.metadata.contains_key(*key) {
                return Err(ContextError::MissingKey((*key).to_string()));
            }
        }
        // Hidden keys are tolerated on other benchmarks (they carry grading
        // data) but a code task must never ship its tests or solution.
        if self.benchmark == Benchmark::BigCode {
            if let Some(key) = leak_list(self.benchmark)
                .iter()
                .find(|k| self.metadata.contains_key(**k))
            {
                return Err(ContextError::ForbiddenKey((*key).to_string()));
            }
        }
        Ok(())
    }

    /// Metadata entries that may be shown to a model: everything except the
    /// benchmark's leak-listed keys, in map order.
    pub fn visible_metadata(&self) -> impl Iterator<Item = (&str, &str)> {
        let hidden = leak_list(self.benchmark);
        self.metadata
            .iter()
            .filter(move |(k, _)| !hidden.contains(&k.as_str()))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Agent,
    Environment,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Agent => "agent",
            Role::Environment => "environment",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub role: Role,
    pub content: String,
}

impl Step {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

/// Evaluation label of a trajectory. `Success` is T+, `Failure` is T-.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Success,
    Failure,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Success => "success",
            Label::Failure => "failure",
            Label::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which trajectories a retrieval may return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFilter {
    All,
    SuccessOnly,
    #[default]
    FailureOnly,
}

impl LabelFilter {
    pub fn admits(self, label: Label) -> bool {
        match self {
            LabelFilter::All => true,
            LabelFilter::SuccessOnly => label == Label::Success,
            LabelFilter::FailureOnly => label == Label::Failure,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelFilter::All => "all",
            LabelFilter::SuccessOnly => "success_only",
            LabelFilter::FailureOnly => "failure_only",
        }
    }
}

impl std::str::FromStr for LabelFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(LabelFilter::All),
            "success" | "success_only" | "success-only" => Ok(LabelFilter::SuccessOnly),
            "failure" | "failure_only" | "failure-only" => Ok(LabelFilter::FailureOnly),
            other => Err(format!("unknown label filter `{other}`")),
        }
    }
}

/// One pool entry: task context, steps and outcome label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub context: TaskContext,
    pub steps: Vec<Step>,
    pub label: Label,
    /// Fields present in the source line that the engine does not use.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl TrajectoryRecord {
    pub fn new(context: TaskContext, steps: Vec<Step>, label: Label) -> Self {
        Self { context, steps, label, extra: serde_json::Map::new() }
    }

    pub fn task_id(&self) -> &str {
        &self.context.task_id
    }

    /// Full text rendering used as synthesis evidence: the task header with
    /// its visible metadata, then one `[role] content` line per step.
    pub fn render(&self) -> String {
        let mut out = format!("task: {}\n", self.context.description);
        for (key, value) in self.context.visible_metadata() {
            out.push_str(key);
            out.push_str(": ");
            out.push_str(value);
            out.push('\n');
        }
        for step in &self.steps {
            out.push('[');
            out.push_str(step.role.as_str());
            out.push_str("] ");
            out.push_str(&step.content);
            out.push('\n');
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    task_id: String,
    benchmark: Benchmark,
    description: String,
    metadata: Metadata,
    steps: Vec<Step>,
    label: Label,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

impl From<RecordLine> for TrajectoryRecord {
    fn from(line: RecordLine) -> Self {
        TrajectoryRecord {
            context: TaskContext {
                task_id: line.task_id,
                benchmark: line.benchmark,
                description: line.description,
                metadata: line.metadata,
            },
            steps: line.steps,
            label: line.label,
            extra: line.extra,
        }
    }
}

impl From<&TrajectoryRecord> for RecordLine {
    fn from(r: &TrajectoryRecord) -> Self {
        RecordLine {
            task_id: r.context.task_id.clone(),
            benchmark: r.context.benchmark,
            description: r.context.description.clone(),
            metadata: r.context.metadata.clone(),
            steps: r.steps.clone(),
            label: r.label,
            extra: r.extra.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("line {line_no}: malformed record: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("duplicate task_id `{0}`")]
    DuplicateTaskId(String),
    #[error("record `{id}` is missing metadata key `{key}`")]
    MissingBenchmarkKey { id: String, key: String },
    #[error("read error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("compaction budget {0} is below the minimum of {MIN_COMPACTION_BUDGET} characters")]
pub struct BudgetTooSmall(pub usize);

pub const MIN_COMPACTION_BUDGET: usize = 64;

/// Share of the compaction budget given to the head window, in percent.
const HEAD_SHARE_PERCENT: usize = 60;

/// The trajectory pool `P`. Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryPool {
    records: Vec<TrajectoryRecord>,
    by_id: HashMap<String, usize>,
}

impl TrajectoryPool {
    /// Build a pool from already-parsed records, enforcing the same rules as
    /// [`ingest_pool`].
    pub fn from_records(records: Vec<TrajectoryRecord>) -> Result<Self, PoolError> {
        let mut pool = TrajectoryPool::default();
        for (i, record) in records.into_iter().enumerate() {
            pool.admit(record, i + 1)?;
        }
        Ok(pool)
    }

    fn admit(&mut self, record: TrajectoryRecord, line_no: usize) -> Result<(), PoolError> {
        match record.context.validate() {
            Ok(()) => {}
            Err(ContextError::MissingKey(key)) => {
                return Err(PoolError::MissingBenchmarkKey {
                    id: record.context.task_id.clone(),
                    key,
                })
            }
            Err(e) => {
                return Err(PoolError::MalformedRecord { line_no, reason: e.to_string() })
            }
        }
        if record.steps.is_empty() {
            return Err(PoolError::MalformedRecord {
                line_no,
                reason: format!("record `{}` has no steps", record.task_id()),
            });
        }
        if self.by_id.contains_key(record.task_id()) {
            return Err(PoolError::DuplicateTaskId(record.task_id().to_string()));
        }
        self.by_id.insert(record.task_id().to_string(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn get(&self, task_id: &str) -> Option<&TrajectoryRecord> {
        self.by_id.get(task_id).map(|&i| &self.records[i])
    }

    pub fn position(&self, task_id: &str) -> Option<usize> {
        self.by_id.get(task_id).copied()
    }

    /// Serialize to the line-delimited pool format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            let line = serde_json::to_string(&RecordLine::from(record))
                .expect("pool records always serialize");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Borrowed, label-filtered view over a pool.
#[derive(Debug, Clone)]
pub struct PoolView<'a> {
    pub filter: LabelFilter,
    pub records: Vec<&'a TrajectoryRecord>,
}

impl PoolView<'_> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.task_id()).collect()
    }
}

/// Read a pool from a line-delimited record stream. Blank lines are skipped.
pub fn ingest_pool<R: BufRead>(source: R) -> Result<TrajectoryPool, PoolError> {
    let mut pool = TrajectoryPool::default();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line)
            .map_err(|e| PoolError::MalformedRecord { line_no, reason: e.to_string() })?;
        pool.admit(parsed.into(), line_no)?;
    }
    Ok(pool)
}

pub fn filter_by_label(pool: &TrajectoryPool, filter: LabelFilter) -> PoolView<'_> {
    PoolView {
        filter,
        records: pool.records.iter().filter(|r| filter.admits(r.label)).collect(),
    }
}

/// Compacted trajectory evidence handed to the synthesis model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactedEvidence {
    pub source_id: String,
    pub label: Label,
    pub excerpt: String,
    pub truncated: bool,
    pub original_step_count: usize,
}

/// Render a trajectory and cut it to at most `budget` characters, keeping a
/// head window (60%) and a tail window (40%) around an elision marker.
pub fn compact_trajectory(
    record: &TrajectoryRecord,
    budget: usize,
) -> Result<CompactedEvidence, BudgetTooSmall> {
    if budget < MIN_COMPACTION_BUDGET {
        return Err(BudgetTooSmall(budget));
    }
    let full = record.render();
    let chars: Vec<char> = full.chars().collect();
    let (excerpt, truncated) = if chars.len() <= budget {
        (full, false)
    } else {
        (elide(&chars, budget), true)
    };
    Ok(CompactedEvidence {
        source_id: record.task_id().to_string(),
        label: record.label,
        excerpt,
        truncated,
        original_step_count: record.steps.len(),
    })
}

fn elision_marker(dropped: usize) -> String {
    format!("\n[... {dropped} chars elided ...]\n")
}

fn elide(chars: &[char], budget: usize) -> String {
    // The marker length depends on the dropped count, which depends on the
    // marker length; size it for the widest count first, then settle.
    let mut marker_len = elision_marker(chars.len()).chars().count();
    loop {
        let keep = budget - marker_len;
        let head = keep * HEAD_SHARE_PERCENT / 100;
        let tail = keep - head;
        let dropped = chars.len() - head - tail;
        let marker = elision_marker(dropped);
        let len = marker.chars().count();
        if len <= marker_len {
            let mut out: String = chars[..head].iter().collect();
            out.push_str(&marker);
            out.extend(&chars[chars.len() - tail..]);
            return out;
        }
        marker_len = len;
    }
}
