//! Evaluation harness: dataset splits, pass@k, metric aggregation, ablation
//! arms, and a synthetic task family with a scripted solver and verifier.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostLedger;
use crate::embed_text::InstructionSummary;
use crate::pool::{Benchmark, Label, LabelFilter, Role, Step, TaskContext, TrajectoryPool, TrajectoryRecord, PoolError};
use crate::profile::Profile;
use crate::provider::{whitespace_tokens, Generation, GenerationProvider, GenerationRequest, ProviderError};
use crate::sampling::{self, PRNG_NAME};
use crate::solve::{SolveOutcome, EVIDENCE_BEGIN, EVIDENCE_END, SKILL_BEGIN, SKILL_END, TASK_BEGIN};
use crate::pipeline::{
    prepare_pool, run_tasks, AdaptationPlan, EvidenceSource, Injection, PipelineError, PipelineSettings, PreparedPool,
    Providers, TaskRun,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("split needs {requested} ids but only {available} are available")]
    SpecTooLarge { requested: usize, available: usize },
    #[error("pass@k needs 0 <= c <= n and 1 <= k <= n, got n={n}, c={c}, k={k}")]
    Domain { n: u64, c: u64, k: u64 },
    #[error("no outcomes to aggregate")]
    EmptyOutcomes,
    #[error("task `{0}` has no verdict")]
    MissingVerdict(String),
    #[error("task `{0}` passed but has no step count")]
    MissingStepCount(String),
    #[error("verdicts for task `{task_id}` do not cover samples 0..{expected}")]
    VerdictGap { task_id: String, expected: usize },
    #[error("malformed verdict line {line_no}: {reason}")]
    MalformedVerdict { line_no: usize, reason: String },
    #[error("synthetic family needs at least 1 test task, got {0}")]
    EmptyFamily(usize),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
}

/// Shuffle `ids` with the seeded PRNG, then take the first `train_count`
/// as train and the next `test_count` as test.
pub fn split_dataset<T: Clone>(ids: &[T], spec: SplitSpec) -> Result<(Vec<T>, Vec<T>), HarnessError> {
    let requested = spec.train_count + spec.test_count;
    if requested > ids.len() {
        return Err(HarnessError::SpecTooLarge { requested, available: ids.len() });
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    sampling::shuffle(&mut sampling::rng(spec.seed), &mut order);
    let pick = |range: std::ops::Range<usize>| order[range].iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    Ok((pick(0..spec.train_count), pick(spec.train_count..requested)))
}

/// Unbiased pass@k from `c` correct out of `n` samples, in the stable
/// product form `1 - prod_{i=n-c+1}^{n} (1 - k/i)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, HarnessError> {
    if c > n || k == 0 || k > n {
        return Err(HarnessError::Domain { n, c, k });
    }
    if k == 1 {
        return Ok(c as f64 / n as f64);
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub profile: Profile,
    pub n_tasks: usize,
    pub pass_at_1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass_at_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    /// Mean steps over successful episodes only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_steps_success: Option<f64>,
}

impl MetricsReport {
    /// `(name, value)` pairs in a fixed order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![("n_tasks".to_string(), self.n_tasks as f64), ("pass_at_1".to_string(), self.pass_at_1)];
        if let (Some(k), Some(v)) = (self.k, self.pass_at_k) {
            rows.push((format!("pass_at_{k}"), v));
        }
        if let Some(v) = self.success_rate {
            rows.push(("success_rate".to_string(), v));
        }
        if let Some(v) = self.avg_steps_success {
            rows.push(("avg_steps_success".to_string(), v));
        }
        rows
    }
}

pub fn aggregate_metrics(outcomes: &[SolveOutcome], profile: Profile) -> Result<MetricsReport, HarnessError> {
    if outcomes.is_empty() {
        return Err(HarnessError::EmptyOutcomes);
    }
    let mut verdicts = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o.verdicts.as_deref() {
            Some(v) if !v.is_empty() => verdicts.push(v),
            _ => return Err(HarnessError::MissingVerdict(o.task_id.clone())),
        }
    }
    let n_tasks = outcomes.len();
    let pass_at_1 = verdicts.iter().filter(|v| v[0]).count() as f64 / n_tasks as f64;

    let k = verdicts.iter().map(|v| v.len()).min().unwrap_or(1) as u64;
    let pass_at_k = if k > 1 {
        let mut sum = 0.0;
        for v in &verdicts {
            let c = v.iter().filter(|&&b| b).count() as u64;
            sum += pass_at_k(v.len() as u64, c, k)?;
        }
        Some(sum / n_tasks as f64)
    } else {
        None
    };

    let (success_rate, avg_steps_success) = if profile.is_agentic() {
        let mut steps = Vec::new();
        for (o, v) in outcomes.iter().zip(&verdicts) {
            if v[0] {
                steps.push(o.step_count.ok_or_else(|| HarnessError::MissingStepCount(o.task_id.clone()))?);
            }
        }
        let avg = (!steps.is_empty()).then(|| steps.iter().map(|&s| f64::from(s)).sum::<f64>() / steps.len() as f64);
        (Some(pass_at_1), avg)
    } else {
        (None, None)
    };

    Ok(MetricsReport {
        profile,
        n_tasks,
        pass_at_1,
        k: pass_at_k.map(|_| k),
        pass_at_k,
        success_rate,
        avg_steps_success,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub metrics: MetricsReport,
}

/// Serialized metrics file. Carries no timestamps so reruns are identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub prng: String,
    pub seed: u64,
    pub arms: Vec<ArmReport>,
}

impl MetricsDocument {
    pub fn new(seed: u64, arms: Vec<ArmReport>) -> Self {
        Self { prng: PRNG_NAME.to_string(), seed, arms }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    /// `arm,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,metric,value\n");
        for arm in &self.arms {
            for (name, value) in arm.metrics.rows() {
                let _ = writeln!(out, "{},{name},{value}", arm.arm);
            }
        }
        out
    }
}

/// Externally computed verdict for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub task_id: String,
    #[serde(default)]
    pub sample_index: usize,
    pub passed: bool,
}

pub fn read_verdicts<R: BufRead>(source: R) -> Result<Vec<VerdictRecord>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| HarnessError::MalformedVerdict { line_no: i + 1, reason: e.to_string() })?,
        );
    }
    Ok(out)
}

/// Group verdicts per task (first-seen order) into per-sample vectors.
fn group_verdicts(verdicts: &[VerdictRecord]) -> Result<Vec<(String, Vec<bool>)>, HarnessError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_task: BTreeMap<&str, BTreeMap<usize, bool>> = BTreeMap::new();
    for v in verdicts {
        let slot = by_task.entry(&v.task_id).or_default();
        if slot.is_empty() {
            order.push(v.task_id.clone());
        }
        slot.insert(v.sample_index, v.passed);
    }
    order
        .into_iter()
        .map(|task_id| {
            let samples = &by_task[task_id.as_str()];
            let expected = samples.len();
            if samples.keys().copied().ne(0..expected) {
                return Err(HarnessError::VerdictGap { task_id, expected });
            }
            Ok((task_id, samples.values().copied().collect()))
        })
        .collect()
}

/// Attach imported verdicts to solver outcomes. Tasks without a verdict are
/// left untouched and surface later as `MissingVerdict`.
pub fn apply_verdicts(outcomes: &mut [SolveOutcome], verdicts: &[VerdictRecord]) -> Result<(), HarnessError> {
    let grouped: BTreeMap<String, Vec<bool>> = group_verdicts(verdicts)?.into_iter().collect();
    for o in outcomes.iter_mut() {
        if let Some(v) = grouped.get(&o.task_id) {
            o.verdicts = Some(v.clone());
        }
    }
    Ok(())
}

/// Outcomes carrying only verdicts, for evaluating results produced elsewhere.
pub fn outcomes_from_verdicts(verdicts: &[VerdictRecord]) -> Result<Vec<SolveOutcome>, HarnessError> {
    Ok(group_verdicts(verdicts)?
        .into_iter()
        .map(|(task_id, v)| SolveOutcome { task_id, samples: vec![], step_count: None, verdicts: Some(v) })
        .collect())
}

pub trait Verifier: Send + Sync {
    fn verify(&self, task: &TaskContext, output: &str) -> bool;
}

/// Fill every outcome's verdicts by running `verifier` on each sample.
pub fn verify_outcomes(outcomes: &mut [SolveOutcome], tasks: &[TaskContext], verifier: &dyn Verifier) {
    let by_id: BTreeMap<&str, &TaskContext> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    for o in outcomes.iter_mut() {
        if let Some(task) = by_id.get(o.task_id.as_str()) {
            o.verdicts = Some(o.samples.iter().map(|s| verifier.verify(task, &s.output)).collect());
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic family

/// Transformation families. The names hash to distinct mock-embedder buckets.
pub const SYNTHETIC_FAMILIES: [&str; 6] = ["offset", "double", "triple", "square", "negate", "concat"];

pub fn apply_family(family: &str, x: i64) -> Option<i64> {
    Some(match family {
        "offset" => x + 137,
        "double" => 2 * x,
        "triple" => 3 * x,
        "square" => x * x,
        "negate" => -x,
        "concat" => x * 10_001,
        _ => return None,
    })
}

#[derive(Debug, Clone)]
pub struct SyntheticFamily {
    pub pool: TrajectoryPool,
    pub tests: Vec<TaskContext>,
}

fn synthetic_context(id: String, family: &str, x: i64) -> TaskContext {
    let answer = apply_family(family, x).expect("known family");
    TaskContext::new(id, Benchmark::Synthetic, format!("Transcribe input {x} using the {family} rule."))
        .with("family", family)
        .with("input", x.to_string())
        .with("oracle_answer", answer.to_string())
}

fn synthetic_steps(family: &str, x: i64, label: Label, wrong: i64) -> Vec<Step> {
    let answer = apply_family(family, x).expect("known family");
    let step = |role, content: String| Step { role, content };
    let mut steps = vec![step(Role::Environment, format!("Input value {x}; rule family {family}."))];
    match label {
        Label::Success => {
            steps.push(step(Role::Agent, format!("Thought: the {family} rule applies to the input.")));
            steps.push(step(Role::Tool, format!("compute {family}({x}) = {answer}")));
            steps.push(step(Role::Agent, format!("final answer: {answer}")));
        }
        Label::Failure => {
            steps.push(step(Role::Agent, "Thought: reuse the constant from a previous episode.".to_string()));
            steps.push(step(Role::Agent, format!("final answer: {wrong}")));
            steps.push(step(Role::Environment, "Rejected: the submitted value does not match.".to_string()));
        }
        Label::Unknown => {
            steps.push(step(Role::Agent, format!("Thought: the {family} rule may apply.")));
            steps.push(step(Role::Agent, format!("final answer: {wrong}")));
        }
    }
    steps
}

/// Seeded synthetic benchmark: `2 * n_test` labeled training trajectories
/// and `n_test` test tasks, each a rule applied to a distinct 4-digit input.
/// The rule is only discoverable from retrieved evidence about the family.
pub fn make_synthetic_family(seed: u64, n_test: usize) -> Result<SyntheticFamily, HarnessError> {
    if n_test == 0 {
        return Err(HarnessError::EmptyFamily(n_test));
    }
    let total = 3 * n_test;
    let mut rng = sampling::rng(seed);
    let inputs = sampling::sample_indices(&mut rng, 9000, total);
    if inputs.len() < total {
        return Err(HarnessError::SpecTooLarge { requested: total, available: inputs.len() });
    }
    let tasks: Vec<(String, &str, i64)> = inputs
        .iter()
        .enumerate()
        .map(|(i, &off)| {
            let family = SYNTHETIC_FAMILIES[sampling::below(&mut rng, SYNTHETIC_FAMILIES.len() as u64) as usize];
            (format!("syn-{seed}-{i:04}"), family, 1000 + off as i64)
        })
        .collect();
    let (train, test) = split_dataset(&tasks, SplitSpec { seed, train_count: 2 * n_test, test_count: n_test })?;

    let mut records = Vec::with_capacity(train.len());
    for (id, family, x) in train {
        let label = match sampling::below(&mut rng, 20) {
            0..=8 => Label::Success,
            9..=17 => Label::Failure,
            _ => Label::Unknown,
        };
        let correct = apply_family(family, x).expect("known family");
        let wrong = correct + 1 + sampling::below(&mut rng, 500) as i64;
        records.push(TrajectoryRecord {
            context: synthetic_context(id, family, x),
            steps: synthetic_steps(family, x, label, wrong),
            label,
            extra: Default::default(),
        });
    }
    let pool = TrajectoryPool::from_records(records)?;
    let tests = test.into_iter().map(|(id, family, x)| synthetic_context(id, family, x)).collect();
    Ok(SyntheticFamily { pool, tests })
}

fn field_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(": "))).map(str::trim)
}

fn between<'a>(text: &'a str, begin: &str, end: &str) -> Option<&'a str> {
    let (_, rest) = text.split_once(begin)?;
    Some(rest.split_once(end).map_or(rest, |(inner, _)| inner))
}

/// Deterministic stand-in for a solver model on the synthetic family. It
/// reads only the input value; the rule must come from a skill whose
/// procedures name a family in backticks. Given raw evidence instead, it
/// copies the last final answer it sees. With neither, it echoes the input.
#[derive(Debug, Clone, Default)]
pub struct ScriptedSolver;

impl ScriptedSolver {
    fn respond(user: &str) -> String {
        let task = user.split_once(TASK_BEGIN).map_or("", |(_, t)| t);
        let Some(x) = field_value(task, "input").and_then(|v| v.parse::<i64>().ok()) else {
            return "Action: submit none\n".to_string();
        };
        if let Some(skill) = between(user, SKILL_BEGIN, SKILL_END) {
            let procedures = skill.to_lowercase();
            let procedures = procedures.split_once("## possible procedures").map_or("", |(_, p)| p);
            let named = procedures
                .split('`')
                .skip(1)
                .step_by(2)
                .find_map(|name| apply_family(name, x).map(|y| (name.to_string(), y)));
            if let Some((family, y)) = named {
                return format!(
                    "Thought: the skill names the {family} rule.\nAction: read input {x}\nAction: apply {family}\nAction: submit {y}\n"
                );
            }
        }
        if let Some(evidence) = between(user, EVIDENCE_BEGIN, EVIDENCE_END) {
            let copied = evidence
                .lines()
                .rev()
                .filter_map(|l| l.split_once("final answer: ").map(|(_, v)| v.trim()))
                .find_map(|v| v.parse::<i64>().ok());
            if let Some(y) = copied {
                return format!("Action: read examples\nAction: submit {y}\n");
            }
        }
        format!("Action: read input {x}\nAction: search for the rule\nAction: submit {x}\n")
    }
}

impl GenerationProvider for ScriptedSolver {
    fn model_name(&self) -> &str {
        "scripted-solver"
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, ProviderError> {
        let text = Self::respond(request.user);
        Ok(Generation {
            decoded_tokens: whitespace_tokens(&text),
            input_tokens: whitespace_tokens(request.system) + whitespace_tokens(request.user),
            text,
            retries: 0,
        })
    }
}

/// Exact match of the last submitted value against the hidden answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticVerifier;

pub fn submitted_value(output: &str) -> Option<&str> {
    output.lines().rev().find_map(|l| {
        let t = l.trim();
        (t.len() >= 14 && t[..14].eq_ignore_ascii_case("action: submit")).then(|| t[14..].trim())
    })
}

impl Verifier for SyntheticVerifier {
    fn verify(&self, task: &TaskContext, output: &str) -> bool {
        let expected = task.get("oracle_answer").map(str::to_string).or_else(|| {
            let x = task.get("input")?.parse().ok()?;
            apply_family(task.get("family")?, x).map(|y| y.to_string())
        });
        matches!((expected, submitted_value(output)), (Some(e), Some(got)) if e == got)
    }
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "arm", content = "value")]
pub enum AblationArm {
    FullPipeline,
    RawTrajectoryPrompting,
    NoRetrieval,
    RandomRetrieval,
    ZeroShot,
    TopK(usize),
    Source(LabelFilter),
}

impl AblationArm {
    pub fn name(&self) -> String {
        match self {
            AblationArm::FullPipeline => "full_pipeline".into(),
            AblationArm::RawTrajectoryPrompting => "raw_trajectory_prompting".into(),
            AblationArm::NoRetrieval => "no_retrieval".into(),
            AblationArm::RandomRetrieval => "random_retrieval".into(),
            AblationArm::ZeroShot => "zero_shot".into(),
            AblationArm::TopK(k) => format!("top_k_{k}"),
            AblationArm::Source(f) => format!("source_{}", f.as_str()),
        }
    }

    pub fn plan(&self, settings: &PipelineSettings) -> AdaptationPlan {
        let retrieve = EvidenceSource::Retrieve { k: settings.k, filter: settings.filter };
        let (evidence, injection) = match *self {
            AblationArm::FullPipeline => (retrieve, Injection::Skill),
            AblationArm::RawTrajectoryPrompting => (retrieve, Injection::RawEvidence),
            AblationArm::NoRetrieval => (EvidenceSource::Empty, Injection::Skill),
            AblationArm::RandomRetrieval => (
                EvidenceSource::Random { k: settings.k, filter: settings.filter, seed: settings.random_seed },
                Injection::Skill,
            ),
            AblationArm::ZeroShot => (EvidenceSource::Empty, Injection::Nothing),
            AblationArm::TopK(k) => (EvidenceSource::Retrieve { k, filter: settings.filter }, Injection::Skill),
            AblationArm::Source(filter) => (EvidenceSource::Retrieve { k: settings.k, filter }, Injection::Skill),
        };
        AdaptationPlan { evidence, injection }
    }
}

impl std::str::FromStr for AblationArm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "full_pipeline" | "full" => AblationArm::FullPipeline,
            "raw_trajectory_prompting" | "raw" => AblationArm::RawTrajectoryPrompting,
            "no_retrieval" => AblationArm::NoRetrieval,
            "random_retrieval" | "random" => AblationArm::RandomRetrieval,
            "zero_shot" => AblationArm::ZeroShot,
            other => {
                if let Some(k) = other.strip_prefix("top_k_").or_else(|| other.strip_prefix("top_k=")) {
                    AblationArm::TopK(k.parse().map_err(|_| format!("bad k in `{other}`"))?)
                } else if let Some(f) = other.strip_prefix("source_").or_else(|| other.strip_prefix("source=")) {
                    AblationArm::Source(f.parse().map_err(|_| format!("bad source in `{other}`"))?)
                } else {
                    return Err(format!("unknown ablation arm `{other}`"));
                }
            }
        })
    }
}

/// Inputs shared by every arm of one experiment.
pub struct Experiment<'a> {
    pub prepared: &'a PreparedPool,
    pub tests: &'a [TaskContext],
    pub providers: Providers<'a>,
    pub settings: PipelineSettings,
    pub verifier: &'a dyn Verifier,
    pub summaries: &'a HashMap<String, InstructionSummary>,
}

#[derive(Debug)]
pub struct ArmRun {
    pub report: ArmReport,
    pub runs: Vec<TaskRun>,
    pub ledger: CostLedger,
}

pub fn run_ablation(arm: AblationArm, exp: &Experiment<'_>) -> Result<ArmRun, HarnessError> {
    let ledger = CostLedger::new();
    let plan = arm.plan(&exp.settings);
    let mut runs = run_tasks(exp.prepared, exp.tests, &plan, &exp.providers, &exp.settings, &ledger, exp.summaries)?;
    let mut outcomes: Vec<SolveOutcome> = runs.iter().map(|r| r.outcome.clone()).collect();
    verify_outcomes(&mut outcomes, exp.tests, exp.verifier);
    for (run, outcome) in runs.iter_mut().zip(&outcomes) {
        run.outcome.verdicts = outcome.verdicts.clone();
    }
    let profile = exp.tests.first().map_or(Profile::Synthetic, |t| Profile::for_benchmark(t.benchmark));
    let metrics = aggregate_metrics(&outcomes, profile)?;
    Ok(ArmRun { report: ArmReport { arm: arm.name(), metrics }, runs, ledger })
}

/// Index `pool` once for an experiment.
pub fn prepare_experiment_pool(
    pool: TrajectoryPool,
    providers: &Providers<'_>,
    settings: &PipelineSettings,
    ledger: &CostLedger,
) -> Result<PreparedPool, HarnessError> {
    Ok(prepare_pool(pool, providers, settings, ledger, &Default::default())?)
}
