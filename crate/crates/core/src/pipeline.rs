//! End-to-end orchestration: index the pool, then per test task retrieve,
//! compact, synthesize and solve.
//!
//! Per-task work runs on a bounded worker pool. Results come back in test
//! order and the ledger is order-insensitive, so outputs do not depend on
//! scheduling.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostLedger, LedgerEntry, Stage};
use crate::embed_text::{build_embed_text, summarize_instruction, EmbedTextError, EmbeddingText, InstructionSummary};
use crate::pool::{compact_trajectory, Benchmark, BudgetTooSmall, CompactedEvidence, LabelFilter, TaskContext, TrajectoryPool};
use crate::profile::Profile;
use crate::provider::{EmbeddingProvider, GenerationProvider, ProviderError};
use crate::retrieval::{build_index, random_retrieve, retrieve, EmbeddingVector, RetrievalError, RetrievalResult, VectorIndex};
use crate::solve::{assemble_raw_evidence_prompt, assemble_solver_prompt, run_solver, SolveError, SolveOutcome, SolverPrompt};
use crate::synthesis::{synthesize_skill, LeakageReport, SkillDocument, SynthesisError, SynthesisRequest, SynthesisSettings};

/// Ledger task id for pool-indexing calls.
pub const INDEX_TASK_ID: &str = "<index>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub k: usize,
    pub filter: LabelFilter,
    /// Character budget per compacted trajectory.
    pub evidence_budget: usize,
    pub synthesis: SynthesisSettings,
    pub solve_temperature: f64,
    pub samples: usize,
    pub solve_max_tokens: u32,
    /// Summarize spreadsheet instructions before embedding.
    pub use_summary: bool,
    pub random_seed: u64,
    pub workers: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            k: 3,
            filter: LabelFilter::FailureOnly,
            evidence_budget: 2000,
            synthesis: SynthesisSettings::default(),
            solve_temperature: 0.0,
            samples: 1,
            solve_max_tokens: 1024,
            use_summary: false,
            random_seed: 0,
            workers: 4,
        }
    }
}

#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub embedder: &'a dyn EmbeddingProvider,
    pub synthesizer: &'a dyn GenerationProvider,
    pub solver: &'a dyn GenerationProvider,
}

/// Where a task's evidence comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvidenceSource {
    Retrieve { k: usize, filter: LabelFilter },
    Random { k: usize, filter: LabelFilter, seed: u64 },
    Empty,
}

/// What reaches the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    Skill,
    RawEvidence,
    Nothing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationPlan {
    pub evidence: EvidenceSource,
    pub injection: Injection,
}

impl AdaptationPlan {
    pub fn full(settings: &PipelineSettings) -> Self {
        Self {
            evidence: EvidenceSource::Retrieve { k: settings.k, filter: settings.filter },
            injection: Injection::Skill,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("task `{task_id}`: retrieval text: {source}")]
    EmbedText { task_id: String, source: EmbedTextError },
    #[error("task `{task_id}`: embedding provider failed: {source}")]
    Embed { task_id: String, source: ProviderError },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Compaction(#[from] BudgetTooSmall),
    #[error("task `{task_id}`: {source}")]
    Synthesis { task_id: String, source: SynthesisError },
    #[error("task `{task_id}`: {source}")]
    Solve { task_id: String, source: SolveError },
    #[error("retrieved id `{0}` is not in the pool")]
    UnknownHit(String),
    #[error("worker pool: {0}")]
    Workers(String),
}

impl PipelineError {
    pub fn is_provider_failure(&self) -> bool {
        match self {
            PipelineError::Embed { .. } => true,
            PipelineError::EmbedText { source, .. } => matches!(source, EmbedTextError::ProviderFailure(_)),
            PipelineError::Retrieval(RetrievalError::ProviderFailure { .. }) => true,
            PipelineError::Synthesis { source, .. } => matches!(source, SynthesisError::ProviderFailure(_)),
            PipelineError::Solve { source, .. } => matches!(source, SolveError::ProviderFailure { .. }),
            _ => false,
        }
    }

    pub fn is_leak_rejection(&self) -> bool {
        matches!(self, PipelineError::Synthesis { source: SynthesisError::LeakRejected(_), .. })
    }
}

/// Summarize a spreadsheet instruction when enabled; other tasks get none.
fn summary_for(
    ctx: &TaskContext,
    providers: &Providers<'_>,
    settings: &PipelineSettings,
    ledger: &CostLedger,
    cache: &HashMap<String, InstructionSummary>,
) -> Result<Option<InstructionSummary>, PipelineError> {
    if !settings.use_summary || ctx.benchmark != Benchmark::Spreadsheet {
        return Ok(None);
    }
    if let Some(cached) = cache.get(&ctx.task_id) {
        return Ok(Some(cached.clone()));
    }
    let outcome = summarize_instruction(&ctx.description, providers.synthesizer)
        .map_err(|source| PipelineError::EmbedText { task_id: ctx.task_id.clone(), source })?;
    ledger.record_call(Stage::Summarize, &ctx.task_id, outcome.decoded_tokens, outcome.input_tokens);
    Ok(Some(outcome.summary))
}

pub fn retrieval_text(
    ctx: &TaskContext,
    providers: &Providers<'_>,
    settings: &PipelineSettings,
    ledger: &CostLedger,
    cache: &HashMap<String, InstructionSummary>,
) -> Result<EmbeddingText, PipelineError> {
    let summary = summary_for(ctx, providers, settings, ledger, cache)?;
    build_embed_text(ctx, summary.as_ref())
        .map_err(|source| PipelineError::EmbedText { task_id: ctx.task_id.clone(), source })
}

/// Indexed pool (stages 1 and 2).
#[derive(Debug, Clone)]
pub struct PreparedPool {
    pub pool: TrajectoryPool,
    pub index: VectorIndex,
}

pub fn prepare_pool(
    pool: TrajectoryPool,
    providers: &Providers<'_>,
    settings: &PipelineSettings,
    ledger: &CostLedger,
    summaries: &HashMap<String, InstructionSummary>,
) -> Result<PreparedPool, PipelineError> {
    let texts = pool
        .records()
        .iter()
        .map(|r| retrieval_text(&r.context, providers, settings, ledger, summaries))
        .collect::<Result<Vec<_>, _>>()?;
    let built = build_index(&pool, &texts, providers.embedder)?;
    if built.calls > 0 {
        ledger.push(LedgerEntry {
            stage: Stage::Embed,
            task_id: INDEX_TASK_ID.to_string(),
            decoded_tokens: 0,
            input_tokens: built.input_tokens,
            calls: built.calls,
        });
    }
    ledger.record_retries(INDEX_TASK_ID, built.retries);
    Ok(PreparedPool { pool, index: built.index })
}

/// Evidence and skill produced for one test task (stages 3 and 4).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskAdaptation {
    pub task_id: String,
    pub retrieval: RetrievalResult,
    pub evidence: Vec<CompactedEvidence>,
    pub skill: Option<SkillDocument>,
    pub leakage: Option<LeakageReport>,
}

fn query_vector(
    ctx: &TaskContext,
    providers: &Providers<'_>,
    settings: &PipelineSettings,
    ledger: &CostLedger,
    summaries: &HashMap<String, InstructionSummary>,
) -> Result<EmbeddingVector, PipelineError> {
    let text = retrieval_text(ctx, providers, settings, ledger, summaries)?;
    let batch = providers
        .embedder
        .embed(std::slice::from_ref(&text.text))
        .map_err(|source| PipelineError::Embed { task_id: ctx.task_id.clone(), source })?;
    ledger.record_call(Stage::Embed, &ctx.task_id, 0, batch.input_tokens);
    ledger.record_retries(&ctx.task_id, u64::from(batch.retries));
    let vector = batch.vectors.into_iter().next().ok_or_else(|| PipelineError::Embed {
        task_id: ctx.task_id.clone(),
        source: ProviderError::InvalidResponse("no vector returned".into()),
    })?;
    Ok(EmbeddingVector::new(vector))
}

pub fn adapt_task(
    prepared: &PreparedPool,
    ctx: &TaskContext,
    plan: &AdaptationPlan,
    providers: &Providers<'_>,
    settings: &PipelineSettings,
    ledger: &CostLedger,
    summaries: &HashMap<String, InstructionSummary>,
) -> Result<TaskAdaptation, PipelineError> {
    let retrieval = match plan.evidence {
        EvidenceSource::Retrieve { k, filter } => {
            let query = query_vector(ctx, providers, settings, ledger, summaries)?;
            retrieve(&prepared.index, &query, k, filter, Some(&ctx.task_id))?
        }
        EvidenceSource::Random { k, filter, seed } => random_retrieve(&prepared.index, k, filter, seed, Some(&ctx.task_id)),
        EvidenceSource::Empty => RetrievalResult { hits: vec![], filter_applied: LabelFilter::All, k_requested: 0 },
    };
    let evidence = retrieval
        .hits
        .iter()
        .map(|hit| {
            let record = prepared.pool.get(&hit.task_id).ok_or_else(|| PipelineError::UnknownHit(hit.task_id.clone()))?;
            Ok(compact_trajectory(record, settings.evidence_budget)?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;

    let (skill, leakage) = if plan.injection == Injection::Skill {
        let req = SynthesisRequest {
            target: ctx.clone(),
            evidence: evidence.clone(),
            profile: Profile::for_benchmark(ctx.benchmark),
        };
        let outcome = synthesize_skill(providers.synthesizer, &req, &settings.synthesis, ledger)
            .map_err(|source| PipelineError::Synthesis { task_id: ctx.task_id.clone(), source })?;
        (Some(outcome.skill), Some(outcome.report))
    } else {
        (None, None)
    };
    Ok(TaskAdaptation { task_id: ctx.task_id.clone(), retrieval, evidence, skill, leakage })
}

/// Solver prompt for an adapted task according to the plan's injection.
pub fn solver_prompt(
    ctx: &TaskContext,
    adaptation: &TaskAdaptation,
    injection: Injection,
) -> Result<SolverPrompt, PipelineError> {
    let profile = Profile::for_benchmark(ctx.benchmark);
    let prompt = match injection {
        Injection::Skill => assemble_solver_prompt(ctx, adaptation.skill.as_ref(), profile),
        Injection::RawEvidence => assemble_raw_evidence_prompt(ctx, &adaptation.evidence, profile),
        Injection::Nothing => assemble_solver_prompt(ctx, None, profile),
    };
    prompt.map_err(|source| PipelineError::Solve { task_id: ctx.task_id.clone(), source })
}

pub fn solve_prompt(
    prompt: &SolverPrompt,
    providers: &Providers<'_>,
    settings: &PipelineSettings,
    ledger: &CostLedger,
) -> Result<SolveOutcome, PipelineError> {
    run_solver(providers.solver, prompt, settings.samples, settings.solve_temperature, settings.solve_max_tokens, ledger)
        .map_err(|source| PipelineError::Solve { task_id: prompt.task_id.clone(), source })
}

/// Everything produced for one test task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRun {
    pub adaptation: TaskAdaptation,
    pub prompt: SolverPrompt,
    pub outcome: SolveOutcome,
}

/// Seed for random retrieval of the task at `position`.
pub fn task_seed(base: u64, position: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(position as u64)
}

/// Run `f` over `tasks` on at most `workers` threads; results keep task
/// order and the first failure in task order is returned.
pub fn for_each_task<T, F>(tasks: &[TaskContext], workers: usize, f: F) -> Result<Vec<T>, PipelineError>
where
    T: Send,
    F: Fn(usize, &TaskContext) -> Result<T, PipelineError> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Workers(e.to_string()))?;
    let results: Vec<Result<T, PipelineError>> =
        pool.install(|| tasks.par_iter().enumerate().map(|(i, t)| f(i, t)).collect());
    results.into_iter().collect()
}

/// Stages 3 to 5 for every test task under one plan.
pub fn run_tasks(
    prepared: &PreparedPool,
    tests: &[TaskContext],
    plan: &AdaptationPlan,
    providers: &Providers<'_>,
    settings: &PipelineSettings,
    ledger: &CostLedger,
    summaries: &HashMap<String, InstructionSummary>,
) -> Result<Vec<TaskRun>, PipelineError> {
    for_each_task(tests, settings.workers, |position, ctx| {
        let plan = match plan.evidence {
            EvidenceSource::Random { k, filter, seed } => AdaptationPlan {
                evidence: EvidenceSource::Random { k, filter, seed: task_seed(seed, position) },
                injection: plan.injection,
            },
            _ => *plan,
        };
        let adaptation = adapt_task(prepared, ctx, &plan, providers, settings, ledger, summaries)?;
        let prompt = solver_prompt(ctx, &adaptation, plan.injection)?;
        let outcome = solve_prompt(&prompt, providers, settings, ledger)?;
        Ok(TaskRun { adaptation, prompt, outcome })
    })
}
