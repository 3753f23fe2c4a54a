use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;

use skillsynth_core::cost::{CostLedger, TokenMetric};
use skillsynth_core::embed_text::{read_summary_cache, InstructionSummary};
use skillsynth_core::harness::{
    aggregate_metrics, apply_verdicts, make_synthetic_family, outcomes_from_verdicts, read_verdicts, run_ablation,
    verify_outcomes, AblationArm, ArmReport, Experiment, HarnessError, MetricsDocument, ScriptedSolver,
    SyntheticVerifier, VerdictRecord,
};
use skillsynth_core::pipeline::{
    adapt_task, for_each_task, prepare_pool, retrieval_text, run_tasks, solve_prompt, AdaptationPlan, PipelineError,
    PipelineSettings, PreparedPool, Providers, TaskAdaptation,
};
use skillsynth_core::pool::{ingest_pool, Benchmark, Label, TaskContext, TrajectoryPool};
use skillsynth_core::profile::Profile;
use skillsynth_core::provider::{EmbeddingProvider, GenerationProvider, MockEmbedder, MockSynthesizer};
use skillsynth_core::retrieval::{retrieve, EmbeddingVector, VectorIndex};
use skillsynth_core::solve::{assemble_solver_prompt, read_transcripts, SolveOutcome};
use skillsynth_core::synthesis::{parse_skill_document, SkillDocument, Violation};

use crate::config::{EngineConfig, ProviderKind, ProviderSpec};
use crate::http::HttpProvider;
use crate::{CliError, Command, GlobalArgs};

type CliResult<T> = Result<T, CliError>;

fn input(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Input(e.into())
}

fn pipeline_error(e: PipelineError) -> CliError {
    if e.is_leak_rejection() {
        CliError::Leak(e.into())
    } else if e.is_provider_failure() {
        CliError::Provider(e.into())
    } else {
        CliError::Input(e.into())
    }
}

fn harness_error(e: HarnessError) -> CliError {
    match e {
        HarnessError::Pipeline(p) => pipeline_error(p),
        other => input(other),
    }
}

fn load_config(global: &GlobalArgs) -> CliResult<EngineConfig> {
    let mut cfg = EngineConfig::load(global.config.as_deref()).map_err(CliError::Config)?;
    if let Some(k) = global.k {
        cfg.retrieval.k = k;
    }
    if let Some(f) = global.filter {
        cfg.retrieval.filter = f;
    }
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(n) = global.samples {
        cfg.samples = n;
    }
    if let Some(p) = global.leak_policy {
        cfg.leak.policy = p;
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

/// Providers built from config; mocks need no network.
struct Engine {
    embedder: Box<dyn EmbeddingProvider>,
    synthesizer: Box<dyn GenerationProvider>,
    solver: Box<dyn GenerationProvider>,
    settings: PipelineSettings,
    seed: u64,
}

fn http(spec: &ProviderSpec) -> CliResult<HttpProvider> {
    HttpProvider::new(spec).map_err(|e| CliError::Config(e.into()))
}

impl Engine {
    fn new(cfg: &EngineConfig) -> CliResult<Self> {
        let p = &cfg.providers;
        let embedder: Box<dyn EmbeddingProvider> = match p.embedder.kind {
            ProviderKind::Mock => {
                let mock = MockEmbedder::new(cfg.retrieval.mock_dim);
                if p.embedder.model.is_empty() {
                    Box::new(mock)
                } else {
                    Box::new(mock.with_model(&p.embedder.model))
                }
            }
            ProviderKind::Http => Box::new(http(&p.embedder)?),
        };
        let synthesizer: Box<dyn GenerationProvider> = match p.synthesizer.kind {
            ProviderKind::Mock => Box::new(MockSynthesizer::new()),
            ProviderKind::Http => Box::new(http(&p.synthesizer)?),
        };
        let solver: Box<dyn GenerationProvider> = match p.solver.kind {
            ProviderKind::Mock => Box::new(ScriptedSolver),
            ProviderKind::Http => Box::new(http(&p.solver)?),
        };
        Ok(Self { embedder, synthesizer, solver, settings: cfg.pipeline_settings(), seed: cfg.seed })
    }

    fn providers(&self) -> Providers<'_> {
        Providers { embedder: &*self.embedder, synthesizer: &*self.synthesizer, solver: &*self.solver }
    }
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).with_context(|| format!("cannot open {}", path.display())).map_err(input)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display())).map_err(input)?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display())).map_err(input)
}

fn load_pool(path: &Path) -> CliResult<TrajectoryPool> {
    ingest_pool(open(path)?).with_context(|| format!("in {}", path.display())).map_err(input)
}

/// JSONL task contexts; pool-format lines are accepted too.
fn load_tasks(path: &Path) -> CliResult<Vec<TaskContext>> {
    let mut tasks = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display())).map_err(input)?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx: TaskContext = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", path.display(), i + 1))
            .map_err(input)?;
        ctx.validate().with_context(|| format!("{} line {}", path.display(), i + 1)).map_err(input)?;
        if !seen.insert(ctx.task_id.clone()) {
            return Err(input(anyhow!("{}: duplicate task_id `{}`", path.display(), ctx.task_id)));
        }
        tasks.push(ctx);
    }
    Ok(tasks)
}

fn load_summaries(path: Option<&Path>) -> CliResult<HashMap<String, InstructionSummary>> {
    match path {
        Some(p) => read_summary_cache(open(p)?).with_context(|| format!("in {}", p.display())).map_err(input),
        None => Ok(HashMap::new()),
    }
}

fn load_index(path: &Path, embedder: &dyn EmbeddingProvider) -> CliResult<VectorIndex> {
    let index = VectorIndex::read_from(open(path)?).with_context(|| format!("in {}", path.display())).map_err(input)?;
    if index.model() != embedder.model_name() {
        return Err(CliError::Config(anyhow!(
            "index {} was built with embedding model `{}` but the configured embedder is `{}`",
            path.display(),
            index.model(),
            embedder.model_name()
        )));
    }
    Ok(index)
}

fn save_ledger(path: Option<&Path>, ledger: &CostLedger) -> CliResult<()> {
    if let Some(path) = path {
        let mut buf = Vec::new();
        ledger.write_jsonl(&mut buf).map_err(input)?;
        write_file(path, &String::from_utf8(buf).expect("ledger is UTF-8"))?;
    }
    Ok(())
}

fn skill_file_name(task_id: &str) -> CliResult<String> {
    if task_id.is_empty() || task_id.starts_with('.') || task_id.contains(['/', '\\']) {
        return Err(input(anyhow!("task_id `{task_id}` cannot be used as a file name")));
    }
    Ok(format!("{task_id}.skill.md"))
}

#[derive(Serialize)]
struct RetrievedEntry<'a> {
    task_id: &'a str,
    similarity: f64,
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    task_id: &'a str,
    skill_file: Option<String>,
    retrieved: Vec<RetrievedEntry<'a>>,
    violations: &'a [Violation],
}

/// Write skill files and `manifest.json` in task order.
fn write_skills(dir: &Path, adaptations: &[&TaskAdaptation]) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display())).map_err(input)?;
    let mut manifest = Vec::with_capacity(adaptations.len());
    for a in adaptations {
        let skill_file = match &a.skill {
            Some(skill) => {
                let name = skill_file_name(&a.task_id)?;
                let mut text = skill.raw.trim_end().to_string();
                text.push('\n');
                write_file(&dir.join(&name), &text)?;
                Some(name)
            }
            None => None,
        };
        manifest.push(ManifestEntry {
            task_id: &a.task_id,
            skill_file,
            retrieved: a
                .retrieval
                .hits
                .iter()
                .map(|h| RetrievedEntry { task_id: &h.task_id, similarity: h.similarity })
                .collect(),
            violations: a.leakage.as_ref().map_or(&[][..], |r| &r.violations),
        });
    }
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_file(&dir.join("manifest.json"), &json)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("row serializes"));
        out.push('\n');
    }
    write_file(path, &out)
}

fn read_outcomes(path: &Path) -> CliResult<Vec<SolveOutcome>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(input)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1)).map_err(input)?,
        );
    }
    Ok(out)
}

fn verdict_rows(outcomes: &[SolveOutcome]) -> Vec<VerdictRecord> {
    outcomes
        .iter()
        .flat_map(|o| {
            o.verdicts.iter().flatten().enumerate().map(|(sample_index, &passed)| VerdictRecord {
                task_id: o.task_id.clone(),
                sample_index,
                passed,
            })
        })
        .collect()
}

fn require_synthetic(tasks: &[TaskContext], what: &str) -> CliResult<()> {
    match tasks.iter().find(|t| t.benchmark != Benchmark::Synthetic) {
        Some(t) => Err(input(anyhow!(
            "{what} needs a built-in verifier, which exists only for synthetic tasks (task `{}` is {}); score other benchmarks externally and use `evaluate`",
            t.task_id,
            t.benchmark.as_str()
        ))),
        None => Ok(()),
    }
}

fn profile_of(tasks: &[TaskContext]) -> CliResult<Profile> {
    let first = tasks.first().ok_or_else(|| input(anyhow!("no test tasks")))?;
    if let Some(other) = tasks.iter().find(|t| t.benchmark != first.benchmark) {
        return Err(input(anyhow!("mixed benchmarks: `{}` is {}, `{}` is {}", first.task_id, first.benchmark.as_str(), other.task_id, other.benchmark.as_str())));
    }
    Ok(Profile::for_benchmark(first.benchmark))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializes"));
}

pub fn dispatch(global: &GlobalArgs, command: Command) -> CliResult<()> {
    let cfg = load_config(global)?;
    match command {
        Command::Ingest { pool, out } => cmd_ingest(&pool, out.as_deref()),
        Command::Index { pool, out, summaries, ledger } => {
            cmd_index(&cfg, &pool, &out, summaries.as_deref(), ledger.as_deref())
        }
        Command::Retrieve { index, tasks, task_id, summaries } => {
            cmd_retrieve(&cfg, &index, &tasks, &task_id, summaries.as_deref())
        }
        Command::Synthesize { index, pool, tasks, out, summaries, ledger } => {
            cmd_synthesize(&cfg, &index, &pool, &tasks, &out, summaries.as_deref(), ledger.as_deref())
        }
        Command::Solve { tasks, skills, out, ledger } => cmd_solve(&cfg, &tasks, &skills, &out, ledger.as_deref()),
        Command::Verify { tasks, outputs, out } => cmd_verify(&tasks, &outputs, &out),
        Command::Evaluate { verdicts, outputs, transcripts, profile, arm, out, csv } => cmd_evaluate(
            &cfg,
            verdicts.as_deref(),
            outputs.as_deref(),
            transcripts.as_deref(),
            profile,
            &arm,
            &out,
            csv.as_deref(),
        ),
        Command::Cost { ledger, n_test, method, total_tokens, out } => {
            cmd_cost(&ledger, n_test, &method, total_tokens, &out)
        }
        Command::Synthetic { tasks, out } => cmd_synthetic(cfg.seed, tasks, &out),
        Command::Run { pool, tasks, out, summaries } => cmd_run(&cfg, &pool, &tasks, &out, summaries.as_deref()),
        Command::Ablate { pool, tasks, out, arms } => cmd_ablate(&cfg, &pool, &tasks, &out, &arms),
    }
}

#[derive(Serialize)]
struct IngestSummary {
    records: usize,
    success: usize,
    failure: usize,
    unknown: usize,
}

fn cmd_ingest(pool: &Path, out: Option<&Path>) -> CliResult<()> {
    let pool = load_pool(pool)?;
    let count = |l: Label| pool.records().iter().filter(|r| r.label == l).count();
    print_json(&IngestSummary {
        records: pool.len(),
        success: count(Label::Success),
        failure: count(Label::Failure),
        unknown: count(Label::Unknown),
    });
    if let Some(out) = out {
        write_file(out, &pool.to_jsonl())?;
    }
    Ok(())
}

fn index_pool(
    engine: &Engine,
    pool: TrajectoryPool,
    ledger: &CostLedger,
    summaries: &HashMap<String, InstructionSummary>,
) -> CliResult<PreparedPool> {
    prepare_pool(pool, &engine.providers(), &engine.settings, ledger, summaries).map_err(pipeline_error)
}

fn write_index(path: &Path, index: &VectorIndex) -> CliResult<()> {
    let mut buf = Vec::new();
    index.write_to(&mut buf).map_err(input)?;
    write_file(path, &String::from_utf8(buf).expect("index is UTF-8"))
}

fn cmd_index(
    cfg: &EngineConfig,
    pool: &Path,
    out: &Path,
    summaries: Option<&Path>,
    ledger_path: Option<&Path>,
) -> CliResult<()> {
    let engine = Engine::new(cfg)?;
    let ledger = CostLedger::new();
    let prepared = index_pool(&engine, load_pool(pool)?, &ledger, &load_summaries(summaries)?)?;
    write_index(out, &prepared.index)?;
    save_ledger(ledger_path, &ledger)?;
    tracing::info!(entries = prepared.index.len(), dim = prepared.index.dim(), "index written");
    Ok(())
}

fn cmd_retrieve(
    cfg: &EngineConfig,
    index: &Path,
    tasks: &Path,
    task_id: &str,
    summaries: Option<&Path>,
) -> CliResult<()> {
    let engine = Engine::new(cfg)?;
    let index = load_index(index, &*engine.embedder)?;
    let tasks = load_tasks(tasks)?;
    let task = tasks
        .iter()
        .find(|t| t.task_id == task_id)
        .ok_or_else(|| input(anyhow!("task `{task_id}` is not in the tasks file")))?;
    let ledger = CostLedger::new();
    let text = retrieval_text(task, &engine.providers(), &engine.settings, &ledger, &load_summaries(summaries)?)
        .map_err(pipeline_error)?;
    let batch = engine
        .embedder
        .embed(std::slice::from_ref(&text.text))
        .map_err(|e| CliError::Provider(anyhow!("embedding `{task_id}`: {e}")))?;
    let vector = batch.vectors.into_iter().next().ok_or_else(|| CliError::Provider(anyhow!("no vector returned")))?;
    let result = retrieve(&index, &EmbeddingVector::new(vector), engine.settings.k, engine.settings.filter, Some(task_id))
        .map_err(input)?;
    print_json(&result);
    Ok(())
}

fn prepared_from_index(index: VectorIndex, pool: TrajectoryPool) -> CliResult<PreparedPool> {
    if let Some(missing) = index.entries().iter().find(|e| pool.get(&e.task_id).is_none()) {
        return Err(input(anyhow!("index entry `{}` is not in the pool", missing.task_id)));
    }
    Ok(PreparedPool { pool, index })
}

fn adapt_all(
    engine: &Engine,
    prepared: &PreparedPool,
    tasks: &[TaskContext],
    plan: &AdaptationPlan,
    ledger: &CostLedger,
    summaries: &HashMap<String, InstructionSummary>,
) -> CliResult<Vec<TaskAdaptation>> {
    let providers = engine.providers();
    for_each_task(tasks, engine.settings.workers, |_, task| {
        adapt_task(prepared, task, plan, &providers, &engine.settings, ledger, summaries)
    })
    .map_err(pipeline_error)
}

fn cmd_synthesize(
    cfg: &EngineConfig,
    index: &Path,
    pool: &Path,
    tasks: &Path,
    out: &Path,
    summaries: Option<&Path>,
    ledger_path: Option<&Path>,
) -> CliResult<()> {
    let engine = Engine::new(cfg)?;
    let prepared = prepared_from_index(load_index(index, &*engine.embedder)?, load_pool(pool)?)?;
    let tasks = load_tasks(tasks)?;
    for t in &tasks {
        skill_file_name(&t.task_id)?;
    }
    let ledger = CostLedger::new();
    let plan = AdaptationPlan::full(&engine.settings);
    let adaptations = adapt_all(&engine, &prepared, &tasks, &plan, &ledger, &load_summaries(summaries)?)?;
    write_skills(out, &adaptations.iter().collect::<Vec<_>>())?;
    save_ledger(ledger_path, &ledger)
}

fn cmd_solve(cfg: &EngineConfig, tasks: &Path, skills: &Path, out: &Path, ledger_path: Option<&Path>) -> CliResult<()> {
    let engine = Engine::new(cfg)?;
    let tasks = load_tasks(tasks)?;
    // All skills are checked before any solver call is spent.
    let mut docs: Vec<SkillDocument> = Vec::with_capacity(tasks.len());
    for t in &tasks {
        let path: PathBuf = skills.join(skill_file_name(&t.task_id)?);
        let text = fs::read_to_string(&path)
            .map_err(|e| input(anyhow!("missing skill for task `{}` ({}): {e}", t.task_id, path.display())))?;
        docs.push(
            parse_skill_document(&text)
                .map_err(|e| input(anyhow!("skill for task `{}` is malformed: {e}", t.task_id)))?,
        );
    }
    let ledger = CostLedger::new();
    let providers = engine.providers();
    let outcomes = for_each_task(&tasks, engine.settings.workers, |i, task| {
        let prompt = assemble_solver_prompt(task, Some(&docs[i]), Profile::for_benchmark(task.benchmark))
            .map_err(|source| PipelineError::Solve { task_id: task.task_id.clone(), source })?;
        solve_prompt(&prompt, &providers, &engine.settings, &ledger)
    })
    .map_err(pipeline_error)?;
    write_jsonl(out, &outcomes)?;
    save_ledger(ledger_path, &ledger)
}

fn cmd_verify(tasks: &Path, outputs: &Path, out: &Path) -> CliResult<()> {
    let tasks = load_tasks(tasks)?;
    require_synthetic(&tasks, "verify")?;
    let mut outcomes = read_outcomes(outputs)?;
    if let Some(o) = outcomes.iter().find(|o| !tasks.iter().any(|t| t.task_id == o.task_id)) {
        return Err(input(anyhow!("outcome for unknown task `{}`", o.task_id)));
    }
    verify_outcomes(&mut outcomes, &tasks, &SyntheticVerifier);
    write_jsonl(out, &verdict_rows(&outcomes))
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    cfg: &EngineConfig,
    verdicts: Option<&Path>,
    outputs: Option<&Path>,
    transcripts: Option<&Path>,
    profile: Profile,
    arm: &str,
    out: &Path,
    csv: Option<&Path>,
) -> CliResult<()> {
    let mut outcomes = match (outputs, transcripts) {
        (Some(_), Some(_)) => return Err(input(anyhow!("pass either --outputs or --transcripts, not both"))),
        (Some(path), None) => read_outcomes(path)?,
        (None, Some(path)) => read_transcripts(open(path)?)
            .with_context(|| format!("in {}", path.display()))
            .map_err(input)?
            .into_iter()
            .map(|t| t.into_outcome())
            .collect(),
        (None, None) => Vec::new(),
    };
    if let Some(path) = verdicts {
        let records = read_verdicts(open(path)?).map_err(harness_error)?;
        if outcomes.is_empty() {
            outcomes = outcomes_from_verdicts(&records).map_err(harness_error)?;
        } else {
            apply_verdicts(&mut outcomes, &records).map_err(harness_error)?;
        }
    }
    let metrics = aggregate_metrics(&outcomes, profile).map_err(harness_error)?;
    let doc = MetricsDocument::new(cfg.seed, vec![ArmReport { arm: arm.to_string(), metrics }]);
    write_file(out, &doc.to_json())?;
    if let Some(csv) = csv {
        write_file(csv, &doc.to_csv())?;
    }
    Ok(())
}

fn cmd_cost(ledger: &Path, n_test: usize, method: &str, total_tokens: bool, out: &Path) -> CliResult<()> {
    let ledger = CostLedger::read_jsonl(open(ledger)?).with_context(|| format!("in {}", ledger.display())).map_err(input)?;
    let metric = if total_tokens { TokenMetric::Total } else { TokenMetric::Decoded };
    let csv = ledger.report_csv(method, n_test, metric).map_err(input)?;
    write_file(out, &csv)
}

fn cmd_synthetic(seed: u64, n_test: usize, out: &Path) -> CliResult<()> {
    let fam = make_synthetic_family(seed, n_test).map_err(harness_error)?;
    write_file(&out.join("pool.jsonl"), &fam.pool.to_jsonl())?;
    write_jsonl(&out.join("tasks.jsonl"), &fam.tests)
}

fn cmd_run(cfg: &EngineConfig, pool: &Path, tasks: &Path, out: &Path, summaries: Option<&Path>) -> CliResult<()> {
    let engine = Engine::new(cfg)?;
    let tasks = load_tasks(tasks)?;
    let profile = profile_of(&tasks)?;
    for t in &tasks {
        skill_file_name(&t.task_id)?;
    }
    let summaries = load_summaries(summaries)?;
    let ledger = CostLedger::new();
    let prepared = index_pool(&engine, load_pool(pool)?, &ledger, &summaries)?;
    write_index(&out.join("index.idx"), &prepared.index)?;

    let plan = AdaptationPlan::full(&engine.settings);
    let runs = run_tasks(&prepared, &tasks, &plan, &engine.providers(), &engine.settings, &ledger, &summaries)
        .map_err(pipeline_error)?;
    write_skills(&out.join("skills"), &runs.iter().map(|r| &r.adaptation).collect::<Vec<_>>())?;
    let mut outcomes: Vec<SolveOutcome> = runs.into_iter().map(|r| r.outcome).collect();

    if profile == Profile::Synthetic {
        verify_outcomes(&mut outcomes, &tasks, &SyntheticVerifier);
        write_jsonl(&out.join("verdicts.jsonl"), &verdict_rows(&outcomes))?;
        let metrics = aggregate_metrics(&outcomes, profile).map_err(harness_error)?;
        let doc = MetricsDocument::new(engine.seed, vec![ArmReport { arm: AblationArm::FullPipeline.name(), metrics }]);
        write_file(&out.join("metrics.json"), &doc.to_json())?;
        write_file(&out.join("metrics.csv"), &doc.to_csv())?;
    } else {
        tracing::warn!("no built-in verifier for {profile}; score outcomes.jsonl externally and run `evaluate`");
    }
    write_jsonl(&out.join("outcomes.jsonl"), &outcomes)?;
    save_ledger(Some(&out.join("ledger.jsonl")), &ledger)?;
    let csv = ledger.report_csv("test_time_synthesis", tasks.len(), TokenMetric::Decoded).map_err(input)?;
    write_file(&out.join("cost.csv"), &csv)
}

fn cmd_ablate(cfg: &EngineConfig, pool: &Path, tasks: &Path, out: &Path, arms: &[String]) -> CliResult<()> {
    let arms: Vec<AblationArm> = arms
        .iter()
        .map(|a| a.parse().map_err(|e: String| CliError::Config(anyhow!(e))))
        .collect::<Result<_, _>>()?;
    let engine = Engine::new(cfg)?;
    let tasks = load_tasks(tasks)?;
    profile_of(&tasks)?;
    require_synthetic(&tasks, "ablate")?;
    let summaries = HashMap::new();
    let prepared = index_pool(&engine, load_pool(pool)?, &CostLedger::new(), &summaries)?;
    let exp = Experiment {
        prepared: &prepared,
        tests: &tasks,
        providers: engine.providers(),
        settings: engine.settings,
        verifier: &SyntheticVerifier,
        summaries: &summaries,
    };
    let mut reports = Vec::with_capacity(arms.len());
    let mut cost = String::new();
    for arm in arms {
        let run = run_ablation(arm, &exp).map_err(harness_error)?;
        let csv = run.ledger.report_csv(&arm.name(), tasks.len(), TokenMetric::Decoded).map_err(input)?;
        // One header for the whole file.
        let body = csv.split_once('\n').map_or("", |(_, rows)| rows);
        if cost.is_empty() {
            cost.push_str(csv.lines().next().unwrap_or_default());
            cost.push('\n');
        }
        cost.push_str(body);
        reports.push(run.report);
    }
    let doc = MetricsDocument::new(engine.seed, reports);
    write_file(&out.join("metrics.json"), &doc.to_json())?;
    write_file(&out.join("metrics.csv"), &doc.to_csv())?;
    write_file(&out.join("cost.csv"), &cost)?;
    print!("{}", doc.to_csv());
    std::io::stdout().flush().map_err(input)
}
