//! Solver prompt composition and sampling. The solver model is fixed; the
//! only adaptation channel is the skill text placed in its prompt.

use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostLedger, Stage};
use crate::pool::{Benchmark, CompactedEvidence, ContextError, Role, Step, TaskContext};
use crate::profile::Profile;
use crate::provider::{GenerationProvider, GenerationRequest, ProviderError};
use crate::synthesis::SkillDocument;

pub const SKILL_BEGIN: &str = "=== SKILL (task-specific guidance) ===";
pub const SKILL_END: &str = "=== END SKILL ===";
pub const EVIDENCE_BEGIN: &str = "=== EXAMPLE TRAJECTORIES ===";
pub const EVIDENCE_END: &str = "=== END EXAMPLES ===";
pub const TASK_BEGIN: &str = "=== TASK ===";
pub const SPREADSHEET_GUARD: &str =
    "The skill may only provide procedural guidance, not cell values or final answers.";

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("profile `{profile}` cannot solve a `{benchmark}` task")]
    ProfileMismatch { profile: Profile, benchmark: Benchmark },
    #[error("invalid task context: {0}")]
    InvalidContext(#[from] ContextError),
    #[error("solver provider failed on sample {sample_index}: {source}")]
    ProviderFailure { sample_index: usize, source: ProviderError },
    #[error("invalid solver request: {0}")]
    InvalidRequest(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverPrompt {
    pub task_id: String,
    pub system_text: String,
    pub user_text: String,
    pub profile: Profile,
    pub skill_attached: bool,
    /// Raw evidence injected directly (trajectory-prompting baseline only).
    pub evidence_attached: bool,
}

impl SolverPrompt {
    /// `=== SYSTEM ===` / `=== USER ===` export format.
    pub fn export(&self) -> String {
        format!("=== SYSTEM ===\n{}\n=== USER ===\n{}", self.system_text, self.user_text)
    }
}

fn system_text(profile: Profile) -> &'static str {
    match profile {
        Profile::Spreadsheet => "You are a spreadsheet agent. Modify the workbook so that the requested answer position holds the correct result. Work from the instruction, the compact spreadsheet previews and any execution traces you are given, and write the result into the workbook rather than describing it.",
        Profile::Alfworld => "You are an agent acting in a text-based household environment. Interact only through admissible actions. On every turn write one `Thought:` line followed by one `Action:` line; the environment answers with an `Observation:` line. Stop as soon as the goal is satisfied.",
        Profile::BigCode => "You are a careful Python programmer. Complete the function so that it satisfies its documented contract, using only the listed libraries. Reply with the complete function code only.",
        Profile::Synthetic => "You transcribe a visible input value under a named rule. Reply with `Action:` lines, one per step, and finish with `Action: submit <value>`.",
    }
}

fn scaffold(profile: Profile) -> &'static str {
    match profile {
        Profile::Spreadsheet => "Solve the spreadsheet task below. Inspect the previews, perform the edit, and verify that the answer position contains the result.",
        Profile::Alfworld => "Complete the household task below using the Thought/Action/Observation format. Use only admissible actions such as `go to`, `take`, `put`, `open`, `close`, `clean`, `heat`, `cool` and `use`.",
        Profile::BigCode => "Implement the function described below. Keep the given signature and return the documented type.",
        Profile::Synthetic => "Transcribe the input below under its rule.",
    }
}

/// Task payload: instruction, then the profile's contract fields, then any
/// other visible metadata. Leak-listed keys are never rendered.
fn payload(ctx: &TaskContext) -> String {
    let mut out = format!("{TASK_BEGIN}\ninstruction: {}\n", ctx.description);
    let required = ctx.benchmark.required_keys();
    for key in required {
        if let Some(value) = ctx.get(key) {
            let _ = writeln!(out, "{key}: {value}");
        }
    }
    for (key, value) in ctx.visible_metadata() {
        if !required.contains(&key) {
            let _ = writeln!(out, "{key}: {value}");
        }
    }
    out
}

fn check(ctx: &TaskContext, profile: Profile) -> Result<(), SolveError> {
    if profile.benchmark() != ctx.benchmark {
        return Err(SolveError::ProfileMismatch { profile, benchmark: ctx.benchmark });
    }
    ctx.validate()?;
    Ok(())
}

/// Compose the solver prompt for a task and its optional skill. The skill block, when
/// present, sits between the scaffold instructions and the task payload.
pub fn assemble_solver_prompt(
    ctx: &TaskContext,
    skill: Option<&SkillDocument>,
    profile: Profile,
) -> Result<SolverPrompt, SolveError> {
    check(ctx, profile)?;
    let mut user = format!("{}\n\n", scaffold(profile));
    if let Some(skill) = skill {
        let _ = writeln!(user, "{SKILL_BEGIN}\n{}\n{SKILL_END}\n", skill.raw.trim_end());
    }
    user.push_str(&payload(ctx));
    if skill.is_some() && profile == Profile::Spreadsheet {
        let _ = write!(user, "\n{SPREADSHEET_GUARD}\n");
    }
    Ok(SolverPrompt {
        task_id: ctx.task_id.clone(),
        system_text: system_text(profile).to_string(),
        user_text: user,
        profile,
        skill_attached: skill.is_some(),
        evidence_attached: false,
    })
}

/// Raw-trajectory baseline: compacted evidence goes straight into the
/// solver prompt in place of a skill.
pub fn assemble_raw_evidence_prompt(
    ctx: &TaskContext,
    evidence: &[CompactedEvidence],
    profile: Profile,
) -> Result<SolverPrompt, SolveError> {
    check(ctx, profile)?;
    let mut user = format!("{}\n\n{EVIDENCE_BEGIN}\n", scaffold(profile));
    for (rank, ev) in evidence.iter().enumerate() {
        let _ = writeln!(user, "--- example {} [{}] ---", rank + 1, ev.label);
        user.push_str(&ev.excerpt);
        if !ev.excerpt.ends_with('\n') {
            user.push('\n');
        }
    }
    let _ = writeln!(user, "{EVIDENCE_END}\n");
    user.push_str(&payload(ctx));
    Ok(SolverPrompt {
        task_id: ctx.task_id.clone(),
        system_text: system_text(profile).to_string(),
        user_text: user,
        profile,
        skill_attached: false,
        evidence_attached: !evidence.is_empty(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub output: String,
    pub decoded_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub task_id: String,
    pub samples: Vec<Sample>,
    /// Actions taken in the first sample; agentic profiles only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_count: Option<u32>,
    /// One verdict per sample, filled in by a verifier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdicts: Option<Vec<bool>>,
}

impl SolveOutcome {
    /// Verdict of the first sample.
    pub fn passed(&self) -> Option<bool> {
        self.verdicts.as_ref().and_then(|v| v.first().copied())
    }
}

/// Number of `Action:` lines in a ReAct-style transcript.
pub fn count_actions(output: &str) -> u32 {
    output
        .lines()
        .filter(|l| {
            let t = l.trim_start();
            t.len() >= 7 && t[..7].eq_ignore_ascii_case("action:")
        })
        .count() as u32
}

/// Draw `samples` independent completions. Each sample is its own provider
/// call so that per-sample usage lands in the ledger.
pub fn run_solver(
    provider: &dyn GenerationProvider,
    prompt: &SolverPrompt,
    samples: usize,
    temperature: f64,
    max_tokens: u32,
    ledger: &CostLedger,
) -> Result<SolveOutcome, SolveError> {
    if samples == 0 {
        return Err(SolveError::InvalidRequest("samples must be at least 1"));
    }
    if temperature.is_nan() || temperature < 0.0 {
        return Err(SolveError::InvalidRequest("temperature must be non-negative"));
    }
    let request = GenerationRequest {
        system: &prompt.system_text,
        user: &prompt.user_text,
        temperature,
        max_tokens,
    };
    let mut drawn = Vec::with_capacity(samples);
    for sample_index in 0..samples {
        let g = provider
            .generate(&request)
            .map_err(|source| SolveError::ProviderFailure { sample_index, source })?;
        ledger.record_call(Stage::Solve, &prompt.task_id, g.decoded_tokens, g.input_tokens);
        ledger.record_retries(&prompt.task_id, u64::from(g.retries));
        drawn.push(Sample { output: g.text, decoded_tokens: g.decoded_tokens });
    }
    let step_count = prompt.profile.is_agentic().then(|| count_actions(&drawn[0].output));
    Ok(SolveOutcome { task_id: prompt.task_id.clone(), samples: drawn, step_count, verdicts: None })
}

/// Externally executed agentic episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub task_id: String,
    pub steps: Vec<Step>,
    pub success: bool,
}

impl Transcript {
    pub fn into_outcome(self) -> SolveOutcome {
        let step_count = self.steps.iter().filter(|s| s.role == Role::Agent).count() as u32;
        let output = self
            .steps
            .iter()
            .rev()
            .find(|s| s.role == Role::Agent)
            .map(|s| s.content.clone())
            .unwrap_or_default();
        SolveOutcome {
            task_id: self.task_id,
            samples: vec![Sample { output, decoded_tokens: 0 }],
            step_count: Some(step_count),
            verdicts: Some(vec![self.success]),
        }
    }
}

pub fn read_transcripts<R: BufRead>(source: R) -> std::io::Result<Vec<Transcript>> {
    let mut out = Vec::new();
    for line in source.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::Label;
    use crate::provider::{CannedGenerator, FailingProvider};
    use crate::synthesis::parse_skill_document;

    fn bigcode() -> TaskContext {
        TaskContext::new("b7", Benchmark::BigCode, "Return the sorted unique words of a text.")
            .with("code_prompt", "import re\ndef task_func(text: str) -> list:")
            .with("libraries", "['re']")
    }

    fn skill() -> SkillDocument {
        parse_skill_document(
            "# SKILL.md\n## When to use\n- text tasks\n## Possible Failure Modes\n- returning a set\n## Possible procedures\n- return a list\n",
        )
        .unwrap()
    }

    #[test]
    fn zero_shot_prompt_has_no_skill() {
        let p = assemble_solver_prompt(&bigcode(), None, Profile::BigCode).unwrap();
        assert!(!p.skill_attached);
        assert!(!p.user_text.contains(SKILL_BEGIN));
        assert!(p.user_text.contains("def task_func"));
    }

    #[test]
    fn bigcode_prompt_carries_contract_and_skill_once() {
        let s = skill();
        let p = assemble_solver_prompt(&bigcode(), Some(&s), Profile::BigCode).unwrap();
        assert!(p.skill_attached);
        assert_eq!(p.user_text.matches(s.raw.as_str()).count(), 1);
        assert!(p.user_text.contains("code_prompt: import re"));
        assert!(p.user_text.contains("libraries: ['re']"));
        assert!(!p.user_text.to_lowercase().contains("tests"));
        assert!(p.user_text.find(SKILL_BEGIN).unwrap() < p.user_text.find(TASK_BEGIN).unwrap());
        assert_eq!(p, assemble_solver_prompt(&bigcode(), Some(&s), Profile::BigCode).unwrap());
    }

    #[test]
    fn spreadsheet_guard_appended_with_skill() {
        let ctx = TaskContext::new("s", Benchmark::Spreadsheet, "sum")
            .with("instruction_type", "cell-level")
            .with("output_position", "D2")
            .with("spreadsheet_preview", "A1=region")
            .with("answer_value", "HIDDEN-441");
        let p = assemble_solver_prompt(&ctx, Some(&skill()), Profile::Spreadsheet).unwrap();
        assert!(p.user_text.trim_end().ends_with(SPREADSHEET_GUARD));
        assert!(p.user_text.contains("spreadsheet_preview: A1=region"));
        assert!(!p.user_text.contains("HIDDEN-441"));
        let bare = assemble_solver_prompt(&ctx, None, Profile::Spreadsheet).unwrap();
        assert!(!bare.user_text.contains(SPREADSHEET_GUARD));
    }

    #[test]
    fn profile_mismatch() {
        assert!(matches!(
            assemble_solver_prompt(&bigcode(), None, Profile::Alfworld),
            Err(SolveError::ProfileMismatch { .. })
        ));
    }

    #[test]
    fn raw_evidence_prompt_embeds_excerpts() {
        let ev = CompactedEvidence {
            source_id: "x".into(),
            label: Label::Failure,
            excerpt: "task: old\n[agent] final answer: 99\n".into(),
            truncated: false,
            original_step_count: 1,
        };
        let p = assemble_raw_evidence_prompt(&bigcode(), &[ev], Profile::BigCode).unwrap();
        assert!(p.evidence_attached && !p.skill_attached);
        assert!(p.user_text.contains("[agent] final answer: 99"));
    }

    #[test]
    fn single_sample_at_temperature_zero() {
        let p = assemble_solver_prompt(&bigcode(), None, Profile::BigCode).unwrap();
        let g = CannedGenerator::new("def task_func(text): return []");
        let ledger = CostLedger::new();
        let out = run_solver(&g, &p, 1, 0.0, 512, &ledger).unwrap();
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.step_count, None);
        assert_eq!(g.requests()[0].2, 0.0);
        assert_eq!(ledger.total_decoded(), out.samples[0].decoded_tokens);
    }

    #[test]
    fn three_samples_at_temperature_point_seven() {
        let p = assemble_solver_prompt(&bigcode(), Some(&skill()), Profile::BigCode).unwrap();
        let g = CannedGenerator::new("def task_func(text): return sorted(set(text.split()))");
        let ledger = CostLedger::new();
        let out = run_solver(&g, &p, 3, 0.7, 512, &ledger).unwrap();
        assert_eq!(out.samples.len(), 3);
        assert!(out.samples.iter().all(|s| s == &out.samples[0]));
        assert!(g.requests().iter().all(|r| r.2 == 0.7));
        assert_eq!(ledger.by_stage()[&Stage::Solve].calls, 3);
    }

    #[test]
    fn agentic_profile_counts_actions() {
        let ctx = TaskContext::new("sy", Benchmark::Synthetic, "t").with("family", "double").with("input", "1000");
        let p = assemble_solver_prompt(&ctx, None, Profile::Synthetic).unwrap();
        let g = CannedGenerator::new("Thought: go\nAction: read\naction: submit 2000\n");
        let out = run_solver(&g, &p, 1, 0.0, 64, &CostLedger::new()).unwrap();
        assert_eq!(out.step_count, Some(2));
    }

    #[test]
    fn solver_errors() {
        let p = assemble_solver_prompt(&bigcode(), None, Profile::BigCode).unwrap();
        let fail = FailingProvider(ProviderError::Unavailable("x".into()));
        assert!(matches!(
            run_solver(&fail, &p, 2, 0.0, 10, &CostLedger::new()),
            Err(SolveError::ProviderFailure { sample_index: 0, .. })
        ));
        let g = CannedGenerator::new("x");
        assert!(run_solver(&g, &p, 0, 0.0, 10, &CostLedger::new()).is_err());
        assert!(run_solver(&g, &p, 1, -0.1, 10, &CostLedger::new()).is_err());
    }

    #[test]
    fn export_format() {
        let p = assemble_solver_prompt(&bigcode(), None, Profile::BigCode).unwrap();
        let e = p.export();
        assert!(e.starts_with("=== SYSTEM ===\nYou are a careful Python programmer."));
        assert!(e.contains("\n=== USER ===\nImplement the function"));
    }

    #[test]
    fn transcripts_become_outcomes() {
        let src = r#"{"task_id":"a1","steps":[{"role":"agent","content":"go to desk 1"},{"role":"environment","content":"You see a mug."},{"role":"agent","content":"take mug 1"}],"success":true}"#;
        let t = read_transcripts(src.as_bytes()).unwrap();
        let o = t[0].clone().into_outcome();
        assert_eq!(o.step_count, Some(2));
        assert_eq!(o.passed(), Some(true));
        assert_eq!(o.samples[0].output, "take mug 1");
    }
}
