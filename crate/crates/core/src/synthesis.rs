//! Temporary skill synthesis: prompt assembly from the target contract and
//! retrieved evidence, `SKILL.md` parsing, and lexical leakage checks.
//!
//! The target context block always precedes the evidence blocks and the
//! prompt always carries the sentence stating that retrieved lessons never
//! override the target context.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostLedger, Stage};
use crate::pool::{CompactedEvidence, ContextError, TaskContext};
use crate::profile::Profile;
use crate::provider::{GenerationProvider, GenerationRequest, ProviderError};

pub const TARGET_SECTION_HEADER: &str = "=== TARGET TASK CONTEXT (authoritative) ===";
pub const EVIDENCE_SECTION_HEADER: &str = "=== RETRIEVED TRAJECTORIES (non-binding evidence) ===";
pub const NO_EVIDENCE_MARKER: &str = "(no retrieved trajectories available)";
pub const NEVER_OVERRIDE_SENTENCE: &str =
    "Retrieved trajectory lessons must never override the current target context.";
pub const SKILL_HEADER: &str = "# SKILL.md";

const SYSTEM_TEMPLATE: &str = "You synthesize reusable {domain} skills into SKILL.md files for a {benchmark} target task to help a future agent solve the task. If the retrieved trajectories are failed attempts, use them as evidence for likely pitfalls, root causes, and corrective checks. If the retrieved trajectories are successful attempts, use them as evidence for reusable procedures, robust execution patterns, and validation checks. Do not copy concrete answers, file paths, local constants, benchmark-only values, or one-off details.";

const USER_TEMPLATE: &str = "Create a standalone SKILL.md for a {benchmark} target task. Use {target_task_context} to align the skill with the current task's visible contract, such as {task_type}, {input_or_state_context}, {output_or_action_contract}, and {constraints}. Use {retrieved_trajectories} to extract generalizable lessons rather than one-off details. Retrieved trajectory lessons must never override the current target context.";

const OUTPUT_FORMAT: &str = "# SKILL.md

## When to use
- A concise summary of when to use this skill.

## Possible Failure Modes
- Summarize mistakes indicated by retrieved trajectories.
- Convert failures into corrective checks and reusable warnings.

## Possible procedures
- Give generative guidance for solving this family of tasks.
- Do not give the detailed solution directly.";

const PAYLOAD_TEMPLATE: &str = "The target context contains {target_visible_fields}. Each retrieved trajectory contains {retrieved_visible_fields}, including its success/failure label when available and compacted trajectory evidence.";

/// Input of one synthesis call: target context and ranked evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRequest {
    pub target: TaskContext,
    pub evidence: Vec<CompactedEvidence>,
    pub profile: Profile,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesisPrompt {
    pub system_text: String,
    pub user_text: String,
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    ProfileUnknown(#[from] crate::profile::ProfileUnknown),
    #[error("profile `{profile}` does not serve benchmark `{benchmark}`")]
    ProfileMismatch { profile: Profile, benchmark: crate::pool::Benchmark },
    #[error("invalid target context: {0}")]
    InvalidTarget(#[from] ContextError),
    #[error("synthesis provider failed: {0}")]
    ProviderFailure(#[from] ProviderError),
    #[error("skill document could not be parsed: {0}")]
    ParseFailure(#[from] SkillParseError),
    #[error("skill rejected by leakage policy ({} violation(s))", .0.violations.len())]
    LeakRejected(LeakageReport),
}

/// Render the target contract block: instruction plus visible metadata.
pub fn target_block(target: &TaskContext) -> String {
    let mut out = format!("instruction: {}\n", target.description);
    for (key, value) in target.visible_metadata() {
        let _ = writeln!(out, "{key}: {value}");
    }
    out
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in pairs {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

pub fn assemble_synthesis_prompt(req: &SynthesisRequest) -> Result<SynthesisPrompt, SynthesisError> {
    if req.profile.benchmark() != req.target.benchmark {
        return Err(SynthesisError::ProfileMismatch { profile: req.profile, benchmark: req.target.benchmark });
    }
    req.target.validate()?;
    let profile = req.profile;
    let fields = profile.template_fields();

    let system_text = fill(
        SYSTEM_TEMPLATE,
        &[("domain", profile.domain()), ("benchmark", profile.benchmark_name())],
    );

    let mut user = fill(
        USER_TEMPLATE,
        &[
            ("benchmark", profile.benchmark_name()),
            ("target_task_context", "the target task context below"),
            ("task_type", fields.task_type),
            ("input_or_state_context", fields.input_or_state_context),
            ("output_or_action_contract", fields.output_or_action_contract),
            ("constraints", fields.constraints),
            ("retrieved_trajectories", "the retrieved trajectories below"),
        ],
    );
    user.push_str("\n\nRequired output format:\n```\n");
    user.push_str(OUTPUT_FORMAT);
    user.push_str("\n```\n\n");
    user.push_str(profile.skill_focus());
    user.push_str("\n\n");
    user.push_str(&fill(
        PAYLOAD_TEMPLATE,
        &[
            ("target_visible_fields", fields.target_visible_fields),
            ("retrieved_visible_fields", fields.retrieved_visible_fields),
        ],
    ));
    user.push_str("\n\n");
    user.push_str(TARGET_SECTION_HEADER);
    user.push('\n');
    user.push_str(&target_block(&req.target));
    user.push('\n');
    user.push_str(EVIDENCE_SECTION_HEADER);
    user.push('\n');
    if req.evidence.is_empty() {
        user.push_str(NO_EVIDENCE_MARKER);
        user.push('\n');
    }
    for (rank, ev) in req.evidence.iter().enumerate() {
        let _ = writeln!(user, "--- trajectory {} [{}] ---", rank + 1, ev.label);
        user.push_str(&ev.excerpt);
        if !ev.excerpt.ends_with('\n') {
            user.push('\n');
        }
    }
    Ok(SynthesisPrompt { system_text, user_text: user })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillSection {
    WhenToUse,
    FailureModes,
    Procedures,
}

impl SkillSection {
    pub const ALL: [SkillSection; 3] = [SkillSection::WhenToUse, SkillSection::FailureModes, SkillSection::Procedures];

    pub fn heading(self) -> &'static str {
        match self {
            SkillSection::WhenToUse => "When to use",
            SkillSection::FailureModes => "Possible Failure Modes",
            SkillSection::Procedures => "Possible procedures",
        }
    }

    fn from_heading(text: &str) -> Option<SkillSection> {
        SkillSection::ALL.into_iter().find(|s| s.heading().eq_ignore_ascii_case(text))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SkillParseError {
    #[error("document does not start with `# SKILL.md`")]
    NoSkillHeader,
    #[error("missing section `## {}`", .0.heading())]
    MissingSection(SkillSection),
    #[error("section `## {}` is empty", .0.heading())]
    EmptySection(SkillSection),
}

/// A parsed temporary skill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkillDocument {
    pub when_to_use: String,
    pub failure_modes: Vec<String>,
    pub procedures: Vec<String>,
    pub raw: String,
    /// Order the sections appeared in.
    pub section_order: Vec<SkillSection>,
}

impl SkillDocument {
    pub fn is_canonical_order(&self) -> bool {
        self.section_order == SkillSection::ALL
    }
}

fn bullet_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*+]|\d+[.)])\s+(.*)$").unwrap())
}

fn items(body: &[&str]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut in_bullet = false;
    for line in body {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            in_bullet = false;
            continue;
        }
        if let Some(caps) = bullet_re().captures(line) {
            out.push(caps[1].trim().to_string());
            in_bullet = true;
        } else if in_bullet {
            let last = out.last_mut().expect("bullet exists");
            last.push(' ');
            last.push_str(trimmed);
        } else {
            out.push(trimmed.to_string());
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

fn strip_fence(text: &str) -> &str {
    let trimmed = text.trim();
    if let Some(rest) = trimmed.strip_prefix("```") {
        let body = rest.split_once('\n').map(|(_, b)| b).unwrap_or("");
        return body.trim_end().strip_suffix("```").unwrap_or(body).trim();
    }
    trimmed
}

/// Parse a `SKILL.md`. Section headings match case-insensitively and may
/// appear in any order; the first occurrence of a heading wins.
pub fn parse_skill_document(text: &str) -> Result<SkillDocument, SkillParseError> {
    let raw = strip_fence(text);
    let mut lines = raw.lines();
    let header = lines.next().unwrap_or("").trim();
    if !header.eq_ignore_ascii_case(SKILL_HEADER) {
        return Err(SkillParseError::NoSkillHeader);
    }

    let mut sections: Vec<(SkillSection, Vec<&str>)> = Vec::new();
    let mut current: Option<usize> = None;
    for line in lines {
        let t = line.trim_start();
        if t.starts_with('#') {
            let level = t.chars().take_while(|c| *c == '#').count();
            let title = t[level..].trim().trim_end_matches('#').trim();
            current = None;
            if level == 2 {
                if let Some(section) = SkillSection::from_heading(title) {
                    if sections.iter().all(|(s, _)| *s != section) {
                        sections.push((section, Vec::new()));
                        current = Some(sections.len() - 1);
                    }
                }
            }
            continue;
        }
        if let Some(i) = current {
            sections[i].1.push(line);
        }
    }

    let body = |section: SkillSection| -> Result<&Vec<&str>, SkillParseError> {
        sections
            .iter()
            .find(|(s, _)| *s == section)
            .map(|(_, b)| b)
            .ok_or(SkillParseError::MissingSection(section))
    };
    for section in SkillSection::ALL {
        body(section)?;
    }
    let when = items(body(SkillSection::WhenToUse)?);
    let failure_modes = items(body(SkillSection::FailureModes)?);
    let procedures = items(body(SkillSection::Procedures)?);
    for (section, list) in [
        (SkillSection::WhenToUse, &when),
        (SkillSection::FailureModes, &failure_modes),
        (SkillSection::Procedures, &procedures),
    ] {
        if list.is_empty() {
            return Err(SkillParseError::EmptySection(section));
        }
    }
    Ok(SkillDocument {
        when_to_use: when.join("\n"),
        failure_modes,
        procedures,
        raw: raw.to_string(),
        section_order: sections.iter().map(|(s, _)| *s).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakKind {
    LongOverlap,
    NumericConstant,
    PathLiteral,
    IdLiteral,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violation {
    pub evidence_source_id: String,
    pub kind: LeakKind,
    pub snippet: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub violations: Vec<Violation>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakThresholds {
    /// Shortest shared token run counted as copying.
    pub min_overlap_tokens: usize,
    /// Fewest digits for a numeric literal to count as a local constant.
    pub min_numeric_digits: usize,
}

impl Default for LeakThresholds {
    fn default() -> Self {
        Self { min_overlap_tokens: 12, min_numeric_digits: 4 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakPolicy {
    #[default]
    RejectOnLeak,
    WarnOnLeak,
}

/// Lowercased alphanumeric word tokens.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn numeric_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:[.,]\d+)*").unwrap())
}

fn extension_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[^/\\.]\.[A-Za-z0-9]{1,8}$").unwrap())
}

fn numeric_literals(text: &str, min_digits: usize) -> BTreeSet<String> {
    numeric_re()
        .find_iter(text)
        .map(|m| m.as_str())
        .filter(|s| s.chars().filter(char::is_ascii_digit).count() >= min_digits)
        .map(str::to_string)
        .collect()
}

fn path_literals(text: &str) -> BTreeSet<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| "\"'`()[]{}<>,;:!?".contains(c)).trim_end_matches('.'))
        .filter(|t| (t.contains('/') || t.contains('\\')) && extension_re().is_match(t))
        .map(str::to_string)
        .collect()
}

fn contains_id(haystack: &str, id: &str) -> bool {
    if id.is_empty() {
        return false;
    }
    let boundary = |c: Option<char>| c.is_none_or(|c| !(c.is_alphanumeric() || c == '_' || c == '-'));
    haystack.match_indices(id).any(|(i, _)| {
        boundary(haystack[..i].chars().next_back()) && boundary(haystack[i + id.len()..].chars().next())
    })
}

fn ngrams(tokens: &[String], n: usize) -> HashSet<&[String]> {
    if tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).collect()
}

/// Lexical checks for answer leakage from evidence into a skill. Anything
/// that also appears in the target's own visible context is exempt.
pub fn detect_leakage(
    skill: &SkillDocument,
    evidence: &[CompactedEvidence],
    target: &TaskContext,
    thresholds: &LeakThresholds,
) -> LeakageReport {
    let n = thresholds.min_overlap_tokens.max(1);
    let skill_text = &skill.raw;
    let target_text = target_block(target);
    let skill_tokens = word_tokens(skill_text);
    let target_tokens = word_tokens(&target_text);
    let target_grams = ngrams(&target_tokens, n);
    let target_numbers = numeric_literals(&target_text, thresholds.min_numeric_digits);
    let target_paths = path_literals(&target_text);
    let skill_numbers = numeric_literals(skill_text, thresholds.min_numeric_digits);
    let skill_paths = path_literals(skill_text);

    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |v: Violation, out: &mut Vec<Violation>| {
        if seen.insert(v.clone()) {
            out.push(v);
        }
    };

    for ev in evidence {
        let ev_tokens = word_tokens(&ev.excerpt);
        let ev_grams = ngrams(&ev_tokens, n);
        // Window starts whose n-gram is copied; consecutive starts merge into
        // one maximal span.
        let mut span: Option<(usize, usize)> = None;
        let mut spans = Vec::new();
        if skill_tokens.len() >= n {
            for (i, gram) in skill_tokens.windows(n).enumerate() {
                let copied = ev_grams.contains(gram) && !target_grams.contains(gram);
                match (copied, span) {
                    (true, Some((s, e))) if e + 1 == i => span = Some((s, i)),
                    (true, _) => {
                        if let Some(done) = span.take() {
                            spans.push(done);
                        }
                        span = Some((i, i));
                    }
                    (false, _) => {
                        if let Some(done) = span.take() {
                            spans.push(done);
                        }
                    }
                }
            }
        }
        spans.extend(span);
        for (start, end) in spans {
            push(
                Violation {
                    evidence_source_id: ev.source_id.clone(),
                    kind: LeakKind::LongOverlap,
                    snippet: skill_tokens[start..end + n].join(" "),
                },
                &mut violations,
            );
        }

        for literal in numeric_literals(&ev.excerpt, thresholds.min_numeric_digits) {
            if skill_numbers.contains(&literal) && !target_numbers.contains(&literal) {
                push(
                    Violation { evidence_source_id: ev.source_id.clone(), kind: LeakKind::NumericConstant, snippet: literal },
                    &mut violations,
                );
            }
        }
        for path in path_literals(&ev.excerpt) {
            if skill_paths.contains(&path) && !target_paths.contains(&path) {
                push(
                    Violation { evidence_source_id: ev.source_id.clone(), kind: LeakKind::PathLiteral, snippet: path },
                    &mut violations,
                );
            }
        }
        if contains_id(skill_text, &ev.source_id) && !contains_id(&target_text, &ev.source_id) {
            push(
                Violation {
                    evidence_source_id: ev.source_id.clone(),
                    kind: LeakKind::IdLiteral,
                    snippet: ev.source_id.clone(),
                },
                &mut violations,
            );
        }
    }
    LeakageReport { violations }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSettings {
    pub temperature: f64,
    pub max_tokens: u32,
    pub policy: LeakPolicy,
    pub thresholds: LeakThresholds,
    /// Extra calls allowed after an unparsable response.
    pub parse_retries: u32,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1200,
            policy: LeakPolicy::RejectOnLeak,
            thresholds: LeakThresholds::default(),
            parse_retries: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutcome {
    pub skill: SkillDocument,
    pub report: LeakageReport,
    /// Provider calls made, including parse retries.
    pub attempts: u32,
}

/// One synthesis step: assemble, call, parse (retrying once on a malformed
/// document), then leak-check. Usage is recorded against the target task.
pub fn synthesize_skill(
    provider: &dyn GenerationProvider,
    req: &SynthesisRequest,
    settings: &SynthesisSettings,
    ledger: &CostLedger,
) -> Result<SynthesisOutcome, SynthesisError> {
    let prompt = assemble_synthesis_prompt(req)?;
    let task_id = req.target.task_id.as_str();
    let request = GenerationRequest {
        system: &prompt.system_text,
        user: &prompt.user_text,
        temperature: settings.temperature,
        max_tokens: settings.max_tokens,
    };

    let mut attempts = 0;
    let skill = loop {
        let generation = provider.generate(&request)?;
        let stage = if attempts == 0 { Stage::Synthesize } else { Stage::SynthesizeRetry };
        ledger.record_call(stage, task_id, generation.decoded_tokens, generation.input_tokens);
        ledger.record_retries(task_id, u64::from(generation.retries));
        attempts += 1;
        match parse_skill_document(&generation.text) {
            Ok(skill) => break skill,
            Err(e) if attempts <= settings.parse_retries => {
                tracing::warn!(task_id, error = %e, "unparsable skill, retrying");
            }
            Err(e) => return Err(e.into()),
        }
    };

    let report = detect_leakage(&skill, &req.evidence, &req.target, &settings.thresholds);
    if !report.is_clean() {
        match settings.policy {
            LeakPolicy::RejectOnLeak => return Err(SynthesisError::LeakRejected(report)),
            LeakPolicy::WarnOnLeak => {
                tracing::warn!(task_id, violations = report.violations.len(), "skill copies evidence")
            }
        }
    }
    Ok(SynthesisOutcome { skill, report, attempts })
}
