//! Retrieval text construction from stable task metadata.
//!
//! Each benchmark has a fixed field order; the text is one `key: value` line
//! per field. Keys on the benchmark's leak-list (tests, reference answers,
//! hidden grading data) are never read.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::pool::{Benchmark, TaskContext};
use crate::provider::{GenerationProvider, GenerationRequest, ProviderError, SUMMARY_PROMPT_MARKER};

/// Metadata keys that must never reach a retrieval text.
pub fn leak_list(benchmark: Benchmark) -> &'static [&'static str] {
    match benchmark {
        Benchmark::BigCode => &[
            "tests",
            "canonical_solution",
            "task_id_alias",
            "entry_point_internal",
            "benchmark_meta",
        ],
        Benchmark::Spreadsheet => &["answer_value", "answer_file"],
        Benchmark::Alfworld => &["expert_plan"],
        Benchmark::Synthetic => &["oracle_answer"],
    }
}

pub fn is_leak_key(benchmark: Benchmark, key: &str) -> bool {
    leak_list(benchmark).contains(&key)
}

/// Pseudo-key for the task description.
pub const INSTRUCTION_FIELD: &str = "instruction";

/// Ordered retrieval fields per benchmark. `instruction` is the description.
pub fn embed_fields(benchmark: Benchmark) -> &'static [&'static str] {
    match benchmark {
        Benchmark::Spreadsheet => &[INSTRUCTION_FIELD, "instruction_type", "output_position"],
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
        Benchmark::BigCode => &[INSTRUCTION_FIELD, "code_prompt", "libraries"],
        Benchmark::Synthetic => &[INSTRUCTION_FIELD, "family"],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingText {
    pub task_id: String,
    pub text: String,
    pub fields_used: Vec<String>,
}

/// Structured summary of a spreadsheet instruction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSummary {
    pub action: String,
    pub selection: String,
    pub calculation: String,
    pub output: String,
    pub constraints: String,
    pub validation: String,
}

pub const SUMMARY_FIELDS: [&str; 6] =
    ["action", "selection", "calculation", "output", "constraints", "validation"];

impl InstructionSummary {
    pub fn fields(&self) -> [(&'static str, &str); 6] {
        [
            ("action", &self.action),
            ("selection", &self.selection),
            ("calculation", &self.calculation),
            ("output", &self.output),
            ("constraints", &self.constraints),
            ("validation", &self.validation),
        ]
    }

    fn field_mut(&mut self, name: &str) -> Option<&mut String> {
        match name {
            "action" => Some(&mut self.action),
            "selection" => Some(&mut self.selection),
            "calculation" => Some(&mut self.calculation),
            "output" => Some(&mut self.output),
            "constraints" => Some(&mut self.constraints),
            "validation" => Some(&mut self.validation),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.trim().is_empty())
    }
}

#[derive(Debug, Error)]
pub enum EmbedTextError {
    #[error("missing metadata key `{0}`")]
    MissingMetadata(String),
    #[error("leak-listed key `{0}` present in a retrieval context")]
    LeakViolation(String),
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error(transparent)]
    ProviderFailure(#[from] ProviderError),
    #[error("summary response contains none of the expected fields")]
    UnparsableSummary,
}

/// Build the retrieval text for `ctx`. With a summary attached (spreadsheet
/// only), the six summary lines replace the raw instruction line.
pub fn build_embed_text(
    ctx: &TaskContext,
    summary: Option<&InstructionSummary>,
) -> Result<EmbeddingText, EmbedTextError> {
    if ctx.benchmark == Benchmark::BigCode {
        if let Some(key) = leak_list(ctx.benchmark).iter().find(|k| ctx.metadata.contains_key(**k)) {
            return Err(EmbedTextError::LeakViolation((*key).to_string()));
        }
    }
    let summary = summary.filter(|_| ctx.benchmark == Benchmark::Spreadsheet);

    let mut lines = Vec::new();
    let mut fields_used = Vec::new();
    for &field in embed_fields(ctx.benchmark) {
        if is_leak_key(ctx.benchmark, field) {
            return Err(EmbedTextError::LeakViolation(field.to_string()));
        }
        if field == INSTRUCTION_FIELD {
            if let Some(summary) = summary {
                for (name, value) in summary.fields() {
                    lines.push(format!("{name}: {}", one_line(value)));
                    fields_used.push(format!("summary.{name}"));
                }
            } else {
                lines.push(format!("{INSTRUCTION_FIELD}: {}", one_line(&ctx.description)));
                fields_used.push(INSTRUCTION_FIELD.to_string());
            }
            continue;
        }
        let value = ctx
            .get(field)
            .ok_or_else(|| EmbedTextError::MissingMetadata(field.to_string()))?;
        lines.push(format!("{field}: {}", one_line(value)));
        fields_used.push(field.to_string());
    }
    Ok(EmbeddingText { task_id: ctx.task_id.clone(), text: lines.join("\n"), fields_used })
}

fn one_line(value: &str) -> String {
    value.split_whitespace().collect::<Vec<_>>().join(" ")
}

const SUMMARY_SYSTEM: &str = "You summarize spreadsheet task instructions into fixed dimensions for similarity search. \
Do not solve the task and do not include cell values or answers.";

fn summary_user(instruction: &str) -> String {
    format!(
        "Summarize the instruction below. Reply with exactly six lines, each `field: text`, \
using the fields action, selection, calculation, output, constraints, validation. \
Leave a field empty if the instruction says nothing about it.\n\ninstruction: {}\n",
        one_line(instruction)
    )
}

fn summary_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:[-*]\s*)?\**(action|selection|calculation|output|constraints|validation)\**\s*:\s*(.*?)\s*$")
            .unwrap()
    })
}

/// Parse a `field: text` response. Fields absent from the response stay
/// empty; a response without any field marker is rejected.
pub fn parse_summary(response: &str) -> Result<InstructionSummary, EmbedTextError> {
    let mut summary = InstructionSummary::default();
    let mut found = false;
    for line in response.lines() {
        if let Some(caps) = summary_line_re().captures(line) {
            let name = caps[1].to_ascii_lowercase();
            if let Some(slot) = summary.field_mut(&name) {
                if slot.is_empty() {
                    *slot = caps[2].to_string();
                }
                found = true;
            }
        }
    }
    if !found || summary.is_empty() {
        return Err(EmbedTextError::UnparsableSummary);
    }
    Ok(summary)
}

/// Summary plus the provider usage it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryOutcome {
    pub summary: InstructionSummary,
    pub decoded_tokens: u64,
    pub input_tokens: u64,
}

pub fn summarize_instruction(
    instruction: &str,
    provider: &dyn GenerationProvider,
) -> Result<SummaryOutcome, EmbedTextError> {
    if instruction.trim().is_empty() {
        return Err(EmbedTextError::EmptyInstruction);
    }
    debug_assert!(SUMMARY_SYSTEM.starts_with(SUMMARY_PROMPT_MARKER));
    let user = summary_user(instruction);
    let generation = provider.generate(&GenerationRequest {
        system: SUMMARY_SYSTEM,
        user: &user,
        temperature: 0.0,
        max_tokens: 256,
    })?;
    Ok(SummaryOutcome {
        summary: parse_summary(&generation.text)?,
        decoded_tokens: generation.decoded_tokens,
        input_tokens: generation.input_tokens,
    })
}

#[derive(Serialize, Deserialize)]
struct CachedSummary {
    task_id: String,
    #[serde(flatten)]
    summary: InstructionSummary,
}

/// Sidecar cache of summaries, one JSON object per line keyed by `task_id`.
pub fn read_summary_cache<R: BufRead>(source: R) -> std::io::Result<HashMap<String, InstructionSummary>> {
    let mut out = HashMap::new();
    for line in source.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CachedSummary = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.insert(entry.task_id, entry.summary);
    }
    Ok(out)
}

pub fn write_summary_cache<W: Write>(
    mut out: W,
    entries: &[(String, InstructionSummary)],
) -> std::io::Result<()> {
    for (task_id, summary) in entries {
        let line = serde_json::to_string(&CachedSummary { task_id: task_id.clone(), summary: summary.clone() })?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::CannedGenerator;
    use proptest::prelude::*;

    fn sheet() -> TaskContext {
        TaskContext::new("s1", Benchmark::Spreadsheet, "sum column B")
            .with("instruction_type", "cell-level")
            .with("output_position", "D2")
    }

    fn alfworld() -> TaskContext {
        let mut ctx = TaskContext::new("a1", Benchmark::Alfworld, "put a clean mug in the coffeemachine");
        for key in Benchmark::Alfworld.required_keys().iter().rev() {
            ctx.metadata.insert(key.to_string(), format!("v-{key}"));
        }
        ctx
    }

    #[test]
    fn spreadsheet_text_has_three_ordered_lines() {
        let t = build_embed_text(&sheet(), None).unwrap();
        assert_eq!(
            t.text,
            "instruction: sum column B\ninstruction_type: cell-level\noutput_position: D2"
        );
        assert_eq!(t.fields_used, ["instruction", "instruction_type", "output_position"]);
    }

    #[test]
    fn alfworld_uses_eight_fields_in_fixed_order() {
        let t = build_embed_text(&alfworld(), None).unwrap();
        assert_eq!(t.fields_used.len(), 8);
        assert_eq!(t.fields_used, Benchmark::Alfworld.required_keys());
        assert!(t.text.starts_with("task_family: v-task_family\ngoal_object:"));
    }

    #[test]
    fn bigcode_with_tests_is_a_leak_violation() {
        let ctx = TaskContext::new("b1", Benchmark::BigCode, "write f")
            .with("code_prompt", "def f(x):")
            .with("libraries", "['os']")
            .with("tests", "assert f(1) == 2");
        match build_embed_text(&ctx, None) {
            Err(EmbedTextError::LeakViolation(k)) => assert_eq!(k, "tests"),
            other => panic!("expected LeakViolation, got {other:?}"),
        }
    }

    #[test]
    fn missing_metadata_is_reported() {
        let ctx = TaskContext::new("s", Benchmark::Spreadsheet, "x").with("instruction_type", "sheet-level");
        assert!(matches!(
            build_embed_text(&ctx, None),
            Err(EmbedTextError::MissingMetadata(k)) if k == "output_position"
        ));
    }

    #[test]
    fn summary_replaces_instruction_line() {
        let summary = InstructionSummary { action: "sum".into(), output: "D2".into(), ..Default::default() };
        let t = build_embed_text(&sheet(), Some(&summary)).unwrap();
        assert!(!t.text.contains("sum column B"));
        assert!(t.text.starts_with("action: sum\nselection: \ncalculation: \noutput: D2\n"));
        assert_eq!(t.fields_used.len(), 8);
        assert!(t.fields_used[0].starts_with("summary."));
    }

    #[test]
    fn summary_ignored_outside_spreadsheet() {
        let summary = InstructionSummary { action: "x".into(), ..Default::default() };
        assert_eq!(
            build_embed_text(&alfworld(), Some(&summary)).unwrap(),
            build_embed_text(&alfworld(), None).unwrap()
        );
    }

    #[test]
    fn leak_list_table() {
        assert!(leak_list(Benchmark::BigCode).contains(&"tests"));
        assert!(leak_list(Benchmark::BigCode).contains(&"canonical_solution"));
        assert_eq!(leak_list(Benchmark::Synthetic), ["oracle_answer"]);
        assert_eq!(leak_list(Benchmark::Spreadsheet), ["answer_value", "answer_file"]);
        assert_eq!(leak_list(Benchmark::Alfworld), ["expert_plan"]);
    }

    #[test]
    fn summarize_with_canned_response() {
        let p = CannedGenerator::new(
            "action: sum\nselection: column B\ncalculation: total\noutput: D2\nconstraints: none\nvalidation: compare totals",
        );
        let s = summarize_instruction("sum column B into D2", &p).unwrap().summary;
        assert!(s.fields().iter().all(|(_, v)| !v.is_empty()));
        assert_eq!(s.selection, "column B");
        assert_eq!(p.requests()[0].2, 0.0);
    }

    #[test]
    fn summarize_rejects_prose() {
        let p = CannedGenerator::new("This instruction asks you to add things up.");
        assert!(matches!(summarize_instruction("sum", &p), Err(EmbedTextError::UnparsableSummary)));
    }

    #[test]
    fn summarize_rejects_empty_instruction() {
        let p = CannedGenerator::new("action: x");
        assert!(matches!(summarize_instruction("  ", &p), Err(EmbedTextError::EmptyInstruction)));
        assert!(p.requests().is_empty());
    }

    #[test]
    fn partial_summary_leaves_missing_fields_empty() {
        let s = parse_summary("- **Action**: filter rows\nOutput: F1").unwrap();
        assert_eq!(s.action, "filter rows");
        assert_eq!(s.output, "F1");
        assert!(s.validation.is_empty());
    }

    #[test]
    fn summary_cache_round_trip() {
        let entries = vec![("t1".to_string(), InstructionSummary { action: "a".into(), ..Default::default() })];
        let mut buf = Vec::new();
        write_summary_cache(&mut buf, &entries).unwrap();
        let back = read_summary_cache(&buf[..]).unwrap();
        assert_eq!(back["t1"], entries[0].1);
    }

    fn arb_context() -> impl Strategy<Value = (TaskContext, String)> {
        (0..4usize, "[a-z ]{1,30}", "[A-Za-z]{8}[0-9]{4}").prop_map(|(b, desc, sentinel)| {
            let benchmark = Benchmark::ALL[b];
            let mut ctx = TaskContext::new("t", benchmark, desc);
            for key in benchmark.required_keys() {
                ctx.metadata.insert(key.to_string(), format!("value of {key}"));
            }
            if benchmark != Benchmark::BigCode {
                for key in leak_list(benchmark) {
                    ctx.metadata.insert(key.to_string(), sentinel.clone());
                }
            }
            (ctx, sentinel)
        })
    }

    proptest! {
        #[test]
        fn texts_never_use_or_contain_leak_keys((ctx, sentinel) in arb_context()) {
            let t = build_embed_text(&ctx, None).unwrap();
            let leaks = leak_list(ctx.benchmark);
            prop_assert!(t.fields_used.iter().all(|f| !leaks.contains(&f.as_str())));
            prop_assert!(!t.text.contains(&sentinel));
            prop_assert_eq!(&t, &build_embed_text(&ctx, None).unwrap());
        }
    }
}
