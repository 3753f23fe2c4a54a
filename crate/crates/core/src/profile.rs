//! Per-benchmark prompt profiles.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::Benchmark;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown profile `{0}`")]
pub struct ProfileUnknown(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Spreadsheet,
    Alfworld,
    #[serde(rename = "bigcode")]
    BigCode,
    Synthetic,
}

/// Values substituted into the synthesis template's braces.
#[derive(Debug, Clone, Copy)]
pub struct TemplateFields {
    pub task_type: &'static str,
    pub input_or_state_context: &'static str,
    pub output_or_action_contract: &'static str,
    pub constraints: &'static str,
    pub target_visible_fields: &'static str,
    pub retrieved_visible_fields: &'static str,
}

impl Profile {
    pub fn for_benchmark(benchmark: Benchmark) -> Profile {
        match benchmark {
            Benchmark::Spreadsheet => Profile::Spreadsheet,
            Benchmark::Alfworld => Profile::Alfworld,
            Benchmark::BigCode => Profile::BigCode,
            Benchmark::Synthetic => Profile::Synthetic,
        }
    }

    pub fn benchmark(self) -> Benchmark {
        match self {
            Profile::Spreadsheet => Benchmark::Spreadsheet,
            Profile::Alfworld => Benchmark::Alfworld,
            Profile::BigCode => Benchmark::BigCode,
            Profile::Synthetic => Benchmark::Synthetic,
        }
    }

    pub fn id(self) -> &'static str {
        self.benchmark().as_str()
    }

    pub fn from_id(id: &str) -> Result<Profile, ProfileUnknown> {
        id.parse::<Benchmark>()
            .map(Profile::for_benchmark)
            .map_err(|_| ProfileUnknown(id.to_string()))
    }

    pub fn benchmark_name(self) -> &'static str {
        match self {
            Profile::Spreadsheet => "SpreadsheetBench",
            Profile::Alfworld => "ALFWorld",
            Profile::BigCode => "BigCodeBench",
            Profile::Synthetic => "synthetic transcription",
        }
    }

    pub fn domain(self) -> &'static str {
        match self {
            Profile::Spreadsheet => "spreadsheet manipulation",
            Profile::Alfworld => "household interaction",
            Profile::BigCode => "Python code generation",
            Profile::Synthetic => "rule-based transcription",
        }
    }

    /// Agentic profiles report a step count per episode.
    pub fn is_agentic(self) -> bool {
        matches!(self, Profile::Alfworld | Profile::Synthetic)
    }

    pub fn template_fields(self) -> TemplateFields {
        match self {
            Profile::Spreadsheet => TemplateFields {
                task_type: "the instruction type",
                input_or_state_context: "the workbook and sheet context",
                output_or_action_contract: "the answer position",
                constraints: "the instruction's stated constraints",
                target_visible_fields: "the instruction, instruction type, answer position and any spreadsheet previews",
                retrieved_visible_fields: "the instruction, instruction type and answer position",
            },
            Profile::Alfworld => TemplateFields {
                task_type: "the task family",
                input_or_state_context: "the room type and initial receptacles",
                output_or_action_contract: "the admissible action grammar and goal sentence",
                constraints: "the required subgoals",
                target_visible_fields: "the goal sentence, task family, goal object, object category, target receptacle or tool, room type, initial receptacles and required subgoals",
                retrieved_visible_fields: "the same task fields",
            },
            Profile::BigCode => TemplateFields {
                task_type: "the function's purpose",
                input_or_state_context: "the function signature and docstring",
                output_or_action_contract: "the documented return contract",
                constraints: "the allowed library list",
                target_visible_fields: "the natural-language instruction, code prompt and library list",
                retrieved_visible_fields: "the instruction, code prompt and library list",
            },
            Profile::Synthetic => TemplateFields {
                task_type: "the transformation family",
                input_or_state_context: "the visible input value",
                output_or_action_contract: "the submit action format",
                constraints: "the exact-match verifier",
                target_visible_fields: "the instruction, transformation family and input value",
                retrieved_visible_fields: "the instruction, transformation family and input value",
            },
        }
    }

    /// Benchmark-specific content the skill sections should cover.
    pub fn skill_focus(self) -> &'static str {
        match self {
            Profile::Spreadsheet => "Within these sections, describe when the skill applies, likely failure modes, and candidate procedures. Give procedural guidance only, never cell values or final answers.",
            Profile::Alfworld => "Within these sections, cover the action policy, search strategy, failure recovery, and completion checks.",
            Profile::BigCode => "Within these sections, state the visible target contract, conservative implementation guidance, ambiguities, common failure modes, and a static checklist. Do not tell the solver to run or inspect tests.",
            Profile::Synthetic => "Within these sections, name the transformation family to apply and the checks to run before submitting.",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for Profile {
    type Err = ProfileUnknown;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Profile::from_id(s)
    }
}
