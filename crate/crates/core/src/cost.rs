//! Token and call accounting per pipeline stage, plus closed-form adaptation
//! cost models for comparing one-shot synthesis against epoch-based memory
//! learning and log-round skill consolidation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Embed,
    Summarize,
    Synthesize,
    /// Extra synthesis call after an unparsable skill.
    SynthesizeRetry,
    Solve,
    /// Transport-level retries inside a provider client.
    TransportRetry,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Embed => "embed",
            Stage::Summarize => "summarize",
            Stage::Synthesize => "synthesize",
            Stage::SynthesizeRetry => "synthesize_retry",
            Stage::Solve => "solve",
            Stage::TransportRetry => "transport_retry",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: Stage,
    pub task_id: String,
    pub decoded_tokens: u64,
    #[serde(default)]
    pub input_tokens: u64,
    pub calls: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StageTotals {
    pub decoded_tokens: u64,
    pub input_tokens: u64,
    pub calls: u64,
}

/// Which tokens the headline numbers count. Input tokens vary with caching,
/// so decoded tokens are the default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMetric {
    #[default]
    Decoded,
    Total,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CostError {
    #[error("invalid cost model input: {0}")]
    InvalidInput(&'static str),
}

/// Append-only ledger; safe to append from many workers at once.
#[derive(Debug, Default)]
pub struct CostLedger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<LedgerEntry>) -> Self {
        Self { entries: Mutex::new(entries) }
    }

    /// Append one call's decoded tokens.
    pub fn record(&self, stage: Stage, task_id: &str, decoded_tokens: u64) {
        self.record_call(stage, task_id, decoded_tokens, 0);
    }

    pub fn record_call(&self, stage: Stage, task_id: &str, decoded_tokens: u64, input_tokens: u64) {
        self.push(LedgerEntry { stage, task_id: task_id.to_string(), decoded_tokens, input_tokens, calls: 1 });
    }

    pub fn record_retries(&self, task_id: &str, retries: u64) {
        if retries > 0 {
            self.push(LedgerEntry {
                stage: Stage::TransportRetry,
                task_id: task_id.to_string(),
                decoded_tokens: 0,
                input_tokens: 0,
                calls: retries,
            });
        }
    }

    pub fn push(&self, entry: LedgerEntry) {
        self.entries.lock().expect("ledger lock poisoned").push(entry);
    }

    /// Snapshot in canonical (sorted) order, independent of append order.
    pub fn entries(&self) -> Vec<LedgerEntry> {
        let mut entries = self.entries.lock().expect("ledger lock poisoned").clone();
        entries.sort();
        entries
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("ledger lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_decoded(&self) -> u64 {
        self.entries.lock().expect("ledger lock poisoned").iter().map(|e| e.decoded_tokens).sum()
    }

    pub fn total_input(&self) -> u64 {
        self.entries.lock().expect("ledger lock poisoned").iter().map(|e| e.input_tokens).sum()
    }

    pub fn total(&self, metric: TokenMetric) -> u64 {
        match metric {
            TokenMetric::Decoded => self.total_decoded(),
            TokenMetric::Total => self.total_decoded() + self.total_input(),
        }
    }

    pub fn by_stage(&self) -> BTreeMap<Stage, StageTotals> {
        let mut out: BTreeMap<Stage, StageTotals> = BTreeMap::new();
        for e in self.entries.lock().expect("ledger lock poisoned").iter() {
            let t = out.entry(e.stage).or_default();
            t.decoded_tokens += e.decoded_tokens;
            t.input_tokens += e.input_tokens;
            t.calls += e.calls;
        }
        out
    }

    /// Distinct task ids that reached the synthesis or solve stage.
    pub fn test_task_count(&self) -> usize {
        let entries = self.entries.lock().expect("ledger lock poisoned");
        let ids: std::collections::BTreeSet<&str> = entries
            .iter()
            .filter(|e| matches!(e.stage, Stage::Synthesize | Stage::Solve))
            .map(|e| e.task_id.as_str())
            .collect();
        ids.len()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for entry in self.entries() {
            writeln!(out, "{}", serde_json::to_string(&entry)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(source: R) -> std::io::Result<CostLedger> {
        let mut entries = Vec::new();
        for line in source.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
            );
        }
        Ok(CostLedger::from_entries(entries))
    }

    /// CSV with one row per stage and a final `all` row:
    /// `method,stage,total_decoded_tokens,per_test_task_tokens,calls`.
    pub fn report_csv(&self, method: &str, n_test: usize, metric: TokenMetric) -> Result<String, CostError> {
        let column = match metric {
            TokenMetric::Decoded => "total_decoded_tokens",
            TokenMetric::Total => "total_tokens",
        };
        let mut out = format!("method,stage,{column},per_test_task_tokens,calls\n");
        let mut all = StageTotals::default();
        let tokens = |t: &StageTotals| match metric {
            TokenMetric::Decoded => t.decoded_tokens,
            TokenMetric::Total => t.decoded_tokens + t.input_tokens,
        };
        for (stage, totals) in self.by_stage() {
            let per_task = normalize(tokens(&totals), n_test)?;
            writeln!(out, "{method},{},{},{per_task:.4},{}", stage.as_str(), tokens(&totals), totals.calls).unwrap();
            all.decoded_tokens += totals.decoded_tokens;
            all.input_tokens += totals.input_tokens;
            all.calls += totals.calls;
        }
        let per_task = normalize(tokens(&all), n_test)?;
        writeln!(out, "{method},all,{},{per_task:.4},{}", tokens(&all), all.calls).unwrap();
        Ok(out)
    }
}

fn normalize(tokens: u64, n_test: usize) -> Result<f64, CostError> {
    if n_test == 0 {
        return Err(CostError::InvalidInput("n_test must be at least 1"));
    }
    Ok(tokens as f64 / n_test as f64)
}

/// Decoded tokens per test task.
pub fn per_test_task(ledger: &CostLedger, n_test: usize) -> Result<f64, CostError> {
    normalize(ledger.total_decoded(), n_test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMethod {
    /// One retrieval-and-synthesis step per test task.
    TestTimeSynthesis,
    /// Offline skill consolidation by hierarchical patch rounds.
    Trace2Skill,
    /// Epoch-based memory utility learning.
    MemRl,
}

impl AdaptationMethod {
    pub const ALL: [AdaptationMethod; 3] =
        [AdaptationMethod::TestTimeSynthesis, AdaptationMethod::Trace2Skill, AdaptationMethod::MemRl];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptationMethod::TestTimeSynthesis => "test_time_synthesis",
            AdaptationMethod::Trace2Skill => "trace2skill",
            AdaptationMethod::MemRl => "memrl",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModelInput {
    pub n_train: u64,
    pub n_test: u64,
    pub epochs: u64,
    pub pool_size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AdaptationCost {
    /// Rounds (or epochs) of adaptation work.
    pub rounds: u64,
    /// Model calls, rollout episodes or trajectory visits.
    pub calls: u64,
}

/// `ceil(log2 n)` for `n >= 1`.
pub fn ceil_log2(n: u64) -> u64 {
    assert!(n >= 1);
    if n == 1 {
        0
    } else {
        u64::from(64 - (n - 1).leading_zeros())
    }
}

pub fn adaptation_calls(method: AdaptationMethod, input: &CostModelInput) -> Result<AdaptationCost, CostError> {
    match method {
        AdaptationMethod::TestTimeSynthesis => {
            if input.n_test == 0 {
                return Err(CostError::InvalidInput("n_test must be positive"));
            }
            Ok(AdaptationCost { rounds: 1, calls: input.n_test })
        }
        AdaptationMethod::MemRl => {
            if input.n_train == 0 || input.epochs == 0 {
                return Err(CostError::InvalidInput("n_train and epochs must be positive"));
            }
            Ok(AdaptationCost { rounds: input.epochs, calls: input.epochs * input.n_train })
        }
        AdaptationMethod::Trace2Skill => {
            if input.pool_size == 0 {
                return Err(CostError::InvalidInput("pool_size must be positive"));
            }
            let rounds = ceil_log2(input.pool_size);
            Ok(AdaptationCost { rounds, calls: rounds * input.pool_size })
        }
    }
}
