//! Model provider contracts and deterministic offline mocks.
//!
//! Providers are inference-only: there is no entry point that updates model
//! parameters, so the solver stays fixed whatever the pipeline does.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::synthesis::{EVIDENCE_SECTION_HEADER, TARGET_SECTION_HEADER};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("provider unavailable: {0}")]
    Unavailable(String),
}

impl ProviderError {
    /// Whether a retry may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ProviderError::Transport(_) => true,
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub vectors: Vec<Vec<f64>>,
    pub input_tokens: u64,
    /// Transport retries spent on this batch.
    pub retries: u32,
}

pub trait EmbeddingProvider: Send + Sync {
    fn model_name(&self) -> &str;

    /// One vector per input text, in input order.
    fn embed(&self, texts: &[String]) -> Result<EmbeddingBatch, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationRequest<'a> {
    pub system: &'a str,
    pub user: &'a str,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub decoded_tokens: u64,
    pub input_tokens: u64,
    pub retries: u32,
}

pub trait GenerationProvider: Send + Sync {
    fn model_name(&self) -> &str;

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, ProviderError>;
}

/// Whitespace token count; the mocks report usage in these units.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Bag-of-tokens embedder: each lowercased whitespace token increments one of
/// `dim` buckets chosen by FNV-1a. Texts sharing tokens land close together.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    model: String,
    dim: usize,
}

impl MockEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { model: "mock-hash-embedder".to_string(), dim }
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in text.split_whitespace() {
            let bucket = fnv1a(token.to_lowercase().as_bytes()) % self.dim as u64;
            v[bucket as usize] += 1.0;
        }
        v
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> Result<EmbeddingBatch, ProviderError> {
        Ok(EmbeddingBatch {
            vectors: texts.iter().map(|t| self.embed_one(t)).collect(),
            input_tokens: texts.iter().map(|t| whitespace_tokens(t)).sum(),
            retries: 0,
        })
    }
}

/// Marker the instruction-summary prompt starts its system text with.
pub const SUMMARY_PROMPT_MARKER: &str = "You summarize spreadsheet task instructions";

/// Offline stand-in for the synthesis model.
///
/// For skill prompts it writes a valid `SKILL.md` whose procedures name the
/// most frequent `family:` value among the retrieved evidence blocks (ties go
/// to the higher-ranked block). For instruction-summary prompts it fills the
/// six summary fields from the instruction words.
#[derive(Debug)]
pub struct MockSynthesizer {
    model: String,
    calls: AtomicUsize,
}

impl MockSynthesizer {
    pub fn new() -> Self {
        Self { model: "mock-synthesizer".to_string(), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn summary(&self, user: &str) -> String {
        let instruction = user
            .lines()
            .find_map(|l| l.strip_prefix("instruction: "))
            .unwrap_or(user)
            .trim();
        let words: Vec<&str> = instruction.split_whitespace().collect();
        let head = |n: usize| words.iter().take(n).copied().collect::<Vec<_>>().join(" ");
        let verb = words.first().copied().unwrap_or("process");
        format!(
            "action: {verb}\nselection: {}\ncalculation: {}\noutput: write the result to the requested position\nconstraints: keep other cells unchanged\nvalidation: recheck the target range\n",
            head(4),
            head(words.len()),
        )
    }

    fn skill(&self, user: &str) -> String {
        let evidence = user
            .split_once(EVIDENCE_SECTION_HEADER)
            .map(|(_, rest)| rest)
            .unwrap_or("");
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut failures = 0;
        for (order, line) in evidence.lines().enumerate() {
            if line.starts_with("--- trajectory ") && line.contains("[failure]") {
                failures += 1;
            }
            if let Some(family) = line.strip_prefix("family: ") {
                let family = family.trim();
                if !family.is_empty() {
                    counts.entry(family).or_insert((0, order)).0 += 1;
                }
            }
        }
        let family = counts
            .into_iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
            .map(|(f, _)| f);
        let has_target = user.contains(TARGET_SECTION_HEADER);

        let mut out = String::from("# SKILL.md\n\n## When to use\n");
        out.push_str("- Use this skill when the target task asks for a rule-based transformation of a visible input.\n");
        if !has_target {
            out.push_str("- The target contract was not visible; rely on general checks.\n");
        }
        out.push_str("\n## Possible Failure Modes\n");
        out.push_str("- Copying constants from earlier attempts instead of deriving them from the target input.\n");
        if failures > 0 {
            out.push_str("- Stopping before the rule is applied; confirm the rule was executed before submitting.\n");
        }
        out.push_str("\n## Possible procedures\n");
        match family {
            Some(f) => out.push_str(&format!(
                "- Apply the `{f}` transformation family to the visible input value.\n"
            )),
            None => out.push_str("- Read the visible task contract and derive the rule from it.\n"),
        }
        out.push_str("- Check the output format against the target contract before submitting.\n");
        out
    }
}

impl Default for MockSynthesizer {
    fn default() -> Self {
        Self::new()
    }
}

impl GenerationProvider for MockSynthesizer {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = if request.system.starts_with(SUMMARY_PROMPT_MARKER) {
            self.summary(request.user)
        } else {
            self.skill(request.user)
        };
        Ok(Generation {
            decoded_tokens: whitespace_tokens(&text),
            input_tokens: whitespace_tokens(request.system) + whitespace_tokens(request.user),
            text,
            retries: 0,
        })
    }
}

/// Replays fixed responses in order, repeating the last one.
#[derive(Debug)]
pub struct CannedGenerator {
    responses: Vec<String>,
    next: Mutex<usize>,
    seen: Mutex<Vec<(String, String, f64)>>,
}

impl CannedGenerator {
    pub fn new(response: impl Into<String>) -> Self {
        Self::sequence(vec![response.into()])
    }

    pub fn sequence(responses: Vec<String>) -> Self {
        assert!(!responses.is_empty());
        Self { responses, next: Mutex::new(0), seen: Mutex::new(Vec::new()) }
    }

    /// `(system, user, temperature)` of every call so far.
    pub fn requests(&self) -> Vec<(String, String, f64)> {
        self.seen.lock().unwrap().clone()
    }
}

impl GenerationProvider for CannedGenerator {
    fn model_name(&self) -> &str {
        "canned"
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, ProviderError> {
        self.seen.lock().unwrap().push((
            request.system.to_string(),
            request.user.to_string(),
            request.temperature,
        ));
        let mut next = self.next.lock().unwrap();
        let text = self.responses[(*next).min(self.responses.len() - 1)].clone();
        *next += 1;
        Ok(Generation {
            decoded_tokens: whitespace_tokens(&text),
            input_tokens: whitespace_tokens(request.system) + whitespace_tokens(request.user),
            text,
            retries: 0,
        })
    }
}

/// Always fails; for error-path tests.
#[derive(Debug, Clone)]
pub struct FailingProvider(pub ProviderError);

impl GenerationProvider for FailingProvider {
    fn model_name(&self) -> &str {
        "failing"
    }

    fn generate(&self, _: &GenerationRequest<'_>) -> Result<Generation, ProviderError> {
        Err(self.0.clone())
    }
}

impl EmbeddingProvider for FailingProvider {
    fn model_name(&self) -> &str {
        "failing"
    }

    fn embed(&self, _: &[String]) -> Result<EmbeddingBatch, ProviderError> {
        Err(self.0.clone())
    }
}
