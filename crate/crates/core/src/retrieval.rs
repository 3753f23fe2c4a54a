//! Exact top-k cosine retrieval over an in-memory vector index.
//!
//! Vectors are normalized when inserted, so a query costs one dot product
//! per entry. Ranking is by similarity descending with ties broken by
//! ascending `task_id`, which makes results fully deterministic.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed_text::EmbeddingText;
use crate::pool::{Label, LabelFilter, TrajectoryPool};
use crate::provider::{EmbeddingProvider, ProviderError};
use crate::sampling;

/// Leading line of a persisted index.
pub const INDEX_MAGIC: &str = "SKTTA-IDX-1";

/// Tolerance on the unit norm of stored vectors.
pub const NORM_TOLERANCE: f64 = 1e-6;

const EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero or non-finite vector")]
    ZeroVector,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate task_id `{0}` in index")]
    DuplicateEntry(String),
    #[error("no retrieval text for pool record `{0}`")]
    MissingText(String),
    #[error("embedding provider failed on batch starting at `{task_id}`: {source}")]
    ProviderFailure { task_id: String, source: ProviderError },
    #[error("provider returned {actual} vectors for {expected} texts")]
    BatchSize { expected: usize, actual: usize },
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<EmbeddingVector, RetrievalError> {
        let norm = self.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(RetrievalError::ZeroVector);
        }
        Ok(EmbeddingVector(self.0.iter().map(|x| x / norm).collect()))
    }

    fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch { expected: a.dim(), actual: b.dim() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(a.dot(b) / (na * nb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub task_id: String,
    pub label: Label,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    model: String,
    entries: Vec<IndexEntry>,
    ids: HashSet<String>,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    dim: usize,
    model: String,
    count: usize,
}

impl VectorIndex {
    pub fn new(dim: usize, model: impl Into<String>) -> Self {
        Self { dim, model: model.into(), entries: Vec::new(), ids: HashSet::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Insert a vector, normalizing it.
    pub fn insert(
        &mut self,
        task_id: impl Into<String>,
        label: Label,
        vector: EmbeddingVector,
    ) -> Result<(), RetrievalError> {
        let task_id = task_id.into();
        if vector.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, actual: vector.dim() });
        }
        if self.ids.contains(&task_id) {
            return Err(RetrievalError::DuplicateEntry(task_id));
        }
        let vector = vector.normalized()?;
        self.ids.insert(task_id.clone());
        self.entries.push(IndexEntry { task_id, label, vector });
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), RetrievalError> {
        writeln!(out, "{INDEX_MAGIC}")?;
        let header = IndexHeader { dim: self.dim, model: self.model.clone(), count: self.entries.len() };
        writeln!(out, "{}", serde_json::to_string(&header).map_err(|e| RetrievalError::Format(e.to_string()))?)?;
        for entry in &self.entries {
            let line = serde_json::to_string(entry).map_err(|e| RetrievalError::Format(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(source: R) -> Result<VectorIndex, RetrievalError> {
        let mut lines = source.lines();
        let magic = lines.next().transpose()?.unwrap_or_default();
        if magic.trim_end() != INDEX_MAGIC {
            return Err(RetrievalError::Format(format!("bad magic `{magic}`")));
        }
        let header: IndexHeader = match lines.next().transpose()? {
            Some(l) => serde_json::from_str(&l).map_err(|e| RetrievalError::Format(e.to_string()))?,
            None => return Err(RetrievalError::Format("missing header".into())),
        };
        let mut index = VectorIndex::new(header.dim, header.model);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: IndexEntry =
                serde_json::from_str(&line).map_err(|e| RetrievalError::Format(e.to_string()))?;
            if (entry.vector.norm() - 1.0).abs() > NORM_TOLERANCE {
                return Err(RetrievalError::Format(format!("entry `{}` is not unit norm", entry.task_id)));
            }
            if entry.vector.dim() != index.dim {
                return Err(RetrievalError::DimensionMismatch { expected: index.dim, actual: entry.vector.dim() });
            }
            if !index.ids.insert(entry.task_id.clone()) {
                return Err(RetrievalError::DuplicateEntry(entry.task_id));
            }
            // Stored vectors are already normalized; keep their exact bits.
            index.entries.push(entry);
        }
        if index.entries.len() != header.count {
            return Err(RetrievalError::Format(format!(
                "header declares {} entries, found {}",
                header.count,
                index.entries.len()
            )));
        }
        Ok(index)
    }
}

/// Index plus the embedding usage spent building it.
#[derive(Debug, Clone)]
pub struct IndexBuild {
    pub index: VectorIndex,
    pub input_tokens: u64,
    pub calls: u64,
    pub retries: u64,
}

/// Embed every pool record's retrieval text and index it. `texts` must hold
/// one entry per record (matched by `task_id`).
pub fn build_index(
    pool: &TrajectoryPool,
    texts: &[EmbeddingText],
    provider: &dyn EmbeddingProvider,
) -> Result<IndexBuild, RetrievalError> {
    let by_id: std::collections::HashMap<&str, &str> =
        texts.iter().map(|t| (t.task_id.as_str(), t.text.as_str())).collect();
    let mut ordered = Vec::with_capacity(pool.len());
    for record in pool.records() {
        let text = by_id
            .get(record.task_id())
            .ok_or_else(|| RetrievalError::MissingText(record.task_id().to_string()))?;
        ordered.push((record, text.to_string()));
    }

    let mut index: Option<VectorIndex> = None;
    let (mut input_tokens, mut calls, mut retries) = (0, 0, 0);
    for chunk in ordered.chunks(EMBED_BATCH) {
        let batch_texts: Vec<String> = chunk.iter().map(|(_, t)| t.clone()).collect();
        let batch = provider.embed(&batch_texts).map_err(|source| RetrievalError::ProviderFailure {
            task_id: chunk[0].0.task_id().to_string(),
            source,
        })?;
        calls += 1;
        input_tokens += batch.input_tokens;
        retries += u64::from(batch.retries);
        if batch.vectors.len() != chunk.len() {
            return Err(RetrievalError::BatchSize { expected: chunk.len(), actual: batch.vectors.len() });
        }
        for ((record, _), vector) in chunk.iter().zip(batch.vectors) {
            let index = index.get_or_insert_with(|| VectorIndex::new(vector.len(), provider.model_name()));
            index.insert(record.task_id(), record.label, EmbeddingVector::new(vector))?;
        }
    }
    let index = index.unwrap_or_else(|| VectorIndex::new(0, provider.model_name()));
    Ok(IndexBuild { index, input_tokens, calls, retries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub task_id: String,
    pub similarity: f64,
}

/// Ranked hits for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    pub filter_applied: LabelFilter,
    pub k_requested: usize,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.task_id.as_str()).collect()
    }
}

/// Ranking key: greater means better.
#[derive(Debug, Clone, Copy)]
struct Ranked<'a> {
    similarity: f64,
    id: &'a str,
    position: usize,
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.similarity
            .total_cmp(&other.similarity)
            .then_with(|| other.id.cmp(self.id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

/// Exact filtered top-k. Returns fewer than `k` hits when fewer entries pass.
pub fn retrieve(
    index: &VectorIndex,
    query: &EmbeddingVector,
    k: usize,
    filter: LabelFilter,
    exclude_id: Option<&str>,
) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if query.dim() != index.dim {
        return Err(RetrievalError::DimensionMismatch { expected: index.dim, actual: query.dim() });
    }
    let query = query.normalized()?;

    // Min-heap of the best k seen so far; the worst kept hit sits on top.
    let mut heap: BinaryHeap<Reverse<Ranked<'_>>> = BinaryHeap::with_capacity(k + 1);
    for (position, entry) in index.entries.iter().enumerate() {
        if !filter.admits(entry.label) || exclude_id == Some(entry.task_id.as_str()) {
            continue;
        }
        let candidate = Ranked { similarity: query.dot(&entry.vector), id: &entry.task_id, position };
        if heap.len() < k {
            heap.push(Reverse(candidate));
        } else if let Some(Reverse(worst)) = heap.peek() {
            if candidate > *worst {
                heap.pop();
                heap.push(Reverse(candidate));
            }
        }
    }
    let mut ranked: Vec<Ranked<'_>> = heap.into_iter().map(|Reverse(r)| r).collect();
    ranked.sort_by(|a, b| b.cmp(a));
    Ok(RetrievalResult {
        hits: ranked
            .into_iter()
            .map(|r| Hit { task_id: index.entries[r.position].task_id.clone(), similarity: r.similarity })
            .collect(),
        filter_applied: filter,
        k_requested: k,
    })
}

/// Uniform sample of `k` filtered entries without replacement, reproducible
/// from `seed`. Similarities are reported as 0, so hits are ordered by id.
pub fn random_retrieve(
    index: &VectorIndex,
    k: usize,
    filter: LabelFilter,
    seed: u64,
    exclude_id: Option<&str>,
) -> RetrievalResult {
    let eligible: Vec<&IndexEntry> = index
        .entries
        .iter()
        .filter(|e| filter.admits(e.label) && exclude_id != Some(e.task_id.as_str()))
        .collect();
    let mut rng = sampling::rng(seed);
    let mut hits: Vec<Hit> = sampling::sample_indices(&mut rng, eligible.len(), k)
        .into_iter()
        .map(|i| Hit { task_id: eligible[i].task_id.clone(), similarity: 0.0 })
        .collect();
    hits.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    RetrievalResult { hits, filter_applied: filter, k_requested: k }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_text::build_embed_text;
    use crate::pool::{Benchmark, Role, Step, TaskContext, TrajectoryRecord};
    use crate::provider::{FailingProvider, MockEmbedder};
    use crate::sampling::below;
    use rand::RngCore;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec())
    }

    fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    fn gaussianish(rng: &mut impl RngCore, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| (below(rng, 2_000_001) as f64 - 1_000_000.0) / 1_000_000.0).collect()
    }

    #[test]
    fn self_similarity_and_orthogonality() {
        let a = v(&[3.0, -4.0, 0.5]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(cosine(&v(&[1.0]), &v(&[1.0, 2.0])), Err(RetrievalError::DimensionMismatch { .. })));
        assert!(matches!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 2.0])), Err(RetrievalError::ZeroVector)));
    }

    #[test]
    fn cosine_matches_naive_oracle() {
        let mut rng = sampling::rng(5);
        for _ in 0..200 {
            let a = gaussianish(&mut rng, 16);
            let b = gaussianish(&mut rng, 16);
            let got = cosine(&v(&a), &v(&b)).unwrap();
            assert!((got - naive_cosine(&a, &b)).abs() < 1e-12);
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&got));
        }
    }

    fn record(id: &str, label: Label, family: &str) -> TrajectoryRecord {
        let ctx = TaskContext::new(id, Benchmark::Synthetic, format!("apply {family} to input"))
            .with("family", family)
            .with("input", "1000");
        TrajectoryRecord::new(ctx, vec![Step::new(Role::Agent, "x")], label)
    }

    fn pool_and_texts(n: usize) -> (TrajectoryPool, Vec<EmbeddingText>) {
        let families = ["double", "square", "negate"];
        let labels = [Label::Success, Label::Failure, Label::Unknown];
        let pool = TrajectoryPool::from_records(
            (0..n).map(|i| record(&format!("r{i:03}"), labels[i % 3], families[i % 3])).collect(),
        )
        .unwrap();
        let texts = pool.records().iter().map(|r| build_embed_text(&r.context, None).unwrap()).collect();
        (pool, texts)
    }

    #[test]
    fn empty_pool_builds_empty_index() {
        let (pool, texts) = pool_and_texts(0);
        let built = build_index(&pool, &texts, &MockEmbedder::default()).unwrap();
        assert_eq!(built.index.len(), 0);
        assert_eq!(built.calls, 0);
    }

    #[test]
    fn build_is_deterministic_and_normalized() {
        let (pool, texts) = pool_and_texts(100);
        let a = build_index(&pool, &texts, &MockEmbedder::default()).unwrap();
        let b = build_index(&pool, &texts, &MockEmbedder::default()).unwrap();
        assert_eq!(a.index, b.index);
        assert_eq!(a.index.len(), 100);
        assert_eq!(a.calls, 2);
        assert!(a.index.entries().iter().all(|e| (e.vector.norm() - 1.0).abs() < NORM_TOLERANCE));
    }

    #[test]
    fn build_reports_provider_failure_with_task_id() {
        let (pool, texts) = pool_and_texts(3);
        let err = build_index(&pool, &texts, &FailingProvider(ProviderError::Unavailable("down".into())))
            .unwrap_err();
        assert!(matches!(err, RetrievalError::ProviderFailure { task_id, .. } if task_id == "r000"));
    }

    #[test]
    fn undersized_pool_returns_all_matches() {
        let mut index = VectorIndex::new(2, "m");
        index.insert("a", Label::Failure, v(&[1.0, 0.0])).unwrap();
        index.insert("b", Label::Failure, v(&[0.0, 1.0])).unwrap();
        index.insert("c", Label::Success, v(&[1.0, 1.0])).unwrap();
        let r = retrieve(&index, &v(&[1.0, 0.2]), 3, LabelFilter::FailureOnly, None).unwrap();
        assert_eq!(r.ids(), vec!["a", "b"]);
        assert_eq!(r.k_requested, 3);
    }

    #[test]
    fn ties_break_by_ascending_id_and_exclusion_holds() {
        let mut index = VectorIndex::new(2, "m");
        for id in ["d", "b", "c", "a"] {
            index.insert(id, Label::Success, v(&[2.0, 2.0])).unwrap();
        }
        let r = retrieve(&index, &v(&[1.0, 1.0]), 3, LabelFilter::All, Some("a")).unwrap();
        assert_eq!(r.ids(), vec!["b", "c", "d"]);
    }

    #[test]
    fn retrieve_rejects_bad_queries() {
        let index = VectorIndex::new(2, "m");
        assert!(matches!(
            retrieve(&index, &v(&[1.0]), 1, LabelFilter::All, None),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
        assert!(matches!(retrieve(&index, &v(&[1.0, 0.0]), 0, LabelFilter::All, None), Err(RetrievalError::InvalidK)));
    }

    #[test]
    fn retrieve_matches_brute_force_sort() {
        let mut rng = sampling::rng(17);
        let mut index = VectorIndex::new(8, "m");
        let mut raw = Vec::new();
        for i in 0..50 {
            let vals = gaussianish(&mut rng, 8);
            index.insert(format!("e{i:02}"), Label::Success, v(&vals)).unwrap();
            raw.push((format!("e{i:02}"), vals));
        }
        let q = gaussianish(&mut rng, 8);
        let mut oracle: Vec<(f64, String)> = raw.iter().map(|(id, x)| (naive_cosine(&q, x), id.clone())).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let got = retrieve(&index, &v(&q), 5, LabelFilter::All, None).unwrap();
        let expected: Vec<&str> = oracle.iter().take(5).map(|(_, id)| id.as_str()).collect();
        assert_eq!(got.ids(), expected);
    }

    #[test]
    fn random_retrieve_is_seeded() {
        let (pool, texts) = pool_and_texts(30);
        let index = build_index(&pool, &texts, &MockEmbedder::default()).unwrap().index;
        let a = random_retrieve(&index, 3, LabelFilter::All, 42, None);
        assert_eq!(a, random_retrieve(&index, 3, LabelFilter::All, 42, None));
        assert!(a.hits.iter().all(|h| h.similarity == 0.0));
        let all = random_retrieve(&index, 100, LabelFilter::FailureOnly, 1, None);
        assert_eq!(all.hits.len(), 10);
    }

    #[test]
    fn random_retrieve_is_uniform() {
        let mut index = VectorIndex::new(1, "m");
        for i in 0..10 {
            index.insert(format!("e{i}"), Label::Failure, v(&[1.0])).unwrap();
        }
        let draws = 10_000;
        let mut counts = std::collections::HashMap::new();
        for seed in 0..draws {
            let r = random_retrieve(&index, 1, LabelFilter::All, seed, None);
            *counts.entry(r.hits[0].task_id.clone()).or_insert(0usize) += 1;
        }
        let p: f64 = 0.1;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert_eq!(counts.len(), 10);
        for count in counts.values() {
            assert!((*count as f64 - mean).abs() <= 3.0 * sigma, "count {count} outside 3 sigma");
        }
    }

    #[test]
    fn index_file_round_trip() {
        let (pool, texts) = pool_and_texts(7);
        let index = build_index(&pool, &texts, &MockEmbedder::default()).unwrap().index;
        let mut buf = Vec::new();
        index.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"SKTTA-IDX-1\n"));
        let back = VectorIndex::read_from(&buf[..]).unwrap();
        assert_eq!(back, index);
    }

    #[test]
    fn index_file_rejects_bad_magic() {
        assert!(matches!(VectorIndex::read_from(&b"NOPE\n{}\n"[..]), Err(RetrievalError::Format(_))));
    }
}
