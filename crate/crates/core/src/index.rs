//! Exact cosine retrieval over the reference database, plus the citation
//! ledger fed by idea-generation retrievals.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::corpus::{PaperId, PaperRecord};
use crate::par::{self, Execution};
use crate::society::TeamId;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("paper {paper}: embedding has dimension {got}, index expects {expected}")]
    DimensionMismatch { paper: PaperId, expected: usize, got: usize },
    #[error("query has dimension {got}, index expects {expected}")]
    QueryDimension { expected: usize, got: usize },
    #[error("embedding is empty or has non-finite entries")]
    InvalidEmbedding,
    #[error("paper {0}: zero-norm embedding")]
    ZeroNormPaper(PaperId),
    #[error("zero-norm query, cosine similarity undefined")]
    ZeroNormQuery,
    #[error("paper {0} is already indexed")]
    Duplicate(PaperId),
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("paper {paper}: embedding backend failed: {source}")]
    Backend { paper: PaperId, source: BackendError },
    #[error("citation of unknown paper {0}")]
    UnknownPaper(PaperId),
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

/// A finite, non-empty vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, IndexError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::InvalidEmbedding);
        }
        Ok(EmbeddingVector(values))
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
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = IndexError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        EmbeddingVector::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Dense row-major store of one vector per paper.
#[derive(Debug, Clone, PartialEq)]
pub struct PaperIndex {
    dim: usize,
    ids: Vec<PaperId>,
    vectors: Vec<f64>,
    norms: Vec<f64>,
    positions: HashMap<PaperId, usize>,
}

impl PaperIndex {
    pub fn new(dim: usize) -> Self {
        PaperIndex { dim, ids: Vec::new(), vectors: Vec::new(), norms: Vec::new(), positions: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: PaperId) -> bool {
        self.positions.contains_key(&id)
    }

    pub fn ids(&self) -> &[PaperId] {
        &self.ids
    }

    pub fn vector(&self, id: PaperId) -> Option<&[f64]> {
        self.positions.get(&id).map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn insert(&mut self, id: PaperId, vector: EmbeddingVector) -> Result<(), IndexError> {
        if vector.dim() != self.dim {
            return Err(IndexError::DimensionMismatch { paper: id, expected: self.dim, got: vector.dim() });
        }
        if self.positions.contains_key(&id) {
            return Err(IndexError::Duplicate(id));
        }
        let norm = vector.norm();
        if norm == 0.0 {
            return Err(IndexError::ZeroNormPaper(id));
        }
        self.positions.insert(id, self.ids.len());
        self.ids.push(id);
        self.vectors.extend_from_slice(vector.values());
        self.norms.push(norm);
        Ok(())
    }

    /// Top-`k` papers by cosine similarity, descending, ties by ascending id.
    pub fn retrieve(&self, query: &EmbeddingVector, k: usize, exec: Execution) -> Result<Vec<(PaperId, f64)>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::QueryDimension { expected: self.dim, got: query.dim() });
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(IndexError::ZeroNormQuery);
        }
        let q = query.values();
        let score = |i: usize| {
            let row = &self.vectors[i * self.dim..(i + 1) * self.dim];
            let dot: f64 = row.iter().zip(q).map(|(a, b)| a * b).sum();
            // `+ 0.0` folds a negative zero into zero.
            (self.ids[i], dot / (self.norms[i] * qn) + 0.0)
        };
        // Small indexes are always scanned sequentially.
        let exec = if self.len() >= 4096 { exec } else { Execution::Sequential };
        let mut scored = par::map_range(exec, self.len(), score);
        let by_rank =
            |a: &(PaperId, f64), b: &(PaperId, f64)| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0));
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        Ok(scored)
    }

    pub fn snapshot(&self) -> IndexSnapshot {
        IndexSnapshot {
            dim: self.dim,
            entries: self.ids.iter().map(|&id| (id, self.vector(id).unwrap_or_default().to_vec())).collect(),
        }
    }

    pub fn from_snapshot(s: &IndexSnapshot) -> Result<Self, IndexError> {
        let mut idx = PaperIndex::new(s.dim);
        for (id, v) in &s.entries {
            idx.insert(*id, EmbeddingVector::new(v.clone())?)?;
        }
        Ok(idx)
    }
}

/// Serialized index; `dim` doubles as the header recording the embedder's
/// dimensionality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSnapshot {
    pub dim: usize,
    pub entries: Vec<(PaperId, Vec<f64>)>,
}

/// Embeds every paper and indexes it. The first paper fixes the dimension.
pub fn build_index(papers: &[PaperRecord], embedder: &dyn Backend, exec: Execution) -> Result<PaperIndex, IndexError> {
    if papers.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    let vectors = par::try_map(exec, papers, |p| {
        embedder
            .embed(&p.embedding_text())
            .map_err(|source| IndexError::Backend { paper: p.paper_id, source })
            .map(|v| (p.paper_id, v))
    })?;
    let dim = vectors[0].1.len();
    let mut index = PaperIndex::new(dim);
    for (id, v) in vectors {
        if v.len() != dim {
            return Err(IndexError::DimensionMismatch { paper: id, expected: dim, got: v.len() });
        }
        index.insert(id, EmbeddingVector::new(v)?)?;
    }
    Ok(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationEvent {
    pub epoch: u32,
    pub team_id: TeamId,
    pub paper_id: PaperId,
}

/// Per-paper citation deltas accrued during a run, with the event log that
/// produced them. `Σ deltas == events.len()` always holds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CitationLedger {
    counts: BTreeMap<PaperId, u64>,
    events: Vec<CitationEvent>,
}

pub const CITATION_EVENTS_FILE: &str = "citations_events.csv";

impl CitationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one citation per id. All ids are validated before any is
    /// applied, so a failed call leaves the ledger untouched.
    pub fn record_citations(
        &mut self,
        epoch: u32,
        team_id: TeamId,
        paper_ids: &[PaperId],
        known: impl Fn(PaperId) -> bool,
    ) -> Result<(), IndexError> {
        if let Some(&bad) = paper_ids.iter().find(|&&id| !known(id)) {
            return Err(IndexError::UnknownPaper(bad));
        }
        for &paper_id in paper_ids {
            *self.counts.entry(paper_id).or_insert(0) += 1;
            self.events.push(CitationEvent { epoch, team_id, paper_id });
        }
        Ok(())
    }

    pub fn delta(&self, id: PaperId) -> u64 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn events(&self) -> &[CitationEvent] {
        &self.events
    }

    pub fn counts(&self) -> &BTreeMap<PaperId, u64> {
        &self.counts
    }

    pub fn write_events_csv(&self, path: &Path) -> Result<(), IndexError> {
        let io = |e: &dyn std::fmt::Display| IndexError::Io { path: path.display().to_string(), message: e.to_string() };
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| io(&e))?;
        w.write_record(["epoch", "team_id", "paper_id"]).map_err(|e| io(&e))?;
        for e in &self.events {
            w.write_record([e.epoch.to_string(), e.team_id.0.to_string(), e.paper_id.0.to_string()]).map_err(|e| io(&e))?;
        }
        w.flush().map_err(|e| io(&e))
    }

    pub fn read_events_csv(path: &Path) -> Result<Vec<CitationEvent>, IndexError> {
        let io = |e: &dyn std::fmt::Display| IndexError::Io { path: path.display().to_string(), message: e.to_string() };
        let mut r = csv::Reader::from_path(path).map_err(|e| io(&e))?;
        r.records()
            .map(|rec| {
                let rec = rec.map_err(|e| io(&e))?;
                let num = |i: usize| rec[i].parse::<u64>().map_err(|e| io(&e));
                Ok(CitationEvent { epoch: num(0)? as u32, team_id: TeamId(num(1)?), paper_id: PaperId(num(2)?) })
            })
            .collect()
    }
}
