//! Scholarly-graph ingestion and the simulator's bibliographic data model.

mod discipline;
mod ingest;
mod lookup;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use discipline::{map_discipline_to_field, Discipline, Field};
pub use ingest::{
    ingest, ingest_authors, ingest_papers, AuthorIngest, IngestReport, IngestWindows, PaperIngest, RawAuthor, RawPaper,
};
pub use lookup::{
    infer_ethnicity, lookup_affiliation_rank, BackendDisciplineClassifier, BackendTopicSummarizer, DisciplineClassifier,
    EthnicityClassifier, FrequencyTopicSummarizer, KeywordDisciplineClassifier, LookupEthnicityClassifier, RankTable,
    StubEthnicityClassifier, TopicSummarizer,
};

pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown discipline label {0:?}")]
    UnknownDiscipline(String),
    #[error("{source_name} record {index}: {message}")]
    Malformed { source_name: &'static str, index: usize, message: String },
    #[error("cannot classify an empty name")]
    EmptyName,
    #[error("rank table: {0}")]
    RankTable(String),
    #[error("snapshot schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("snapshot encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuthorId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PaperId(pub u64);

impl fmt::Display for AuthorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}", self.0)
    }
}

impl fmt::Display for PaperId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// Year stored for every paper of the initial reference database.
pub const SEED_YEAR: i32 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthorRecord {
    pub author_id: AuthorId,
    /// Anonymized label, `Scientist <n>`.
    pub display_name: String,
    pub ethnicity: String,
    pub affiliations: Vec<String>,
    /// Best (lowest) rank among the author's ranked affiliations.
    pub affiliation_rank: Option<u32>,
    pub citation_count: u64,
    pub coauthor_ids: BTreeSet<AuthorId>,
    pub discipline: Discipline,
    pub research_topics: Vec<String>,
}

impl AuthorRecord {
    pub fn first_affiliation(&self) -> Option<&str> {
        self.affiliations.first().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub paper_id: PaperId,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    /// `-1` for seed papers, acceptance epoch for agent papers, calendar year
    /// for validation papers.
    pub year: i32,
    pub citation_count: u64,
    pub author_ids: Vec<AuthorId>,
    /// `None` for seed papers.
    pub cited_paper_ids: Option<Vec<PaperId>>,
    pub discipline: Discipline,
}

impl PaperRecord {
    pub fn is_seed(&self) -> bool {
        self.year == SEED_YEAR && self.cited_paper_ids.is_none()
    }

    /// Text handed to the embedder when indexing this paper.
    pub fn embedding_text(&self) -> String {
        format!("{}\n{}", self.title, self.abstract_text)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub reference_db: Vec<PaperRecord>,
    pub validation_db: Vec<PaperRecord>,
}

impl CorpusSplit {
    pub fn next_paper_id(&self) -> PaperId {
        let max = self.reference_db.iter().chain(&self.validation_db).map(|p| p.paper_id.0).max();
        PaperId(max.map_or(0, |m| m + 1))
    }
}

/// Everything a simulation starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub schema_version: u32,
    pub authors: Vec<AuthorRecord>,
    #[serde(flatten)]
    pub split: CorpusSplit,
}

impl Corpus {
    pub fn new(authors: Vec<AuthorRecord>, split: CorpusSplit) -> Self {
        Corpus { schema_version: SNAPSHOT_SCHEMA_VERSION, authors, split }
    }

    pub fn author_lookup(&self) -> BTreeMap<AuthorId, &AuthorRecord> {
        self.authors.iter().map(|a| (a.author_id, a)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let bytes = std::fs::read(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
        let corpus: Corpus = serde_json::from_slice(&bytes)?;
        if corpus.schema_version != SNAPSHOT_SCHEMA_VERSION {
            return Err(CorpusError::SchemaVersion { found: corpus.schema_version, expected: SNAPSHOT_SCHEMA_VERSION });
        }
        Ok(corpus)
    }
}
