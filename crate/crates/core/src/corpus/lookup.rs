//! Pluggable completion lookups: affiliation ranks, name ethnicity, paper
//! discipline and author research topics.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{CorpusError, Discipline};
use crate::backend::Backend;
use crate::rng::fnv1a64;

/// Institution name to rank, loaded from a local `institution,rank` CSV.
#[derive(Debug, Default)]
pub struct RankTable {
    ranks: HashMap<String, u32>,
    misses: AtomicU64,
}

impl RankTable {
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, u32)>,
        S: Into<String>,
    {
        RankTable { ranks: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(), misses: AtomicU64::new(0) }
    }

    pub fn from_csv(reader: impl Read) -> Result<Self, CorpusError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| CorpusError::RankTable(e.to_string()))?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| CorpusError::RankTable(format!("missing column {name:?}")))
        };
        let (inst, rank) = (col("institution")?, col("rank")?);
        let mut ranks = HashMap::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| CorpusError::RankTable(format!("row {}: {e}", i + 1)))?;
            let r: u32 =
                row[rank].parse().map_err(|_| CorpusError::RankTable(format!("row {}: bad rank {:?}", i + 1, &row[rank])))?;
            if r == 0 {
                return Err(CorpusError::RankTable(format!("row {}: rank must be positive", i + 1)));
            }
            ranks.insert(row[inst].to_string(), r);
        }
        Ok(RankTable { ranks, misses: AtomicU64::new(0) })
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn get(&self, institution: &str) -> Option<u32> {
        lookup_affiliation_rank(institution, self)
    }
}

/// Exact-name lookup; a miss is counted on the table.
pub fn lookup_affiliation_rank(institution: &str, table: &RankTable) -> Option<u32> {
    let hit = table.ranks.get(institution).copied();
    if hit.is_none() {
        table.misses.fetch_add(1, Ordering::Relaxed);
    }
    hit
}

pub trait EthnicityClassifier: Send + Sync {
    /// Closed label set the classifier draws from.
    fn labels(&self) -> &[String];
    fn classify(&self, name: &str) -> String;
}

/// Validates the input and delegates to the classifier.
pub fn infer_ethnicity(name: &str, classifier: &dyn EthnicityClassifier) -> Result<String, CorpusError> {
    let name = name.trim();
    if name.is_empty() {
        return Err(CorpusError::EmptyName);
    }
    Ok(classifier.classify(name))
}

/// Deterministic stand-in: a stable hash of the name picks a label.
#[derive(Debug, Clone)]
pub struct StubEthnicityClassifier {
    labels: Vec<String>,
}

impl StubEthnicityClassifier {
    pub const DEFAULT_LABELS: [&'static str; 13] = [
        "African",
        "British",
        "EastAsian",
        "EastEuropean",
        "French",
        "German",
        "Hispanic",
        "IndianSubContinent",
        "Italian",
        "Japanese",
        "Jewish",
        "Muslim",
        "Nordic",
    ];

    pub fn new(labels: Vec<String>) -> Self {
        assert!(!labels.is_empty(), "ethnicity label set must not be empty");
        StubEthnicityClassifier { labels }
    }
}

impl Default for StubEthnicityClassifier {
    fn default() -> Self {
        StubEthnicityClassifier::new(Self::DEFAULT_LABELS.iter().map(|s| s.to_string()).collect())
    }
}

impl EthnicityClassifier for StubEthnicityClassifier {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn classify(&self, name: &str) -> String {
        let h = fnv1a64(name.to_lowercase().as_bytes());
        self.labels[(h % self.labels.len() as u64) as usize].clone()
    }
}

/// Known names first, then a fallback classifier.
pub struct LookupEthnicityClassifier<F> {
    known: BTreeMap<String, String>,
    fallback: F,
    labels: Vec<String>,
}

impl<F: EthnicityClassifier> LookupEthnicityClassifier<F> {
    pub fn new(known: BTreeMap<String, String>, fallback: F) -> Self {
        let mut labels = fallback.labels().to_vec();
        for l in known.values() {
            if !labels.contains(l) {
                labels.push(l.clone());
            }
        }
        LookupEthnicityClassifier { known, fallback, labels }
    }
}

impl<F: EthnicityClassifier> EthnicityClassifier for LookupEthnicityClassifier<F> {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn classify(&self, name: &str) -> String {
        self.known.get(name).cloned().unwrap_or_else(|| self.fallback.classify(name))
    }
}

pub trait DisciplineClassifier: Send + Sync {
    /// Raw label; callers validate it against the discipline set.
    fn classify(&self, title: &str, keywords: &[String]) -> String;
}

/// Scores each discipline by how many title/keyword tokens hit its lexicon.
/// Ties go to the earlier discipline; no hit at all falls back to a stable
/// hash of the title.
#[derive(Debug, Clone, Default)]
pub struct KeywordDisciplineClassifier;

impl KeywordDisciplineClassifier {
    pub fn lexicon(d: Discipline) -> &'static [&'static str] {
        use Discipline::*;
        match d {
            Art => &["art", "painting", "music", "aesthetic", "sculpture", "film"],
            History => &["history", "historical", "century", "archive", "medieval", "empire"],
            Philosophy => &["philosophy", "ethics", "epistemology", "metaphysics", "logic", "ontology"],
            Psychology => &["psychology", "cognitive", "attention", "memory", "behavior", "emotion"],
            Biology => &["biology", "gene", "protein", "cell", "species", "evolution"],
            EnvironmentalScience => &["environment", "environmental", "climate", "pollution", "soil", "ecosystem"],
            Geography => &["geography", "spatial", "urban", "land", "regional", "mapping"],
            Geology => &["geology", "rock", "tectonic", "sediment", "mineral", "seismic"],
            Business => &["business", "firm", "marketing", "management", "strategy", "entrepreneurship"],
            Economics => &["economics", "economic", "market", "price", "labor", "monetary"],
            ComputerScience => &["computer", "algorithm", "software", "network", "learning", "data"],
            Engineering => &["engineering", "control", "circuit", "mechanical", "design", "sensor"],
            Chemistry => &["chemistry", "chemical", "molecule", "catalysis", "synthesis", "reaction"],
            MaterialsScience => &["materials", "alloy", "polymer", "composite", "nanostructure", "crystal"],
            Mathematics => &["mathematics", "theorem", "algebra", "topology", "proof", "equation"],
            Physics => &["physics", "quantum", "particle", "optical", "plasma", "relativity"],
            Medicine => &["medicine", "clinical", "patient", "disease", "therapy", "cancer"],
            PoliticalScience => &["political", "policy", "election", "government", "democracy", "voting"],
            Sociology => &["sociology", "social", "inequality", "community", "gender", "migration"],
        }
    }
}

impl DisciplineClassifier for KeywordDisciplineClassifier {
    fn classify(&self, title: &str, keywords: &[String]) -> String {
        let tokens: Vec<String> = std::iter::once(title)
            .chain(keywords.iter().map(String::as_str))
            .flat_map(|s| s.split(|c: char| !c.is_alphanumeric()))
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut best: Option<(usize, Discipline)> = None;
        for d in Discipline::ALL {
            let lex = Self::lexicon(d);
            let hits = tokens.iter().filter(|t| lex.contains(&t.as_str())).count();
            if hits > 0 && best.is_none_or(|(b, _)| hits > b) {
                best = Some((hits, d));
            }
        }
        let d = best
            .map(|(_, d)| d)
            .unwrap_or_else(|| Discipline::ALL[(fnv1a64(title.as_bytes()) % Discipline::ALL.len() as u64) as usize]);
        d.label().to_string()
    }
}

/// Asks the chat backend to name one discipline.
pub struct BackendDisciplineClassifier<B> {
    pub backend: B,
}

impl<B: Backend> DisciplineClassifier for BackendDisciplineClassifier<B> {
    fn classify(&self, title: &str, keywords: &[String]) -> String {
        let options: Vec<&str> = Discipline::ALL.iter().map(|d| d.label()).collect();
        let prompt = format!(
            "Classify the paper into exactly one of these disciplines: {}.\nTitle: {title}\nKeywords: {}\nAnswer with the discipline name only.",
            options.join(", "),
            keywords.join(", ")
        );
        match self.backend.chat(&prompt) {
            Ok(s) => s.lines().next().unwrap_or_default().trim().to_string(),
            Err(e) => {
                log::warn!("discipline classification failed for {title:?}: {e}");
                String::new()
            }
        }
    }
}

pub trait TopicSummarizer: Send + Sync {
    fn summarize(&self, keywords: &[String]) -> Vec<String>;
}

/// Returns the `k` most frequent keywords verbatim (ties alphabetical).
#[derive(Debug, Clone)]
pub struct FrequencyTopicSummarizer {
    pub k: usize,
}

impl Default for FrequencyTopicSummarizer {
    fn default() -> Self {
        FrequencyTopicSummarizer { k: 5 }
    }
}

impl TopicSummarizer for FrequencyTopicSummarizer {
    fn summarize(&self, keywords: &[String]) -> Vec<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for k in keywords {
            *counts.entry(k.as_str()).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.into_iter().take(self.k).map(|(k, _)| k.to_string()).collect()
    }
}

/// Asks the chat backend for a comma-separated topic list.
pub struct BackendTopicSummarizer<B> {
    pub backend: B,
    pub k: usize,
}

impl<B: Backend> TopicSummarizer for BackendTopicSummarizer<B> {
    fn summarize(&self, keywords: &[String]) -> Vec<String> {
        if keywords.is_empty() {
            return Vec::new();
        }
        let prompt = format!(
            "Summarize these paper keywords into at most {} research topics, comma separated.\nKeywords: {}",
            self.k,
            keywords.join(", ")
        );
        match self.backend.chat(&prompt) {
            Ok(s) => s.split([',', '\n']).map(str::trim).filter(|t| !t.is_empty()).take(self.k).map(str::to_string).collect(),
            Err(e) => {
                log::warn!("topic summarization failed, keeping raw keywords: {e}");
                FrequencyTopicSummarizer { k: self.k }.summarize(keywords)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_lookup_hits_and_misses() {
        let t = RankTable::from_csv("institution,rank\nKing's College London,36\nX,1\nY,2\n".as_bytes()).unwrap();
        assert_eq!(lookup_affiliation_rank("King's College London", &t), Some(36));
        assert_eq!(lookup_affiliation_rank("Y", &t), Some(2));
        assert_eq!(t.misses(), 0);
        assert_eq!(lookup_affiliation_rank("Nowhere University", &t), None);
        assert_eq!(t.misses(), 1);
    }

    #[test]
    fn rank_csv_errors() {
        assert!(RankTable::from_csv("name,rank\nX,1\n".as_bytes()).is_err());
        assert!(RankTable::from_csv("institution,rank\nX,abc\n".as_bytes()).is_err());
        assert!(RankTable::from_csv("institution,rank\nX,0\n".as_bytes()).is_err());
    }

    #[test]
    fn ethnicity_lookup_and_determinism() {
        let known = BTreeMap::from([("Alice Smith".to_string(), "British".to_string())]);
        let c = LookupEthnicityClassifier::new(known, StubEthnicityClassifier::default());
        assert_eq!(infer_ethnicity("Alice Smith", &c).unwrap(), "British");
        let a = infer_ethnicity("Wei Zhang", &c).unwrap();
        assert_eq!(a, infer_ethnicity("Wei Zhang", &c).unwrap());
        assert!(c.labels().contains(&a));
        assert!(matches!(infer_ethnicity("  ", &c), Err(CorpusError::EmptyName)));
    }

    #[test]
    fn keyword_classifier_prefers_most_hits() {
        let c = KeywordDisciplineClassifier;
        let kw = vec!["catalysis".to_string(), "reaction".to_string()];
        assert_eq!(c.classify("A polymer study", &kw), "Chemistry");
        assert_eq!(c.classify("Quantum optical plasma", &[]), "Physics");
        let fallback = c.classify("zzz qqq", &[]);
        assert!(Discipline::from_label(&fallback).is_some());
    }

    #[test]
    fn frequency_summarizer_takes_top_k() {
        let s = FrequencyTopicSummarizer { k: 2 };
        let kw: Vec<String> = ["b", "a", "c", "a", "b", "a"].iter().map(|s| s.to_string()).collect();
        assert_eq!(s.summarize(&kw), vec!["a", "b"]);
    }
}
