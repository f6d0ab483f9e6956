//! Synthetic scholarly graphs in the raw ingest format.
//!
//! Produces `papers.jsonl`, `authors.jsonl` and `rankings.csv` records that
//! go through the regular ingest path, so tests and demos exercise the same
//! code as real data.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Cursor;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    ingest, Corpus, CorpusError, Discipline, FrequencyTopicSummarizer, IngestReport, IngestWindows, KeywordDisciplineClassifier,
    RankTable, RawAuthor, RawPaper, StubEthnicityClassifier,
};
use crate::rng;
use crate::society::sample_team_size;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_authors: usize,
    pub n_reference: usize,
    pub n_validation: usize,
    pub n_institutions: usize,
    /// Share of institutions present in the ranking table.
    pub ranked_fraction: f64,
    /// Exponential rate of author-list lengths.
    pub team_rate: f64,
    /// Number of disciplines in use, taken in table order.
    pub n_disciplines: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_authors: 200,
            n_reference: 400,
            n_validation: 100,
            n_institutions: 60,
            ranked_fraction: 0.8,
            team_rate: 0.7,
            n_disciplines: Discipline::ALL.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub papers: Vec<RawPaper>,
    pub authors: Vec<RawAuthor>,
    pub rankings: Vec<(String, u32)>,
}

const GENERIC: [&str; 8] = ["model", "analysis", "evidence", "framework", "survey", "method", "dynamics", "review"];

pub fn generate(cfg: &SynthConfig) -> SynthData {
    let mut r = rng::stream(cfg.seed, &[rng::purpose::SYNTH]);
    let n_disc = cfg.n_disciplines.clamp(1, Discipline::ALL.len());
    let disciplines = &Discipline::ALL[..n_disc];
    let ethnicities = StubEthnicityClassifier::DEFAULT_LABELS;
    let n_inst = cfg.n_institutions.max(1);
    let institutions: Vec<String> = (0..n_inst).map(|i| format!("Institute {i}")).collect();
    let n_ranked = ((n_inst as f64) * cfg.ranked_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut rank_order: Vec<usize> = (0..n_inst).collect();
    for i in (1..rank_order.len()).rev() {
        rank_order.swap(i, r.random_range(0..=i));
    }
    let rankings: Vec<(String, u32)> =
        rank_order.iter().take(n_ranked).enumerate().map(|(rank, &i)| (institutions[i].clone(), 3 * rank as u32 + 1)).collect();

    let n_authors = cfg.n_authors.max(1);
    let home: Vec<Discipline> = (0..n_authors).map(|_| *disciplines.choose(&mut r).expect("non-empty")).collect();
    let mut authors: Vec<RawAuthor> = (0..n_authors)
        .map(|i| {
            let n_aff = if r.random::<f64>() < 0.2 { 2 } else { 1 };
            let affiliations = (0..n_aff).map(|_| institutions[r.random_range(0..n_inst)].clone()).collect();
            RawAuthor {
                id: format!("a{i}"),
                name: format!("Author {i}"),
                affiliations,
                papers: Vec::new(),
                ethnicity: Some(ethnicities[r.random_range(0..ethnicities.len())].to_string()),
            }
        })
        .collect();

    let by_discipline: Vec<Vec<usize>> =
        disciplines.iter().map(|d| (0..n_authors).filter(|&a| home[a] == *d).collect()).collect();
    let total = cfg.n_reference + cfg.n_validation;
    let mut papers = Vec::with_capacity(total);
    for p in 0..total {
        let validation = p >= cfg.n_reference;
        let lead = if !validation && p < n_authors { p } else { r.random_range(0..n_authors) };
        let d = home[lead];
        let size = (sample_team_size(&mut r, cfg.team_rate).unwrap_or(1) as usize).min(n_authors);
        let mut team: BTreeSet<usize> = BTreeSet::from([lead]);
        let same = &by_discipline[disciplines.iter().position(|x| *x == d).unwrap_or(0)];
        let mut order = vec![lead];
        while team.len() < size {
            let a = if r.random::<f64>() < 0.6 && same.len() > team.len() {
                same[r.random_range(0..same.len())]
            } else {
                r.random_range(0..n_authors)
            };
            if team.insert(a) {
                order.push(a);
            }
        }
        let lex = KeywordDisciplineClassifier::lexicon(d);
        let mut keywords: Vec<String> = Vec::new();
        while keywords.len() < 3 {
            let w = lex[r.random_range(0..lex.len())].to_string();
            if !keywords.contains(&w) {
                keywords.push(w);
            }
        }
        keywords.push(GENERIC[r.random_range(0..GENERIC.len())].to_string());
        let year = if validation { r.random_range(2010..=2011) } else { r.random_range(2002..=2009) };
        let id = format!("p{p}");
        for &a in &order {
            authors[a].papers.push(id.clone());
        }
        let mut abstract_text = String::new();
        let _ = write!(abstract_text, "We present a {} of {} with attention to {}.", keywords[3], keywords[0], keywords[1]);
        papers.push(RawPaper {
            id,
            title: format!("Notes on {} and {}", keywords[0], keywords[1]),
            abstract_text,
            year: Some(year),
            n_citation: (r.random::<f64>().powi(3) * 200.0) as u64,
            authors: order.iter().map(|&a| format!("a{a}")).collect(),
            keywords,
        });
    }
    SynthData { papers, authors, rankings }
}

impl SynthData {
    pub fn papers_jsonl(&self) -> String {
        jsonl(&self.papers)
    }

    pub fn authors_jsonl(&self) -> String {
        jsonl(&self.authors)
    }

    pub fn rankings_csv(&self) -> String {
        let mut out = String::from("institution,rank\n");
        for (name, rank) in &self.rankings {
            let _ = writeln!(out, "{name},{rank}");
        }
        out
    }

    /// Writes `papers.jsonl`, `authors.jsonl` and `rankings.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("papers.jsonl"), self.papers_jsonl())?;
        std::fs::write(dir.join("authors.jsonl"), self.authors_jsonl())?;
        std::fs::write(dir.join("rankings.csv"), self.rankings_csv())
    }

    /// Runs the records through ingest with the default windows and the
    /// offline classifiers.
    pub fn ingest(&self) -> Result<(Corpus, IngestReport), CorpusError> {
        let ranks = RankTable::from_csv(self.rankings_csv().as_bytes())?;
        ingest(
            Cursor::new(self.papers_jsonl()),
            Cursor::new(self.authors_jsonl()),
            &IngestWindows::default(),
            &KeywordDisciplineClassifier,
            &FrequencyTopicSummarizer::default(),
            &StubEthnicityClassifier::default(),
            &ranks,
        )
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("raw records serialize"));
        out.push('\n');
    }
    out
}

/// Generates and ingests in one step.
pub fn corpus(cfg: &SynthConfig) -> Result<Corpus, CorpusError> {
    generate(cfg).ingest().map(|(c, _)| c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_records_ingest_cleanly() {
        let cfg = SynthConfig { n_authors: 50, n_reference: 120, n_validation: 30, ..Default::default() };
        let data = generate(&cfg);
        let (corpus, report) = data.ingest().unwrap();
        assert_eq!(report.dropped_bad_discipline, 0);
        assert_eq!(corpus.split.reference_db.len(), 120);
        assert_eq!(corpus.split.validation_db.len(), 30);
        assert_eq!(corpus.authors.len(), 50);
        assert!(corpus.split.reference_db.iter().all(|p| p.is_seed()));
        assert!(corpus.split.validation_db.iter().all(|p| (2010..=2011).contains(&p.year)));
        for (i, a) in corpus.authors.iter().enumerate() {
            assert_eq!(a.author_id.0 as usize, i);
        }
        assert!(corpus.authors.iter().any(|a| a.affiliation_rank.is_none()));
        assert!(corpus.authors.iter().any(|a| a.affiliation_rank.is_some()));
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&SynthConfig { seed: 3, ..Default::default() });
        let b = generate(&SynthConfig { seed: 3, ..Default::default() });
        let c = generate(&SynthConfig { seed: 4, ..Default::default() });
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn keyword_classifier_recovers_the_planted_discipline() {
        let data = generate(&SynthConfig { n_reference: 60, n_validation: 0, ..Default::default() });
        let (corpus, _) = data.ingest().unwrap();
        let raw_titles: Vec<&str> = data.papers.iter().map(|p| p.title.as_str()).collect();
        for p in &corpus.split.reference_db {
            assert!(raw_titles.contains(&p.title.as_str()));
            let lex = KeywordDisciplineClassifier::lexicon(p.discipline);
            assert!(lex.iter().any(|w| p.title.contains(w)), "{} -> {}", p.title, p.discipline);
        }
    }
}
