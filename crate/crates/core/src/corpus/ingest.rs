//! Streaming JSONL ingestion.
//!
//! `papers.jsonl`, one object per line:
//! `{"id": str, "title": str, "abstract": str?, "year": int?, "n_citation": int?, "authors": [str]?, "keywords": [str]?}`
//!
//! `authors.jsonl`, one object per line:
//! `{"id": str, "name": str, "affiliations": [str]?, "papers": [str], "ethnicity": str?}`
//!
//! Papers must be ingested first; author profiles are derived from the
//! papers they link that fall inside the author window.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::{
    infer_ethnicity, AuthorId, AuthorRecord, Corpus, CorpusError, CorpusSplit, Discipline, DisciplineClassifier,
    EthnicityClassifier, PaperId, PaperRecord, RankTable, TopicSummarizer, SEED_YEAR,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPaper {
    pub id: String,
    pub title: String,
    #[serde(default, rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub year: Option<i32>,
    #[serde(default)]
    pub n_citation: u64,
    #[serde(default)]
    pub authors: Vec<String>,
    #[serde(default)]
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAuthor {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub affiliations: Vec<String>,
    #[serde(default)]
    pub papers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ethnicity: Option<String>,
}

/// Inclusive year windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestWindows {
    pub reference: (i32, i32),
    pub validation: (i32, i32),
    /// Papers used to build author profiles.
    pub author: (i32, i32),
}

impl Default for IngestWindows {
    fn default() -> Self {
        IngestWindows { reference: (2002, 2009), validation: (2010, 2011), author: (2002, 2009) }
    }
}

fn within(year: i32, (lo, hi): (i32, i32)) -> bool {
    (lo..=hi).contains(&year)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub papers_read: usize,
    pub reference_papers: usize,
    pub validation_papers: usize,
    pub dropped_out_of_window: usize,
    pub dropped_missing_year: usize,
    pub dropped_bad_discipline: usize,
    pub authors_read: usize,
    pub authors_kept: usize,
    pub authors_skipped_no_papers: usize,
    pub authors_duplicate: usize,
    pub rank_misses: u64,
    pub unresolved_author_links: usize,
}

#[derive(Debug, Clone)]
struct StagedPaper {
    original_year: i32,
    discipline: Discipline,
    citations: u64,
    raw_authors: Vec<String>,
    keywords: Vec<String>,
    /// Index into `reference_db` / `validation_db`, when windowed in.
    slot: Option<(bool, usize)>,
}

#[derive(Debug, Clone)]
pub struct PaperIngest {
    pub split: CorpusSplit,
    pub report: IngestReport,
    staged: HashMap<String, StagedPaper>,
}

#[derive(Debug, Clone)]
pub struct AuthorIngest {
    pub authors: Vec<AuthorRecord>,
    pub raw_ids: BTreeMap<String, AuthorId>,
    /// Raw paper id to the kept authors that link it.
    linkers: BTreeMap<String, BTreeSet<AuthorId>>,
}

fn lines<R: BufRead>(reader: R, source_name: &'static str) -> impl Iterator<Item = Result<(usize, String), CorpusError>> {
    reader.lines().enumerate().filter_map(move |(i, line)| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(Ok((i, l))),
        Err(e) => Some(Err(CorpusError::Malformed { source_name, index: i, message: e.to_string() })),
    })
}

/// Classifies and windows papers. Ids are assigned in stream order.
pub fn ingest_papers<R: BufRead>(
    reader: R,
    classifier: &dyn DisciplineClassifier,
    windows: &IngestWindows,
) -> Result<PaperIngest, CorpusError> {
    let mut split = CorpusSplit::default();
    let mut report = IngestReport::default();
    let mut staged = HashMap::new();
    let mut next_id = 0u64;
    for item in lines(reader, "papers") {
        let (index, line) = item?;
        let raw: RawPaper = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            source_name: "papers",
            index,
            message: e.to_string(),
        })?;
        report.papers_read += 1;
        let Some(year) = raw.year else {
            report.dropped_missing_year += 1;
            continue;
        };
        let label = classifier.classify(&raw.title, &raw.keywords);
        let Some(discipline) = Discipline::from_label(&label) else {
            log::warn!("papers record {index}: classifier label {label:?} is not a discipline, record rejected");
            report.dropped_bad_discipline += 1;
            continue;
        };
        let reference = within(year, windows.reference);
        let validation = !reference && within(year, windows.validation);
        let slot = if reference || validation {
            let record = PaperRecord {
                paper_id: PaperId(next_id),
                title: raw.title.clone(),
                abstract_text: raw.abstract_text.clone(),
                year: if reference { SEED_YEAR } else { year },
                citation_count: raw.n_citation,
                author_ids: Vec::new(),
                cited_paper_ids: None,
                discipline,
            };
            next_id += 1;
            let db = if reference { &mut split.reference_db } else { &mut split.validation_db };
            db.push(record);
            Some((reference, db.len() - 1))
        } else {
            report.dropped_out_of_window += 1;
            None
        };
        staged.insert(
            raw.id,
            StagedPaper {
                original_year: year,
                discipline,
                citations: raw.n_citation,
                raw_authors: raw.authors,
                keywords: raw.keywords,
                slot,
            },
        );
    }
    report.reference_papers = split.reference_db.len();
    report.validation_papers = split.validation_db.len();
    Ok(PaperIngest { split, report, staged })
}

fn most_frequent(disciplines: &[Discipline]) -> Discipline {
    let mut counts = [0usize; 19];
    for d in disciplines {
        counts[d.index()] += 1;
    }
    let best = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map(|(i, _)| i);
    Discipline::ALL[best.unwrap_or(0)]
}

/// Builds anonymized author profiles from the author window of `papers`.
pub fn ingest_authors<R: BufRead>(
    reader: R,
    papers: &PaperIngest,
    windows: &IngestWindows,
    summarizer: &dyn TopicSummarizer,
    ethnicity: &dyn EthnicityClassifier,
    ranks: &RankTable,
    report: &mut IngestReport,
) -> Result<AuthorIngest, CorpusError> {
    let misses_before = ranks.misses();
    let mut authors = Vec::new();
    let mut raw_ids = BTreeMap::new();
    let mut window_links: Vec<Vec<String>> = Vec::new();
    for item in lines(reader, "authors") {
        let (index, line) = item?;
        let raw: RawAuthor = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            source_name: "authors",
            index,
            message: e.to_string(),
        })?;
        report.authors_read += 1;
        if raw.name.trim().is_empty() {
            return Err(CorpusError::Malformed { source_name: "authors", index, message: "empty name".into() });
        }
        if raw_ids.contains_key(&raw.id) {
            log::warn!("authors record {index}: duplicate id {:?} ignored", raw.id);
            report.authors_duplicate += 1;
            continue;
        }
        let linked: Vec<(&String, &StagedPaper)> = raw
            .papers
            .iter()
            .filter_map(|p| papers.staged.get(p).map(|s| (p, s)))
            .filter(|(_, s)| within(s.original_year, windows.author))
            .collect();
        if linked.is_empty() {
            log::warn!("authors record {index}: no linked papers in the author window, skipped");
            report.authors_skipped_no_papers += 1;
            continue;
        }
        let id = AuthorId(authors.len() as u32);
        let disciplines: Vec<Discipline> = linked.iter().map(|(_, s)| s.discipline).collect();
        let keywords: Vec<String> = linked.iter().flat_map(|(_, s)| s.keywords.iter().cloned()).collect();
        let ethnicity = match raw.ethnicity.as_deref().map(str::trim) {
            Some(e) if !e.is_empty() => e.to_string(),
            _ => infer_ethnicity(&raw.name, ethnicity)?,
        };
        let affiliation_rank = raw.affiliations.iter().filter_map(|a| ranks.get(a)).min();
        authors.push(AuthorRecord {
            author_id: id,
            display_name: format!("Scientist {}", id.0 + 1),
            ethnicity,
            affiliations: raw.affiliations,
            affiliation_rank,
            citation_count: linked.iter().map(|(_, s)| s.citations).sum(),
            coauthor_ids: BTreeSet::new(),
            discipline: most_frequent(&disciplines),
            research_topics: summarizer.summarize(&keywords),
        });
        window_links.push(linked.into_iter().map(|(p, _)| p.clone()).collect());
        raw_ids.insert(raw.id, id);
    }
    report.authors_kept = authors.len();
    report.rank_misses += ranks.misses() - misses_before;

    let mut linkers: BTreeMap<String, BTreeSet<AuthorId>> = BTreeMap::new();
    for (author, links) in authors.iter().zip(&window_links) {
        for p in links {
            linkers.entry(p.clone()).or_default().insert(author.author_id);
        }
    }
    for (i, links) in window_links.iter().enumerate() {
        let me = AuthorId(i as u32);
        let mut co = BTreeSet::new();
        for p in links {
            co.extend(linkers.get(p).into_iter().flatten().copied());
            co.extend(papers.staged[p].raw_authors.iter().filter_map(|r| raw_ids.get(r).copied()));
        }
        co.remove(&me);
        authors[i].coauthor_ids = co;
    }
    Ok(AuthorIngest { authors, raw_ids, linkers })
}

/// Attaches anonymized author ids to every windowed paper: the paper's own
/// author list first, then any further kept authors that link it.
fn attach_authors(papers: &mut PaperIngest, authors: &AuthorIngest, report: &mut IngestReport) {
    let mut keys: Vec<&String> = papers.staged.keys().collect();
    keys.sort();
    for key in keys {
        let staged = &papers.staged[key];
        let Some((reference, idx)) = staged.slot else { continue };
        let mut ids = Vec::new();
        for r in &staged.raw_authors {
            match authors.raw_ids.get(r) {
                Some(id) if !ids.contains(id) => ids.push(*id),
                Some(_) => {}
                None => report.unresolved_author_links += 1,
            }
        }
        for id in authors.linkers.get(key).into_iter().flatten() {
            if !ids.contains(id) {
                ids.push(*id);
            }
        }
        let db = if reference { &mut papers.split.reference_db } else { &mut papers.split.validation_db };
        db[idx].author_ids = ids;
    }
}

/// Full ingest: papers, then authors, then author attachment.
#[allow(clippy::too_many_arguments)]
pub fn ingest<P: BufRead, A: BufRead>(
    papers: P,
    authors: A,
    windows: &IngestWindows,
    classifier: &dyn DisciplineClassifier,
    summarizer: &dyn TopicSummarizer,
    ethnicity: &dyn EthnicityClassifier,
    ranks: &RankTable,
) -> Result<(Corpus, IngestReport), CorpusError> {
    let mut paper_ingest = ingest_papers(papers, classifier, windows)?;
    let mut report = paper_ingest.report.clone();
    let author_ingest = ingest_authors(authors, &paper_ingest, windows, summarizer, ethnicity, ranks, &mut report)?;
    attach_authors(&mut paper_ingest, &author_ingest, &mut report);
    Ok((Corpus::new(author_ingest.authors, paper_ingest.split), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{FrequencyTopicSummarizer, KeywordDisciplineClassifier, StubEthnicityClassifier};

    struct Fixed(&'static str);
    impl DisciplineClassifier for Fixed {
        fn classify(&self, _: &str, _: &[String]) -> String {
            self.0.to_string()
        }
    }

    fn paper(id: &str, year: Option<i32>, cites: u64, authors: &[&str], kw: &[&str]) -> String {
        serde_json::to_string(&RawPaper {
            id: id.into(),
            title: format!("title {id}"),
            abstract_text: String::new(),
            year,
            n_citation: cites,
            authors: authors.iter().map(|s| s.to_string()).collect(),
            keywords: kw.iter().map(|s| s.to_string()).collect(),
        })
        .unwrap()
    }

    fn author(id: &str, name: &str, papers: &[&str]) -> String {
        serde_json::to_string(&RawAuthor {
            id: id.into(),
            name: name.into(),
            affiliations: vec!["Uni X".into()],
            papers: papers.iter().map(|s| s.to_string()).collect(),
            ethnicity: None,
        })
        .unwrap()
    }

    fn run(papers: &[String], authors: &[String]) -> (Corpus, IngestReport) {
        let ranks = RankTable::from_pairs([("Uni X", 7)]);
        ingest(
            papers.join("\n").as_bytes(),
            authors.join("\n").as_bytes(),
            &IngestWindows::default(),
            &KeywordDisciplineClassifier,
            &FrequencyTopicSummarizer::default(),
            &StubEthnicityClassifier::default(),
            &ranks,
        )
        .unwrap()
    }

    #[test]
    fn windows_split_papers() {
        let papers = [
            paper("a", Some(2005), 1, &[], &[]),
            paper("b", Some(2010), 1, &[], &[]),
            paper("c", Some(1999), 1, &[], &[]),
            paper("d", None, 1, &[], &[]),
            paper("e", Some(2011), 1, &[], &[]),
        ];
        let (c, r) = run(&papers, &[]);
        assert_eq!(c.split.reference_db.len(), 1);
        assert_eq!(c.split.reference_db[0].year, -1);
        assert!(c.split.reference_db[0].is_seed());
        assert_eq!(c.split.validation_db.iter().map(|p| p.year).collect::<Vec<_>>(), vec![2010, 2011]);
        assert_eq!(r.dropped_out_of_window, 1);
        assert_eq!(r.dropped_missing_year, 1);
    }

    #[test]
    fn author_profile_derivation() {
        let papers = [
            paper("p1", Some(2003), 10, &["a1", "a2"], &["cognitive", "memory"]),
            paper("p2", Some(2004), 20, &["a1"], &["attention"]),
            paper("p3", Some(2005), 5, &["a1", "a3"], &["emotion"]),
            paper("p4", Some(2006), 100, &["a2"], &["gene"]),
        ];
        let authors = [
            author("a1", "Ada Lovelace", &["p1", "p2", "p3"]),
            author("a2", "Alan Turing", &["p1", "p4"]),
            author("a3", "Grace Hopper", &["p3"]),
            author("a4", "No Papers", &[]),
        ];
        let (c, r) = run(&papers, &authors);
        assert_eq!(r.authors_kept, 3);
        assert_eq!(r.authors_skipped_no_papers, 1);
        let a1 = &c.authors[0];
        assert_eq!(a1.display_name, "Scientist 1");
        assert_eq!(a1.citation_count, 35);
        assert_eq!(a1.discipline, Discipline::Psychology);
        assert_eq!(a1.affiliation_rank, Some(7));
        assert_eq!(a1.coauthor_ids, BTreeSet::from([AuthorId(1), AuthorId(2)]));
        assert_eq!(c.authors[2].coauthor_ids, BTreeSet::from([AuthorId(0)]));
        assert_eq!(c.split.reference_db[0].author_ids, vec![AuthorId(0), AuthorId(1)]);
    }

    #[test]
    fn out_of_set_label_rejects_record() {
        let papers = [paper("a", Some(2005), 1, &[], &[])];
        let mut p = ingest_papers(papers.join("\n").as_bytes(), &Fixed("Alchemy"), &IngestWindows::default()).unwrap();
        assert_eq!(p.report.dropped_bad_discipline, 1);
        assert!(p.split.reference_db.is_empty());
        p = ingest_papers(papers.join("\n").as_bytes(), &Fixed("  medicine"), &IngestWindows::default()).unwrap();
        assert_eq!(p.split.reference_db[0].discipline, Discipline::Medicine);
    }

    #[test]
    fn malformed_line_reports_its_index() {
        let text = format!("{}\n\n{{not json", paper("a", Some(2005), 1, &[], &[]));
        let err = ingest_papers(text.as_bytes(), &KeywordDisciplineClassifier, &IngestWindows::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { index: 2, .. }), "{err}");
    }

    #[test]
    fn ties_in_discipline_go_to_table_order() {
        assert_eq!(most_frequent(&[Discipline::Physics, Discipline::Art]), Discipline::Art);
        assert_eq!(most_frequent(&[Discipline::Physics, Discipline::Art, Discipline::Physics]), Discipline::Physics);
    }
}
