//! Peer review of submissions and publication of accepted papers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::channel::{Inference, Origin};
use crate::corpus::{AuthorId, CorpusSplit, Discipline, PaperId, PaperRecord};
use crate::index::{EmbeddingVector, IndexError, PaperIndex};
use crate::society::{Society, Stage, TeamId};

/// The multidisciplinary reviewer rubric, verbatim.
pub const REVIEWER_RUBRIC: &str = include_str!("../templates/reviewer.txt");
const REVIEW_TEMPLATE: &str = include_str!("../templates/review.txt");
const REPROMPT: &str =
    "\n\nYour previous answer did not contain a score. Reply with exactly one line:\nOverall Score: <integer from 1 to 10>";
/// Score assigned when a reviewer's answer stays unparseable after a re-prompt.
pub const FALLBACK_SCORE: u8 = 5;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("submission {submission}: only {available} eligible reviewers, {needed} needed")]
    PoolTooSmall { submission: u64, available: usize, needed: usize },
    #[error("submission {0} was already published")]
    Duplicate(u64),
    #[error("submission {0} was not accepted")]
    NotAccepted(u64),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub submission_id: u64,
    pub team_id: TeamId,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    /// Leader first.
    pub author_ids: Vec<AuthorId>,
    pub cited_paper_ids: Vec<PaperId>,
    pub discipline: Discipline,
}

impl Submission {
    pub fn embedding_text(&self) -> String {
        format!("{}\n{}", self.title, self.abstract_text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcceptRule {
    #[default]
    Mean,
    Median,
    All,
}

impl fmt::Display for AcceptRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AcceptRule::Mean => "mean",
            AcceptRule::Median => "median",
            AcceptRule::All => "all",
        })
    }
}

impl FromStr for AcceptRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(AcceptRule::Mean),
            "median" => Ok(AcceptRule::Median),
            "all" => Ok(AcceptRule::All),
            other => Err(format!("unknown accept rule {other:?} (expected mean, median or all)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

/// Strictly greater than `threshold` under the chosen aggregate.
pub fn decide(scores: &[u8], rule: AcceptRule, threshold: f64) -> Decision {
    if scores.is_empty() {
        return Decision::Reject;
    }
    let pass = match rule {
        AcceptRule::Mean => {
            let sum: u32 = scores.iter().map(|&s| u32::from(s)).sum();
            f64::from(sum) > threshold * scores.len() as f64
        }
        AcceptRule::Median => {
            let mut s = scores.to_vec();
            s.sort_unstable();
            let n = s.len();
            let median = if n % 2 == 1 { f64::from(s[n / 2]) } else { (f64::from(s[n / 2 - 1]) + f64::from(s[n / 2])) / 2.0 };
            median > threshold
        }
        AcceptRule::All => scores.iter().all(|&s| f64::from(s) > threshold),
    };
    if pass {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReviewConfig {
    pub n_reviewers: usize,
    pub accept_threshold: f64,
    pub accept_rule: AcceptRule,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        ReviewConfig { n_reviewers: 3, accept_threshold: 5.0, accept_rule: AcceptRule::Mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewBundle {
    pub submission_id: u64,
    pub reviewer_ids: Vec<AuthorId>,
    pub scores: Vec<u8>,
    pub comments: Vec<String>,
    pub decision: Decision,
    pub decided_epoch: u32,
    /// Reviewers whose score fell back to the default.
    pub parse_failures: u32,
}

/// Last `Overall Score: n` in the text with `n` in 1..=10.
pub fn parse_score(text: &str) -> Option<u8> {
    text.lines().rev().find_map(|line| {
        let idx = line.find("Overall Score:")?;
        let rest = line[idx + "Overall Score:".len()..].trim();
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        digits.parse::<u8>().ok().filter(|n| (1..=10).contains(n))
    })
}

pub fn review_prompt(sub: &Submission) -> String {
    REVIEW_TEMPLATE
        .replace("{{rubric}}", REVIEWER_RUBRIC.trim_end())
        .replace("{{title}}", &sub.title)
        .replace("{{abstract}}", &sub.abstract_text)
}

/// Draws `n` distinct non-authors, restricted to the submission's discipline
/// when at least `n` such agents exist.
pub fn sample_reviewers(sub: &Submission, society: &Society, n: usize, rng: &mut impl Rng) -> Result<Vec<AuthorId>, ReviewError> {
    let authors: BTreeSet<AuthorId> = sub.author_ids.iter().copied().collect();
    let eligible: Vec<AuthorId> = society.agents.iter().map(|a| a.id()).filter(|id| !authors.contains(id)).collect();
    let matched: Vec<AuthorId> =
        eligible.iter().copied().filter(|id| society.agents[id.0 as usize].profile.discipline == sub.discipline).collect();
    let pool = if matched.len() >= n { matched } else { eligible };
    if pool.len() < n {
        return Err(ReviewError::PoolTooSmall { submission: sub.submission_id, available: pool.len(), needed: n });
    }
    Ok(rand::seq::index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

/// Runs the reviewers' prompts and aggregates their scores.
pub fn review_submission(
    sub: &Submission,
    society: &Society,
    inference: &dyn Inference,
    cfg: &ReviewConfig,
    epoch: u32,
    rng: &mut impl Rng,
) -> Result<ReviewBundle, ReviewError> {
    let reviewers = sample_reviewers(sub, society, cfg.n_reviewers, rng)?;
    let prompt = review_prompt(sub);
    let mut scores = Vec::with_capacity(reviewers.len());
    let mut comments = Vec::with_capacity(reviewers.len());
    let mut parse_failures = 0;
    for &r in &reviewers {
        let origin = Origin { team_id: Some(sub.team_id), agent_id: r, stage: Some(Stage::PeerReview) };
        let mut answer = inference.chat(origin, &prompt)?;
        let mut score = parse_score(&answer);
        if score.is_none() {
            answer = inference.chat(origin, &format!("{prompt}{REPROMPT}"))?;
            score = parse_score(&answer);
        }
        let score = score.unwrap_or_else(|| {
            log::warn!("submission {}: reviewer {r} gave no parseable score, using {FALLBACK_SCORE}", sub.submission_id);
            parse_failures += 1;
            FALLBACK_SCORE
        });
        scores.push(score);
        comments.push(answer);
    }
    Ok(ReviewBundle {
        submission_id: sub.submission_id,
        reviewer_ids: reviewers,
        decision: decide(&scores, cfg.accept_rule, cfg.accept_threshold),
        scores,
        comments,
        decided_epoch: epoch,
        parse_failures,
    })
}

/// Tracks which submissions have been published, for idempotency.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Publisher {
    pub published: BTreeMap<u64, PaperId>,
}

impl Publisher {
    /// Adds an accepted submission to the reference database and the index,
    /// and links its authors as co-authors.
    #[allow(clippy::too_many_arguments)]
    pub fn publish_accepted(
        &mut self,
        sub: &Submission,
        bundle: &ReviewBundle,
        split: &mut CorpusSplit,
        index: &mut PaperIndex,
        society: &mut Society,
        embedding: EmbeddingVector,
        epoch: u32,
    ) -> Result<PaperRecord, ReviewError> {
        if bundle.decision != Decision::Accept || bundle.submission_id != sub.submission_id {
            return Err(ReviewError::NotAccepted(sub.submission_id));
        }
        if self.published.contains_key(&sub.submission_id) {
            return Err(ReviewError::Duplicate(sub.submission_id));
        }
        let paper = PaperRecord {
            paper_id: split.next_paper_id(),
            title: sub.title.clone(),
            abstract_text: sub.abstract_text.clone(),
            year: epoch as i32,
            citation_count: 0,
            author_ids: sub.author_ids.clone(),
            cited_paper_ids: Some(sub.cited_paper_ids.clone()),
            discipline: sub.discipline,
        };
        index.insert(paper.paper_id, embedding)?;
        split.reference_db.push(paper.clone());
        self.published.insert(sub.submission_id, paper.paper_id);
        for (i, &a) in sub.author_ids.iter().enumerate() {
            for &b in &sub.author_ids[i + 1..] {
                society.link_coauthors(a, b);
            }
        }
        Ok(paper)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, MockBackend};
    use crate::channel::Direct;
    use crate::corpus::AuthorRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn profile(i: u32, d: Discipline) -> AuthorRecord {
        AuthorRecord {
            author_id: AuthorId(i),
            display_name: format!("Scientist {}", i + 1),
            ethnicity: "Nordic".into(),
            affiliations: vec![],
            affiliation_rank: None,
            citation_count: 0,
            coauthor_ids: BTreeSet::new(),
            discipline: d,
            research_topics: vec![],
        }
    }

    fn submission(authors: &[u32], d: Discipline) -> Submission {
        Submission {
            submission_id: 7,
            team_id: TeamId(7),
            title: "On things".into(),
            abstract_text: "We study things.".into(),
            author_ids: authors.iter().map(|&a| AuthorId(a)).collect(),
            cited_paper_ids: vec![PaperId(1)],
            discipline: d,
        }
    }

    #[test]
    fn mean_rule_examples() {
        assert_eq!(decide(&[6, 6, 6], AcceptRule::Mean, 5.0), Decision::Accept);
        assert_eq!(decide(&[5, 5, 5], AcceptRule::Mean, 5.0), Decision::Reject);
        assert_eq!(decide(&[4, 6, 7], AcceptRule::Mean, 5.0), Decision::Accept);
        assert_eq!(decide(&[4, 6, 6], AcceptRule::Mean, 5.0), Decision::Accept);
        assert_eq!(decide(&[4, 5, 6], AcceptRule::Mean, 5.0), Decision::Reject);
    }

    #[test]
    fn median_and_all_rules() {
        assert_eq!(decide(&[1, 6, 6], AcceptRule::Median, 5.0), Decision::Accept);
        assert_eq!(decide(&[10, 10, 5], AcceptRule::Median, 5.0), Decision::Accept);
        assert_eq!(decide(&[10, 5, 4], AcceptRule::Median, 5.0), Decision::Reject);
        assert_eq!(decide(&[10, 10, 5], AcceptRule::All, 5.0), Decision::Reject);
        assert_eq!(decide(&[6, 6, 6], AcceptRule::All, 5.0), Decision::Accept);
        assert_eq!("MEDIAN".parse::<AcceptRule>().unwrap(), AcceptRule::Median);
        assert!("max".parse::<AcceptRule>().is_err());
    }

    #[test]
    fn score_parsing() {
        assert_eq!(parse_score("blah\nOverall Score: 7"), Some(7));
        assert_eq!(parse_score("5. Overall Score: 10 (award)"), Some(10));
        assert_eq!(parse_score("Overall Score: 11"), None);
        assert_eq!(parse_score("Overall Score: 0"), None);
        assert_eq!(parse_score("no score here"), None);
    }

    #[test]
    fn rubric_is_shipped_whole() {
        assert!(REVIEWER_RUBRIC.starts_with("You are a researcher from a multidisciplinary background"));
        assert!(REVIEWER_RUBRIC.contains("10: Award Quality"));
        assert!(REVIEWER_RUBRIC.trim_end().ends_with(
            "1: Very Strong Reject:\n  A paper with trivial results, poor evaluation, or unaddressed ethical issues."
        ));
        assert!(review_prompt(&submission(&[0], Discipline::Art)).contains(crate::backend::REVIEW_MARKER));
    }

    #[test]
    fn reviewers_exclude_authors_and_prefer_discipline() {
        let mut profiles: Vec<_> = (0..10).map(|i| profile(i, Discipline::Art)).collect();
        for p in profiles.iter_mut().skip(6) {
            p.discipline = Discipline::Physics;
        }
        let society = Society::new(profiles, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let art = sample_reviewers(&submission(&[0, 1], Discipline::Art), &society, 3, &mut rng).unwrap();
            assert!(art.iter().all(|r| (2..6).contains(&r.0)));
            // Only three physicists exist and one is an author: fall back to everyone.
            let phys = sample_reviewers(&submission(&[6], Discipline::Physics), &society, 3, &mut rng).unwrap();
            assert!(phys.iter().all(|r| r.0 != 6));
            assert_eq!(phys.iter().collect::<BTreeSet<_>>().len(), 3);
        }
    }

    #[test]
    fn small_pool_is_an_error() {
        let society = Society::new((0..4).map(|i| profile(i, Discipline::Art)).collect(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = sample_reviewers(&submission(&[0, 1], Discipline::Art), &society, 3, &mut rng).unwrap_err();
        assert!(matches!(err, ReviewError::PoolTooSmall { available: 2, needed: 3, .. }));
    }

    struct Scripted(std::sync::Mutex<Vec<&'static str>>);
    impl Backend for Scripted {
        fn chat(&self, _: &str) -> Result<String, BackendError> {
            Ok(self.0.lock().unwrap().remove(0).to_string())
        }
        fn embed(&self, _: &str) -> Result<Vec<f64>, BackendError> {
            Ok(vec![1.0])
        }
        fn mode(&self) -> crate::backend::BackendMode {
            crate::backend::BackendMode::Mock
        }
    }

    #[test]
    fn unparseable_score_reprompts_once_then_defaults() {
        let society = Society::new((0..6).map(|i| profile(i, Discipline::Art)).collect(), 1).unwrap();
        let backend =
            Scripted(std::sync::Mutex::new(vec!["Overall Score: 9", "garbage", "Overall Score: 8", "garbage", "still garbage"]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bundle = review_submission(
            &submission(&[0], Discipline::Art),
            &society,
            &Direct(backend),
            &ReviewConfig::default(),
            12,
            &mut rng,
        )
        .unwrap();
        assert_eq!(bundle.scores, vec![9, 8, 5]);
        assert_eq!(bundle.parse_failures, 1);
        assert_eq!(bundle.decision, Decision::Accept);
        assert_eq!(bundle.decided_epoch, 12);
    }

    #[test]
    fn publish_sets_year_zero_citations_and_links_coauthors() {
        let mut society = Society::new((0..5).map(|i| profile(i, Discipline::Art)).collect(), 1).unwrap();
        let backend = MockBackend::with_seed(4);
        let sub = submission(&[0, 3, 4], Discipline::Art);
        let mut split = CorpusSplit::default();
        let mut index = PaperIndex::new(32);
        let bundle = ReviewBundle {
            submission_id: 7,
            reviewer_ids: vec![AuthorId(1), AuthorId(2), AuthorId(1)],
            scores: vec![6, 6, 6],
            comments: vec![String::new(); 3],
            decision: Decision::Accept,
            decided_epoch: 17,
            parse_failures: 0,
        };
        let emb = EmbeddingVector::new(backend.embed(&sub.embedding_text()).unwrap()).unwrap();
        let mut publisher = Publisher::default();
        let paper = publisher.publish_accepted(&sub, &bundle, &mut split, &mut index, &mut society, emb.clone(), 17).unwrap();
        assert_eq!(paper.year, 17);
        assert_eq!(paper.citation_count, 0);
        assert_eq!(split.reference_db.len(), 1);
        let top = index.retrieve(&emb, 1, crate::Execution::Sequential).unwrap();
        assert_eq!(top[0].0, paper.paper_id);
        for (a, b) in [(0, 3), (0, 4), (3, 4)] {
            assert!(society.agents[a].profile.coauthor_ids.contains(&AuthorId(b as u32)));
            assert!(society.agents[b].profile.coauthor_ids.contains(&AuthorId(a as u32)));
        }
        let again = publisher.publish_accepted(&sub, &bundle, &mut split, &mut index, &mut society, emb, 18);
        assert!(matches!(again, Err(ReviewError::Duplicate(7))));
        assert_eq!(split.reference_db.len(), 1);
    }
}
