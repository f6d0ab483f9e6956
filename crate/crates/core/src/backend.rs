//! Language-model backends: a chat route (prompt in, text out) and an embed
//! route (text in, vector out).
//!
//! [`MockBackend`] is a pure function of `(input, seed)` and is what every
//! golden test runs against. [`HttpBackend`] speaks the JSON wire format of a
//! live deployment.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend transport failure: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("injected failure on call {0}")]
    Injected(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Mock,
    Live,
}

pub trait Backend: Send + Sync {
    fn chat(&self, prompt: &str) -> Result<String, BackendError>;
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;
    fn mode(&self) -> BackendMode;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn chat(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).chat(prompt)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
    fn mode(&self) -> BackendMode {
        (**self).mode()
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn chat(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).chat(prompt)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
    fn mode(&self) -> BackendMode {
        (**self).mode()
    }
}

/// Marker the reviewer rubric carries; the mock answers such prompts with a
/// score line.
pub const REVIEW_MARKER: &str = "5. Overall Score:";
/// First line of every abstract-generation prompt.
pub const ABSTRACT_MARKER: &str = "### AbstractGeneration";
/// Line prefix of the per-author profile block in abstract prompts.
pub const AUTHOR_LINE: &str = "Author:";
/// Line prefix carrying the planted quality signal through abstract text.
pub const MERIT_LINE: &str = "Merit:";

/// Inclusive integer range the mock reviewer draws from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: u8,
    pub max: u8,
}

impl Default for ScoreRange {
    fn default() -> Self {
        ScoreRange { min: 3, max: 9 }
    }
}

/// Synthetic ground truth for planted-effect experiments.
///
/// The abstract stage turns the team profile into a merit value in (-1, 1):
/// `tanh(eth_weight * (d_eth - eth_center) - rank_weight * (mean_rank - rank_center) / rank_scale + noise * N(0,1))`.
/// Paper embeddings are pulled toward a hub direction in proportion to merit,
/// and every query is pulled toward the same hub, so high-merit papers win
/// retrieval and accumulate citations. Reviewers add `review_weight * merit`
/// to a base score of 6.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffects {
    pub eth_weight: f64,
    pub eth_center: f64,
    pub rank_weight: f64,
    pub rank_center: f64,
    pub rank_scale: f64,
    pub noise: f64,
    pub paper_hub: f64,
    pub paper_hub_gain: f64,
    pub query_hub: f64,
    pub review_weight: f64,
}

impl Default for PlantedEffects {
    fn default() -> Self {
        PlantedEffects {
            eth_weight: 1.5,
            eth_center: 0.6,
            rank_weight: 3.0,
            rank_center: 100.0,
            rank_scale: 100.0,
            noise: 0.2,
            paper_hub: 1.0,
            paper_hub_gain: 1.5,
            query_hub: 2.0,
            review_weight: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    pub seed: u64,
    pub dim: usize,
    pub scores: ScoreRange,
    pub planted: Option<PlantedEffects>,
    /// Simulated per-call latency in microseconds.
    pub latency_us: u64,
    /// Chat returns the prompt unchanged.
    pub echo: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig { seed: 0, dim: 32, scores: ScoreRange::default(), planted: None, latency_us: 0, echo: false }
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    config: MockConfig,
    hub: Vec<f64>,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        assert!(config.dim > 0, "mock embedding dimension must be positive");
        let hub = unit_gaussian(&mut rng::stream(config.seed, &[0x48_5542]), config.dim);
        MockBackend { config, hub }
    }

    pub fn with_seed(seed: u64) -> Self {
        MockBackend::new(MockConfig { seed, ..MockConfig::default() })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn pause(&self) {
        if self.config.latency_us > 0 {
            std::thread::sleep(Duration::from_micros(self.config.latency_us));
        }
    }

    fn review(&self, prompt: &str, rng: &mut impl Rng) -> String {
        let score = match (self.config.planted, parse_merit(prompt)) {
            (Some(p), Some(merit)) => {
                let noise: f64 = StandardNormal.sample(rng);
                (6.0 + p.review_weight * merit + 0.5 * noise).round().clamp(1.0, 10.0) as u8
            }
            _ => rng.random_range(self.config.scores.min..=self.config.scores.max),
        };
        let words = sample_words(prompt, rng, 8);
        format!(
            "Summary: {words}\nStrengths and Weaknesses: assessed across originality, quality, clarity and significance.\nQuestions: none.\nEthical Concerns: none.\nOverall Score: {score}"
        )
    }

    fn abstract_text(&self, prompt: &str, rng: &mut impl Rng) -> String {
        let topic = labelled_tokens(prompt);
        let title: Vec<&str> = topic.iter().take(6).map(String::as_str).collect();
        let body = sample_words(prompt, rng, 24);
        let mut out = format!("Title: On {}\nAbstract: We study {}. {body}.", title.join(" "), topic.join(" "));
        if let Some(p) = self.config.planted {
            let merit = planted_merit(&p, prompt, rng);
            out.push_str(&format!("\n{MERIT_LINE} {merit:.6}"));
        }
        out
    }

    fn speech(&self, prompt: &str, rng: &mut impl Rng) -> String {
        let topic = labelled_tokens(prompt);
        let words = sample_words(prompt, rng, 16);
        if topic.is_empty() {
            words
        } else {
            format!("{} {words}", topic.join(" "))
        }
    }
}

impl Backend for MockBackend {
    fn chat(&self, prompt: &str) -> Result<String, BackendError> {
        self.pause();
        if self.config.echo {
            return Ok(prompt.to_string());
        }
        let mut rng = rng::stream(rng::text_seed(self.config.seed, prompt), &[0x4348_4154]);
        let out = if prompt.contains(REVIEW_MARKER) {
            self.review(prompt, &mut rng)
        } else if prompt.starts_with(ABSTRACT_MARKER) {
            self.abstract_text(prompt, &mut rng)
        } else {
            self.speech(prompt, &mut rng)
        };
        Ok(out)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.pause();
        let mut rng = rng::stream(rng::text_seed(self.config.seed, text), &[0x454d_4244]);
        let mut v = unit_gaussian(&mut rng, self.config.dim);
        if let Some(p) = self.config.planted {
            let pull = match parse_merit(text) {
                Some(merit) => p.paper_hub + p.paper_hub_gain * merit,
                None if is_query(text) => p.query_hub,
                None => 0.0,
            };
            for (x, h) in v.iter_mut().zip(&self.hub) {
                *x += pull * h;
            }
            normalize(&mut v);
        }
        Ok(v)
    }

    fn mode(&self) -> BackendMode {
        BackendMode::Mock
    }
}

/// Prefix of retrieval query texts built by the pipeline.
pub const QUERY_PREFIX: &str = "Query:";

fn is_query(text: &str) -> bool {
    text.starts_with(QUERY_PREFIX)
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Tokens on `Topic:` / `Keywords:` lines, in order, deduplicated.
fn labelled_tokens(prompt: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in prompt.lines() {
        let rest = line.strip_prefix("Topic:").or_else(|| line.strip_prefix("Keywords:"));
        if let Some(rest) = rest {
            for tok in rest.split(|c: char| !c.is_alphanumeric() && c != '-') {
                if !tok.is_empty() && seen.insert(tok.to_lowercase()) {
                    out.push(tok.to_string());
                }
            }
        }
    }
    out
}

fn sample_words(prompt: &str, rng: &mut impl Rng, n: usize) -> String {
    let words: Vec<&str> = prompt.split(|c: char| !c.is_alphanumeric()).filter(|w| w.len() > 3).collect();
    if words.is_empty() {
        return "nothing to add".to_string();
    }
    (0..n).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
}

pub fn parse_merit(text: &str) -> Option<f64> {
    text.lines().find_map(|l| l.trim().strip_prefix(MERIT_LINE)).and_then(|v| v.trim().parse().ok())
}

fn planted_merit(p: &PlantedEffects, prompt: &str, rng: &mut impl Rng) -> f64 {
    let mut ethnicities = Vec::new();
    let mut ranks = Vec::new();
    for line in prompt.lines().filter_map(|l| l.strip_prefix(AUTHOR_LINE)) {
        for part in line.split('|').map(str::trim) {
            if let Some(e) = part.strip_prefix("ethnicity=") {
                ethnicities.push(e.to_string());
            } else if let Some(r) = part.strip_prefix("rank=") {
                if let Ok(r) = r.parse::<f64>() {
                    ranks.push(r);
                }
            }
        }
    }
    let d_eth = crate::metrics::label_entropy(ethnicities.iter().map(String::as_str));
    let rank_term =
        if ranks.is_empty() { 0.0 } else { (ranks.iter().sum::<f64>() / ranks.len() as f64 - p.rank_center) / p.rank_scale };
    let noise: f64 = StandardNormal.sample(rng);
    (p.eth_weight * (d_eth - p.eth_center) - p.rank_weight * rank_term + p.noise * noise).tanh()
}

/// Wraps a backend and fails the calls whose zero-based sequence numbers are
/// listed. Used to script delays.
pub struct FaultyBackend<B> {
    inner: B,
    failing: BTreeSet<u64>,
    calls: AtomicU64,
}

impl<B: Backend> FaultyBackend<B> {
    pub fn new(inner: B, failing: impl IntoIterator<Item = u64>) -> Self {
        FaultyBackend { inner, failing: failing.into_iter().collect(), calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn gate(&self) -> Result<(), BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.failing.contains(&n) {
            Err(BackendError::Injected(n))
        } else {
            Ok(())
        }
    }
}

impl<B: Backend> Backend for FaultyBackend<B> {
    fn chat(&self, prompt: &str) -> Result<String, BackendError> {
        self.gate()?;
        self.inner.chat(prompt)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.gate()?;
        self.inner.embed(text)
    }
    fn mode(&self) -> BackendMode {
        self.inner.mode()
    }
}

/// Request body of the chat route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub response: String,
}

/// Request body of the embed route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embedding: Vec<f64>,
}

/// Live backend: `POST {base}/chat` and `POST {base}/embed` with JSON bodies.
#[cfg(feature = "http")]
pub struct HttpBackend {
    base: String,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpBackend {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        HttpBackend { base: base_url.into().trim_end_matches('/').to_string(), agent: config.into() }
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, route: &str, body: &Req) -> Result<Resp, BackendError> {
        let url = format!("{}/{route}", self.base);
        let mut resp = self.agent.post(&url).send_json(body).map_err(|e| BackendError::Transport(format!("{url}: {e}")))?;
        resp.body_mut().read_json::<Resp>().map_err(|e| BackendError::Malformed(format!("{url}: {e}")))
    }
}

#[cfg(feature = "http")]
impl Backend for HttpBackend {
    fn chat(&self, prompt: &str) -> Result<String, BackendError> {
        let r: ChatResponse = self.post("chat", &ChatRequest { prompt: prompt.to_string() })?;
        Ok(r.response)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let r: EmbedResponse = self.post("embed", &EmbedRequest { text: text.to_string() })?;
        Ok(r.embedding)
    }

    fn mode(&self) -> BackendMode {
        BackendMode::Live
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_is_pure_in_prompt_and_seed() {
        let a = MockBackend::with_seed(3);
        let b = MockBackend::with_seed(3);
        let c = MockBackend::with_seed(4);
        let p = "### TopicDiscussion\nTopic: coral reef acidification\nsay something useful";
        assert_eq!(a.chat(p).unwrap(), b.chat(p).unwrap());
        assert_ne!(a.chat(p).unwrap(), c.chat(p).unwrap());
        assert_eq!(a.embed("x").unwrap(), b.embed("x").unwrap());
    }

    #[test]
    fn mock_echoes_topic_tokens() {
        let m = MockBackend::with_seed(1);
        let out = m.chat("### IdeaGeneration\nTopic: quantum annealing schedules\n").unwrap();
        for tok in ["quantum", "annealing", "schedules"] {
            assert!(out.contains(tok), "{out}");
        }
    }

    #[test]
    fn mock_embeddings_are_unit_length() {
        let m = MockBackend::new(MockConfig { dim: 16, ..MockConfig::default() });
        let v = m.embed("hello").unwrap();
        assert_eq!(v.len(), 16);
        let n: f64 = v.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mock_review_carries_a_score_in_range() {
        let m = MockBackend::with_seed(9);
        for i in 0..50 {
            let out = m.chat(&format!("rubric {REVIEW_MARKER} paper {i}")).unwrap();
            let line = out.lines().last().unwrap();
            let n: u8 = line.strip_prefix("Overall Score: ").unwrap().parse().unwrap();
            assert!((3..=9).contains(&n));
        }
    }

    #[test]
    fn planted_merit_tracks_profile() {
        let p = PlantedEffects { noise: 0.0, ..PlantedEffects::default() };
        let m = MockBackend::new(MockConfig { planted: Some(p), ..MockConfig::default() });
        let diverse = format!(
            "{ABSTRACT_MARKER}\nTopic: x\n{AUTHOR_LINE} a | ethnicity=A | rank=20\n{AUTHOR_LINE} b | ethnicity=B | rank=20\n{AUTHOR_LINE} c | ethnicity=C | rank=20"
        );
        let uniform = format!(
            "{ABSTRACT_MARKER}\nTopic: x\n{AUTHOR_LINE} a | ethnicity=A | rank=180\n{AUTHOR_LINE} b | ethnicity=A | rank=180"
        );
        let hi = parse_merit(&m.chat(&diverse).unwrap()).unwrap();
        let lo = parse_merit(&m.chat(&uniform).unwrap()).unwrap();
        assert!(hi > 0.5 && lo < -0.5, "{hi} {lo}");
    }

    #[test]
    fn faulty_backend_fails_listed_calls() {
        let f = FaultyBackend::new(MockBackend::with_seed(0), [1, 2]);
        assert!(f.chat("a").is_ok());
        assert_eq!(f.chat("a"), Err(BackendError::Injected(1)));
        assert!(f.embed("a").is_err());
        assert!(f.embed("a").is_ok());
        assert_eq!(f.calls(), 4);
    }
}
