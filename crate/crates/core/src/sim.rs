//! The epoch loop, run artifacts, checkpoints and resume.
//!
//! Each epoch advances every live team by one stage against a frozen view of
//! the world, lets eligible agents form new teams, and then commits all
//! effects in team order. Output files in the run directory:
//!
//! | file | content |
//! |---|---|
//! | `config.toml` | the configuration the run was started with |
//! | `actions.jsonl` | one [`crate::pipeline::StageAction`] per line |
//! | `reviews.jsonl` | one [`ReviewRecord`] per line |
//! | `citations_events.csv` | `epoch,team_id,paper_id` per citation |
//! | `metrics.csv`, `correlations.csv` | see [`crate::metrics`] |
//! | `society.json` | agents and teams |
//! | `corpus.json` | the final corpus snapshot, published papers included |
//! | `checkpoint.json` | resumable state, one hashed section per component |
//! | `manifest.json` | config, seed and the SHA-256 of every other file |

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendMode, MockBackend, MockConfig};
use crate::channel::{Channel, ChannelConfig, Inference};
use crate::corpus::{AuthorId, AuthorRecord, Corpus, CorpusError, CorpusSplit, PaperRecord};
use crate::index::{build_index, CitationLedger, IndexError, IndexSnapshot, PaperIndex, CITATION_EVENTS_FILE};
use crate::metrics::{self, CorrelationReport, MetricsError, MetricsRow, Source};
use crate::par::{self, Execution};
use crate::pipeline::{advance_team, PipelineConfig, StageError, TeamStep, World};
use crate::review::{AcceptRule, Decision, Publisher, ReviewConfig, ReviewError};
use crate::rng;
use crate::society::{sample_team_size, SelectionPolicy, Society, SocietyError, Stage, TeamId};

pub const CONFIG_FILE: &str = "config.toml";
pub const ACTIONS_FILE: &str = "actions.jsonl";
pub const REVIEWS_FILE: &str = "reviews.jsonl";
pub const SOCIETY_FILE: &str = "society.json";
pub const CORPUS_FILE: &str = "corpus.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Team-size rate used when the corpus histogram cannot be fitted.
pub const FALLBACK_TEAM_RATE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint integrity: section {section}: {message}")]
    Integrity { section: String, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("backend exhausted at epoch {epoch}; checkpoint written, resume to continue")]
    BackendExhausted { epoch: u32 },
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Society(#[from] SocietyError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl SimulationError {
    /// 2 configuration, 3 data, 4 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimulationError::Config(_) => 2,
            SimulationError::Backend(_) | SimulationError::BackendExhausted { .. } => 4,
            SimulationError::Index(IndexError::Backend { .. }) => 4,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SimulationError + '_ {
    move |e| SimulationError::Io { path: path.to_path_buf(), message: e.to_string() }
}

/// Everything that shapes a run. Defaults follow the reference society:
/// three led teams per agent, nine references per speech, five memories,
/// three reviewers, acceptance above five, forty epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Use the first `n` corpus authors; all of them when absent.
    pub n_agents: Option<usize>,
    pub epochs: u32,
    pub seed: u64,
    pub max_led_teams: usize,
    pub max_refs: usize,
    pub memory_cap: usize,
    pub memory_chars: usize,
    pub n_reviewers: usize,
    pub accept_threshold: f64,
    pub accept_rule: AcceptRule,
    /// Exponential team-size rate; fitted from the corpus when absent.
    pub team_rate: Option<f64>,
    /// Chance per epoch that an eligible agent starts a team.
    pub formation_prob: f64,
    pub retry_budget: u32,
    pub selection: SelectionPolicy,
    pub backend: BackendMode,
    /// Live endpoints; port `i` uses `endpoints[i % len]`.
    pub endpoints: Vec<String>,
    pub http_timeout_ms: u64,
    pub mock: MockConfig,
    pub ports: usize,
    pub channel: ChannelConfig,
    pub execution: Execution,
    /// One port, one worker, sequential team execution.
    pub deterministic: bool,
    /// Write a checkpoint every this many epochs; 0 writes only at the end.
    pub checkpoint_every: u32,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_agents: None,
            epochs: 40,
            seed: 0,
            max_led_teams: 3,
            max_refs: 9,
            memory_cap: 5,
            memory_chars: 280,
            n_reviewers: 3,
            accept_threshold: 5.0,
            accept_rule: AcceptRule::Mean,
            team_rate: None,
            formation_prob: 0.1,
            retry_budget: 3,
            selection: SelectionPolicy::default(),
            backend: BackendMode::Mock,
            endpoints: Vec::new(),
            http_timeout_ms: 60_000,
            mock: MockConfig::default(),
            ports: 1,
            channel: ChannelConfig::default(),
            execution: Execution::Parallel,
            deterministic: false,
            checkpoint_every: 10,
        }
    }
}

impl SimulationConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimulationError> {
        let cfg: SimulationConfig = toml::from_str(text).map_err(|e| SimulationError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn load(path: &Path) -> Result<Self, SimulationError> {
        let text = fs::read_to_string(path).map_err(|e| SimulationError::Config(format!("{}: {e}", path.display())))?;
        SimulationConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: String| Err(SimulationError::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad("seed must fit in a signed 64-bit integer".into());
        }
        if self.n_agents == Some(0) {
            return bad("n_agents must be positive".into());
        }
        if let Some(r) = self.team_rate {
            if !(r > 0.0 && r.is_finite()) {
                return bad(format!("team_rate must be positive, got {r}"));
            }
        }
        if !(0.0..=1.0).contains(&self.formation_prob) {
            return bad(format!("formation_prob must lie in [0, 1], got {}", self.formation_prob));
        }
        for (name, v) in [
            ("max_led_teams", self.max_led_teams),
            ("max_refs", self.max_refs),
            ("memory_cap", self.memory_cap),
            ("n_reviewers", self.n_reviewers),
            ("ports", self.ports),
            ("channel.port_cap", self.channel.port_cap),
            ("channel.pending_threshold", self.channel.pending_threshold),
            ("mock.dim", self.mock.dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.accept_threshold.is_finite() {
            return bad("accept_threshold must be finite".into());
        }
        if self.channel.base_wait_us > self.channel.max_wait_us {
            return bad("channel.base_wait_us exceeds channel.max_wait_us".into());
        }
        if self.mock.scores.min < 1 || self.mock.scores.max > 10 || self.mock.scores.min > self.mock.scores.max {
            return bad("mock.scores must satisfy 1 <= min <= max <= 10".into());
        }
        if self.backend == BackendMode::Live && self.endpoints.is_empty() {
            return bad("live backend needs at least one endpoint".into());
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            max_refs: self.max_refs,
            memory_cap: self.memory_cap,
            memory_chars: self.memory_chars,
            retry_budget: self.retry_budget,
            selection: self.selection,
            review: ReviewConfig {
                n_reviewers: self.n_reviewers,
                accept_threshold: self.accept_threshold,
                accept_rule: self.accept_rule,
            },
        }
    }

    /// Hash over the settings that can change a run's outputs. Scheduling
    /// knobs (ports, waits, execution mode, checkpoint cadence) are left out.
    pub fn outcome_hash(&self) -> String {
        let mut c = self.clone();
        let d = SimulationConfig::default();
        c.ports = d.ports;
        c.channel = d.channel;
        c.execution = d.execution;
        c.deterministic = d.deterministic;
        c.checkpoint_every = d.checkpoint_every;
        c.http_timeout_ms = d.http_timeout_ms;
        c.mock.latency_us = 0;
        sha256_hex(&serde_json::to_vec(&c).expect("configuration always serializes"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One line of `reviews.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub submission_id: u64,
    pub team_id: TeamId,
    pub reviewer_ids: Vec<AuthorId>,
    pub scores: Vec<u8>,
    pub decision: Decision,
    pub epoch: u32,
    pub comments: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs_completed: u32,
    pub teams_formed: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub aborted: u64,
    pub citation_events: u64,
    /// Stopped on request before the last epoch; resumable.
    pub stopped_early: bool,
    /// Resume found nothing left to do.
    pub already_complete: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Checkpoint and stop once this many epochs have completed.
    pub stop_after: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub checkpoint_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: SimulationConfig,
    pub epochs_completed: u32,
    pub team_rate: f64,
    /// File name to SHA-256.
    pub files: BTreeMap<String, String>,
}

struct RunState {
    next_epoch: u32,
    team_rate: f64,
    society: Society,
    split: CorpusSplit,
    /// Authors outside the society, kept for the final corpus snapshot.
    other_authors: Vec<AuthorRecord>,
    index: PaperIndex,
    ledger: CitationLedger,
    publisher: Publisher,
    real_rows: Vec<MetricsRow>,
    actions_bytes: u64,
    reviews_bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Section {
    sha256: String,
    data: serde_json::Value,
}

impl Section {
    fn new<T: Serialize>(value: &T) -> Result<Self, SimulationError> {
        let data = serde_json::to_value(value).map_err(|e| SimulationError::Data(e.to_string()))?;
        let bytes = serde_json::to_vec(&data).map_err(|e| SimulationError::Data(e.to_string()))?;
        Ok(Section { sha256: sha256_hex(&bytes), data })
    }

    fn open<T: DeserializeOwned>(self, name: &str) -> Result<T, SimulationError> {
        let integrity = |message: String| SimulationError::Integrity { section: name.to_string(), message };
        let bytes = serde_json::to_vec(&self.data).map_err(|e| integrity(e.to_string()))?;
        if sha256_hex(&bytes) != self.sha256 {
            return Err(integrity("content hash mismatch".into()));
        }
        serde_json::from_value(self.data).map_err(|e| integrity(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_hash: String,
    next_epoch: u32,
    team_rate: f64,
    actions_bytes: u64,
    reviews_bytes: u64,
    sections: BTreeMap<String, Section>,
}

impl RunState {
    fn write_checkpoint(&self, dir: &Path, config_hash: &str) -> Result<(), SimulationError> {
        let mut sections = BTreeMap::new();
        sections.insert("society".to_string(), Section::new(&self.society)?);
        sections.insert("split".to_string(), Section::new(&self.split)?);
        sections.insert("other_authors".to_string(), Section::new(&self.other_authors)?);
        sections.insert("index".to_string(), Section::new(&self.index.snapshot())?);
        sections.insert("ledger".to_string(), Section::new(&self.ledger)?);
        sections.insert("publisher".to_string(), Section::new(&self.publisher)?);
        sections.insert("real_rows".to_string(), Section::new(&self.real_rows)?);
        let cp = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            next_epoch: self.next_epoch,
            team_rate: self.team_rate,
            actions_bytes: self.actions_bytes,
            reviews_bytes: self.reviews_bytes,
            sections,
        };
        let path = dir.join(CHECKPOINT_FILE);
        let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        let bytes = serde_json::to_vec(&cp).map_err(|e| SimulationError::Data(e.to_string()))?;
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    fn read_checkpoint(dir: &Path, config_hash: &str) -> Result<Self, SimulationError> {
        let path = dir.join(CHECKPOINT_FILE);
        let integrity = |section: &str, message: String| SimulationError::Integrity { section: section.into(), message };
        let bytes = fs::read(&path).map_err(|e| integrity("checkpoint", format!("{}: {e}", path.display())))?;
        let mut cp: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| integrity("checkpoint", e.to_string()))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(integrity("checkpoint", format!("version {} (expected {CHECKPOINT_VERSION})", cp.version)));
        }
        if cp.config_hash != config_hash {
            return Err(integrity("config", "configuration hash differs from the checkpointed run".into()));
        }
        let mut take = |name: &str| cp.sections.remove(name).ok_or_else(|| integrity(name, "missing".into()));
        let society: Society = take("society")?.open("society")?;
        let split: CorpusSplit = take("split")?.open("split")?;
        let other_authors: Vec<AuthorRecord> = take("other_authors")?.open("other_authors")?;
        let snapshot: IndexSnapshot = take("index")?.open("index")?;
        let ledger: CitationLedger = take("ledger")?.open("ledger")?;
        let publisher: Publisher = take("publisher")?.open("publisher")?;
        let real_rows: Vec<MetricsRow> = take("real_rows")?.open("real_rows")?;
        let index = PaperIndex::from_snapshot(&snapshot).map_err(|e| integrity("index", e.to_string()))?;
        Ok(RunState {
            next_epoch: cp.next_epoch,
            team_rate: cp.team_rate,
            society,
            split,
            other_authors,
            index,
            ledger,
            publisher,
            real_rows,
            actions_bytes: cp.actions_bytes,
            reviews_bytes: cp.reviews_bytes,
        })
    }
}

/// Fits the exponential rate to the corpus's own author-count histogram.
pub fn fit_team_rate(papers: &[PaperRecord]) -> Option<f64> {
    let hist = metrics::histogram(papers.iter().map(|p| p.author_ids.len() as u32).filter(|&n| n > 0));
    metrics::fit_exponential(&hist).ok().map(|f| f.rate).filter(|r| *r > 0.0 && r.is_finite())
}

/// One backend per port, as configured.
pub fn make_ports(cfg: &SimulationConfig) -> Result<Vec<Arc<dyn Backend>>, SimulationError> {
    let n = if cfg.deterministic { 1 } else { cfg.ports.max(1) };
    match cfg.backend {
        BackendMode::Mock => {
            let mock: Arc<dyn Backend> = Arc::new(MockBackend::new(cfg.mock.clone()));
            Ok(vec![mock; n])
        }
        BackendMode::Live => live_ports(cfg, n),
    }
}

#[cfg(feature = "http")]
fn live_ports(cfg: &SimulationConfig, n: usize) -> Result<Vec<Arc<dyn Backend>>, SimulationError> {
    if cfg.endpoints.is_empty() {
        return Err(SimulationError::Config("live backend needs at least one endpoint".into()));
    }
    let timeout = std::time::Duration::from_millis(cfg.http_timeout_ms);
    Ok((0..n)
        .map(|i| {
            Arc::new(crate::backend::HttpBackend::new(cfg.endpoints[i % cfg.endpoints.len()].clone(), timeout))
                as Arc<dyn Backend>
        })
        .collect())
}

#[cfg(not(feature = "http"))]
fn live_ports(_: &SimulationConfig, _: usize) -> Result<Vec<Arc<dyn Backend>>, SimulationError> {
    Err(SimulationError::Config("this build has no HTTP support; rebuild with the `http` feature".into()))
}

fn init_state(cfg: &SimulationConfig, corpus: Corpus, embedder: &dyn Backend) -> Result<RunState, SimulationError> {
    let Corpus { authors, split, .. } = corpus;
    for (i, a) in authors.iter().enumerate() {
        if a.author_id.0 as usize != i {
            return Err(SimulationError::Data(format!(
                "author ids must be 0..n in order, found {} at position {i}",
                a.author_id
            )));
        }
    }
    let n = cfg.n_agents.unwrap_or(authors.len());
    if n > authors.len() {
        return Err(SimulationError::Config(format!("n_agents {n} exceeds the corpus's {} authors", authors.len())));
    }
    let exec = effective_execution(cfg);
    let lookup: BTreeMap<AuthorId, &AuthorRecord> = authors.iter().map(|a| (a.author_id, a)).collect();
    let (real_rows, skipped) = metrics::batch_metrics(exec, &split.validation_db, &lookup, |p| Source::Real(p.year));
    if skipped > 0 {
        log::warn!("{skipped} validation papers have unresolved authors and are left out of the metrics");
    }
    let mut authors = authors;
    let other_authors = authors.split_off(n);
    let profiles: Vec<AuthorRecord> = authors
        .into_iter()
        .map(|mut a| {
            a.coauthor_ids.retain(|c| (c.0 as usize) < n);
            a
        })
        .collect();
    let society = Society::new(profiles, cfg.seed)?;
    let team_rate = match cfg.team_rate {
        Some(r) => r,
        None => fit_team_rate(&split.reference_db).unwrap_or_else(|| {
            log::warn!("corpus team sizes cannot be fitted, using rate {FALLBACK_TEAM_RATE}");
            FALLBACK_TEAM_RATE
        }),
    };
    log::info!("team-size rate {team_rate:.4}");
    let mut split = split;
    split.reference_db.sort_by_key(|p| p.paper_id);
    let index = if split.reference_db.is_empty() {
        PaperIndex::new(embedder.embed("empty corpus probe")?.len())
    } else {
        build_index(&split.reference_db, embedder, exec)?
    };
    Ok(RunState {
        next_epoch: 0,
        team_rate,
        society,
        split,
        other_authors,
        index,
        ledger: CitationLedger::new(),
        publisher: Publisher::default(),
        real_rows,
        actions_bytes: 0,
        reviews_bytes: 0,
    })
}

fn effective_execution(cfg: &SimulationConfig) -> Execution {
    if cfg.deterministic {
        Execution::Sequential
    } else {
        cfg.execution
    }
}

fn channel_config(cfg: &SimulationConfig) -> ChannelConfig {
    if cfg.deterministic {
        ChannelConfig { port_cap: 1, ..cfg.channel }
    } else {
        cfg.channel
    }
}

/// Starts a run from a corpus snapshot with the configured backend.
pub fn run_simulation(
    cfg: &SimulationConfig,
    corpus: Corpus,
    out_dir: &Path,
    opts: RunOptions,
) -> Result<RunSummary, SimulationError> {
    let ports = make_ports(cfg)?;
    run_with_ports(cfg, corpus, out_dir, opts, ports)
}

/// [`run_simulation`] with caller-supplied backend ports.
pub fn run_with_ports(
    cfg: &SimulationConfig,
    corpus: Corpus,
    out_dir: &Path,
    opts: RunOptions,
    ports: Vec<Arc<dyn Backend>>,
) -> Result<RunSummary, SimulationError> {
    cfg.validate()?;
    if ports.is_empty() {
        return Err(SimulationError::Config("no backend ports".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let state = init_state(cfg, corpus, ports[0].as_ref())?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml()).map_err(io_err(out_dir))?;
    for f in [ACTIONS_FILE, REVIEWS_FILE] {
        let p = out_dir.join(f);
        File::create(&p).map_err(io_err(&p))?;
    }
    for stale in [CHECKPOINT_FILE, MANIFEST_FILE] {
        let _ = fs::remove_file(out_dir.join(stale));
    }
    drive(cfg, state, out_dir, opts, ports)
}

/// Continues a checkpointed run in `out_dir`. The configuration must hash
/// the same as the one the run started with.
pub fn resume(cfg: &SimulationConfig, out_dir: &Path, opts: RunOptions) -> Result<RunSummary, SimulationError> {
    let ports = make_ports(cfg)?;
    resume_with_ports(cfg, out_dir, opts, ports)
}

pub fn resume_with_ports(
    cfg: &SimulationConfig,
    out_dir: &Path,
    opts: RunOptions,
    ports: Vec<Arc<dyn Backend>>,
) -> Result<RunSummary, SimulationError> {
    cfg.validate()?;
    let state = RunState::read_checkpoint(out_dir, &cfg.outcome_hash())?;
    if state.next_epoch >= cfg.epochs && out_dir.join(MANIFEST_FILE).exists() {
        log::info!("run in {} is already complete; nothing to do", out_dir.display());
        let mut summary = summarize(&state);
        summary.already_complete = true;
        return Ok(summary);
    }
    for (f, len) in [(ACTIONS_FILE, state.actions_bytes), (REVIEWS_FILE, state.reviews_bytes)] {
        let p = out_dir.join(f);
        let file = OpenOptions::new().write(true).create(true).truncate(false).open(&p).map_err(io_err(&p))?;
        let actual = file.metadata().map_err(io_err(&p))?.len();
        if actual < len {
            return Err(SimulationError::Integrity {
                section: f.into(),
                message: format!("{actual} bytes on disk, checkpoint expects {len}"),
            });
        }
        file.set_len(len).map_err(io_err(&p))?;
    }
    let _ = fs::remove_file(out_dir.join(MANIFEST_FILE));
    drive(cfg, state, out_dir, opts, ports)
}

fn summarize(state: &RunState) -> RunSummary {
    let mut s = RunSummary {
        epochs_completed: state.next_epoch,
        teams_formed: state.society.teams.len() as u64,
        citation_events: state.ledger.events().len() as u64,
        ..RunSummary::default()
    };
    for t in state.society.teams.values() {
        match t.stage {
            Stage::Done(crate::society::Outcome::Accepted) => s.accepted += 1,
            Stage::Done(crate::society::Outcome::Rejected) => s.rejected += 1,
            Stage::Done(crate::society::Outcome::Aborted) => s.aborted += 1,
            _ => {}
        }
    }
    s
}

struct Appender {
    path: PathBuf,
    out: BufWriter<File>,
    bytes: u64,
}

impl Appender {
    fn open(path: PathBuf, bytes: u64) -> Result<Self, SimulationError> {
        let f = OpenOptions::new().append(true).create(true).open(&path).map_err(io_err(&path))?;
        Ok(Appender { out: BufWriter::new(f), path, bytes })
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<(), SimulationError> {
        let mut s = serde_json::to_string(value).map_err(|e| SimulationError::Data(e.to_string()))?;
        s.push('\n');
        self.out.write_all(s.as_bytes()).map_err(io_err(&self.path))?;
        self.bytes += s.len() as u64;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), SimulationError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

fn drive(
    cfg: &SimulationConfig,
    mut state: RunState,
    out_dir: &Path,
    opts: RunOptions,
    ports: Vec<Arc<dyn Backend>>,
) -> Result<RunSummary, SimulationError> {
    let config_hash = cfg.outcome_hash();
    let pcfg = cfg.pipeline();
    let exec = effective_execution(cfg);
    let live = ports[0].mode() == BackendMode::Live;
    let channel = Channel::new(ports, channel_config(cfg));
    let mut actions = Appender::open(out_dir.join(ACTIONS_FILE), state.actions_bytes)?;
    let mut reviews = Appender::open(out_dir.join(REVIEWS_FILE), state.reviews_bytes)?;
    let mut stopped_early = false;

    while state.next_epoch < cfg.epochs {
        let epoch = state.next_epoch;
        let steps = advance_all(&state, &channel, &pcfg, exec, epoch, cfg.seed)?;
        if live && !steps.is_empty() && steps.iter().all(|s| s.backend_failure.is_some()) {
            actions.flush()?;
            reviews.flush()?;
            state.write_checkpoint(out_dir, &config_hash)?;
            channel.shutdown();
            return Err(SimulationError::BackendExhausted { epoch });
        }
        form_teams(&mut state, cfg, epoch)?;
        commit(&mut state, steps, &pcfg, epoch, &mut actions, &mut reviews)?;
        state.society.check_invariants(cfg.max_led_teams, cfg.memory_cap)?;
        state.next_epoch += 1;
        state.actions_bytes = actions.bytes;
        state.reviews_bytes = reviews.bytes;
        let stop = opts.stop_after.is_some_and(|n| state.next_epoch >= n) && state.next_epoch < cfg.epochs;
        let periodic = cfg.checkpoint_every > 0 && state.next_epoch.is_multiple_of(cfg.checkpoint_every);
        if stop || periodic {
            actions.flush()?;
            reviews.flush()?;
            state.write_checkpoint(out_dir, &config_hash)?;
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    actions.flush()?;
    reviews.flush()?;
    channel.shutdown();
    if stopped_early {
        log::info!("stopped after epoch {}; resume to continue", state.next_epoch);
        let mut summary = summarize(&state);
        summary.stopped_early = true;
        return Ok(summary);
    }
    finish(cfg, &state, out_dir, &config_hash, exec)?;
    Ok(summarize(&state))
}

fn advance_all(
    state: &RunState,
    inference: &dyn Inference,
    pcfg: &PipelineConfig,
    exec: Execution,
    epoch: u32,
    seed: u64,
) -> Result<Vec<TeamStep>, SimulationError> {
    let live: Vec<&crate::society::Team> =
        state.society.teams.values().filter(|t| !t.stage.is_done() && t.formed_epoch < epoch).collect();
    let world = World { society: &state.society, index: &state.index, papers: &state.split.reference_db };
    Ok(par::try_map(exec, &live, |t| advance_team(t, world, inference, pcfg, epoch, seed))?)
}

/// Eligible agents are below the leadership cap and not still staffing a
/// team they lead.
fn form_teams(state: &mut RunState, cfg: &SimulationConfig, epoch: u32) -> Result<(), SimulationError> {
    for i in 0..state.society.len() {
        let agent = &state.society.agents[i];
        let id = agent.id();
        let staffing = agent
            .led_team_ids
            .iter()
            .any(|t| state.society.teams.get(t).is_some_and(|t| t.stage == Stage::CollaboratorSelection));
        if agent.led_team_ids.len() >= cfg.max_led_teams || staffing {
            continue;
        }
        let mut r = rng::stream(cfg.seed, &[rng::purpose::FORMATION, u64::from(id.0), u64::from(epoch)]);
        if r.random::<f64>() >= cfg.formation_prob {
            continue;
        }
        let mut sr = rng::stream(cfg.seed, &[rng::purpose::TEAM_SIZE, u64::from(id.0), u64::from(epoch)]);
        let size = sample_team_size(&mut sr, state.team_rate)?;
        state.society.form_team(id, size, epoch, cfg.max_led_teams)?;
    }
    Ok(())
}

fn commit(
    state: &mut RunState,
    steps: Vec<TeamStep>,
    pcfg: &PipelineConfig,
    epoch: u32,
    actions: &mut Appender,
    reviews: &mut Appender,
) -> Result<(), SimulationError> {
    for step in steps {
        let team_id = step.team.team_id;
        let done = step.team.stage.is_done();
        state.society.teams.insert(team_id, step.team);
        state.society.add_members(team_id, &step.new_members)?;
        for (agent, entry) in step.memory {
            if let Some(a) = state.society.agent_mut(agent) {
                crate::society::push_memory(a, entry, pcfg.memory_cap);
            }
        }
        if !step.citations.is_empty() {
            let index = &state.index;
            state.ledger.record_citations(epoch, team_id, &step.citations, |id| index.contains(id))?;
            for id in &step.citations {
                if let Ok(i) = state.split.reference_db.binary_search_by_key(id, |p| p.paper_id) {
                    state.split.reference_db[i].citation_count += 1;
                }
            }
        }
        if let Some(action) = &step.action {
            actions.line(action)?;
        }
        if let (Some(sub), Some(bundle)) = (&step.submission, &step.review) {
            reviews.line(&ReviewRecord {
                submission_id: bundle.submission_id,
                team_id,
                reviewer_ids: bundle.reviewer_ids.clone(),
                scores: bundle.scores.clone(),
                decision: bundle.decision,
                epoch: bundle.decided_epoch,
                comments: bundle.comments.clone(),
            })?;
            if bundle.decision == Decision::Accept {
                let embedding = step.accepted_embedding.clone().ok_or_else(|| {
                    SimulationError::Data(format!("accepted submission {} has no embedding", sub.submission_id))
                })?;
                state.publisher.publish_accepted(
                    sub,
                    bundle,
                    &mut state.split,
                    &mut state.index,
                    &mut state.society,
                    embedding,
                    epoch,
                )?;
            }
        }
        if done {
            state.society.release_leadership(team_id);
        }
    }
    Ok(())
}

fn simulated_rows(state: &RunState, exec: Execution) -> Vec<MetricsRow> {
    let lookup: BTreeMap<AuthorId, &AuthorRecord> = state.society.agents.iter().map(|a| (a.id(), &a.profile)).collect();
    let published: Vec<PaperRecord> = state.split.reference_db.iter().filter(|p| !p.is_seed()).cloned().collect();
    let (rows, skipped) = metrics::batch_metrics(exec, &published, &lookup, |_| Source::Simulated);
    debug_assert_eq!(skipped, 0);
    rows
}

/// Metrics rows for a saved corpus: agent papers first, then validation
/// papers. Returns the rows and the number of papers skipped for unresolved
/// authors.
pub fn corpus_metrics(corpus: &Corpus, exec: Execution) -> (Vec<MetricsRow>, usize) {
    let lookup = corpus.author_lookup();
    let published: Vec<PaperRecord> = corpus.split.reference_db.iter().filter(|p| !p.is_seed()).cloned().collect();
    let (mut rows, a) = metrics::batch_metrics(exec, &published, &lookup, |_| Source::Simulated);
    let (real, b) = metrics::batch_metrics(exec, &corpus.split.validation_db, &lookup, |p| Source::Real(p.year));
    rows.extend(real);
    (rows, a + b)
}

/// Recomputes `metrics.csv` and `correlations.csv` from the corpus saved in
/// a finished run directory.
pub fn snapshot_metrics(snapshot: &Path, out_dir: &Path, exec: Execution) -> Result<usize, SimulationError> {
    let corpus = Corpus::load(&snapshot.join(CORPUS_FILE))?;
    let (rows, skipped) = corpus_metrics(&corpus, exec);
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    metrics::export_metrics(&rows, &correlate_all(&rows), out_dir)?;
    Ok(skipped)
}

/// All correlation reports for the rows, grouped by source.
pub fn correlate_all(rows: &[MetricsRow]) -> Vec<CorrelationReport> {
    let mut sources: Vec<Source> = Vec::new();
    for r in rows {
        if !sources.contains(&r.source) {
            sources.push(r.source);
        }
    }
    sources.sort_by_key(|s| match s {
        Source::Simulated => (0, 0),
        Source::Real(y) => (1, *y),
    });
    sources.into_iter().flat_map(|s| metrics::correlate(rows, s)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SimulationError> {
    let bytes = serde_json::to_vec(value).map_err(|e| SimulationError::Data(e.to_string()))?;
    fs::write(path, bytes).map_err(io_err(path))
}

fn finish(
    cfg: &SimulationConfig,
    state: &RunState,
    out_dir: &Path,
    config_hash: &str,
    exec: Execution,
) -> Result<(), SimulationError> {
    state.ledger.write_events_csv(&out_dir.join(CITATION_EVENTS_FILE))?;
    let mut rows = simulated_rows(state, exec);
    rows.extend(state.real_rows.iter().cloned());
    let reports = correlate_all(&rows);
    metrics::export_metrics(&rows, &reports, out_dir)?;
    write_json(&out_dir.join(SOCIETY_FILE), &state.society)?;
    let mut authors: Vec<AuthorRecord> = state.society.agents.iter().map(|a| a.profile.clone()).collect();
    authors.extend(state.other_authors.iter().cloned());
    Corpus::new(authors, state.split.clone()).save(&out_dir.join(CORPUS_FILE))?;
    state.write_checkpoint(out_dir, config_hash)?;
    let manifest = Manifest {
        checkpoint_version: CHECKPOINT_VERSION,
        seed: cfg.seed,
        config_hash: config_hash.to_string(),
        config: cfg.clone(),
        epochs_completed: state.next_epoch,
        team_rate: state.team_rate,
        files: hash_files(out_dir)?,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| SimulationError::Data(e.to_string()))?;
    fs::write(out_dir.join(MANIFEST_FILE), text).map_err(io_err(out_dir))
}

fn hash_files(dir: &Path) -> Result<BTreeMap<String, String>, SimulationError> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == MANIFEST_FILE || !entry.path().is_file() {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(io_err(&entry.path()))?;
        files.insert(name, sha256_hex(&bytes));
    }
    Ok(files)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, SimulationError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| SimulationError::Data(format!("{}: {e}", path.display())))
}

/// Recomputes every listed hash and reports the first file that differs.
pub fn verify_manifest(dir: &Path) -> Result<Manifest, SimulationError> {
    let manifest = read_manifest(dir)?;
    for (name, expected) in &manifest.files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if &sha256_hex(&bytes) != expected {
            return Err(SimulationError::Integrity { section: name.clone(), message: "hash differs from the manifest".into() });
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_constants() {
        let c = SimulationConfig::default();
        assert_eq!((c.max_led_teams, c.max_refs, c.memory_cap, c.n_reviewers), (3, 9, 5, 3));
        assert_eq!(c.accept_threshold, 5.0);
        assert_eq!(c.epochs, 40);
        assert_eq!(c.accept_rule, AcceptRule::Mean);
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = SimulationConfig { team_rate: Some(0.8125), n_agents: Some(12), seed: i64::MAX as u64, ..Default::default() };
        c.mock.planted = Some(crate::backend::PlantedEffects::default());
        c.endpoints = vec!["http://127.0.0.1:1".into()];
        let text = c.to_toml();
        assert_eq!(SimulationConfig::from_toml(&text).unwrap(), c);
        assert_eq!(SimulationConfig::from_toml("").unwrap(), SimulationConfig::default());
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in ["team_rate = -1.0", "formation_prob = 2.0", "ports = 0", "unknown_key = 1", "backend = \"live\""] {
            let err = SimulationConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn scheduling_knobs_do_not_change_the_hash() {
        let a = SimulationConfig::default();
        let b = SimulationConfig { ports: 8, deterministic: true, execution: Execution::Sequential, ..Default::default() };
        assert_eq!(a.outcome_hash(), b.outcome_hash());
        let c = SimulationConfig { seed: 1, ..Default::default() };
        assert_ne!(a.outcome_hash(), c.outcome_hash());
    }

    #[test]
    fn section_detects_tampering() {
        let s = Section::new(&vec![1u32, 2, 3]).unwrap();
        let mut tampered = Section { sha256: s.sha256.clone(), data: serde_json::json!([1, 2, 4]) };
        assert_eq!(s.open::<Vec<u32>>("x").unwrap(), vec![1, 2, 3]);
        tampered.sha256.push('0');
        assert!(matches!(tampered.open::<Vec<u32>>("x"), Err(SimulationError::Integrity { section, .. }) if section == "x"));
    }
}
