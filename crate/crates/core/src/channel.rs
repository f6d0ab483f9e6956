//! The asynchronous inference channel.
//!
//! Agents submit chat and embed requests; a single dispatcher thread hands
//! them to backend ports, each served by `port_cap` worker threads. Requests
//! from the same origin agent are serialized, so their responses resolve in
//! submission order. When no port has a free slot the dispatcher sleeps for
//! [`adaptive_wait`] of the current queue depth, or until a completion
//! arrives.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, never, select, unbounded, Receiver, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendMode, MockBackend, MockConfig};
use crate::corpus::AuthorId;
use crate::society::{Stage, TeamId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("channel is shut down")]
    Shutdown,
    #[error("request {0} was dropped without a response")]
    Dropped(u64),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Concurrent requests per port.
    pub port_cap: usize,
    pub base_wait_us: u64,
    pub max_wait_us: u64,
    pub pending_threshold: usize,
    /// Submissions block once this many requests are waiting.
    pub queue_capacity: usize,
    /// Keep the dispatch order in the stats (tests only; grows unbounded).
    pub record_dispatch: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            port_cap: 1,
            base_wait_us: 50,
            max_wait_us: 2_000,
            pending_threshold: 64,
            queue_capacity: 65_536,
            record_dispatch: false,
        }
    }
}

/// `min(max_wait, base_wait * (1 + pending / threshold))`.
pub fn adaptive_wait(pending: usize, cfg: &ChannelConfig) -> Duration {
    let threshold = cfg.pending_threshold.max(1) as f64;
    let scaled = cfg.base_wait_us as f64 * (1.0 + pending as f64 / threshold);
    Duration::from_micros(scaled.min(cfg.max_wait_us as f64).max(cfg.base_wait_us.min(cfg.max_wait_us) as f64) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Chat,
    Embed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub team_id: Option<TeamId>,
    pub agent_id: AuthorId,
    pub stage: Option<Stage>,
}

impl Origin {
    pub fn agent(agent_id: AuthorId) -> Self {
        Origin { team_id: None, agent_id, stage: None }
    }
}

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub request_id: u64,
    pub kind: RequestKind,
    pub payload: String,
    pub origin: Origin,
    pub enqueue_time: Instant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Text(String),
    Embedding(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub request_id: u64,
    pub port: usize,
    /// Global completion order across the channel's lifetime.
    pub completion_seq: u64,
    pub result: Result<Response, BackendError>,
}

struct Job {
    request: InferenceRequest,
    reply: Sender<Resolved>,
}

/// Single-assignment handle to one response.
pub struct ResponseHandle {
    request_id: u64,
    rx: Receiver<Resolved>,
}

impl ResponseHandle {
    pub fn request_id(&self) -> u64 {
        self.request_id
    }

    pub fn wait_resolved(self) -> Result<Resolved, ChannelError> {
        self.rx.recv().map_err(|_| ChannelError::Dropped(self.request_id))
    }

    pub fn wait(self) -> Result<Response, ChannelError> {
        Ok(self.wait_resolved()?.result?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DispatchStats {
    pub submitted: u64,
    pub dispatched: u64,
    pub completed: u64,
    pub per_port: Vec<u64>,
    pub max_in_flight: Vec<usize>,
    pub dispatch_order: Vec<u64>,
}

#[derive(Default)]
struct OriginState {
    busy: bool,
    head_ready: bool,
    queue: VecDeque<Job>,
}

pub struct Channel {
    submit: RwLock<Option<Sender<Job>>>,
    next_id: AtomicU64,
    pending: Arc<AtomicUsize>,
    dispatcher: std::sync::Mutex<Option<JoinHandle<DispatchStats>>>,
    workers: std::sync::Mutex<Vec<JoinHandle<()>>>,
    mode: BackendMode,
    ports: usize,
}

impl Channel {
    pub fn new(ports: Vec<Arc<dyn Backend>>, config: ChannelConfig) -> Self {
        assert!(!ports.is_empty(), "a channel needs at least one port");
        let mode = ports[0].mode();
        let n_ports = ports.len();
        let cap = config.port_cap.max(1);
        let (submit_tx, submit_rx) = bounded::<Job>(config.queue_capacity.max(1));
        let (done_tx, done_rx) = unbounded::<(usize, AuthorId)>();
        let completion = Arc::new(AtomicU64::new(0));
        let mut port_txs = Vec::with_capacity(n_ports);
        let mut workers = Vec::new();
        for (p, backend) in ports.into_iter().enumerate() {
            let (tx, rx) = unbounded::<Job>();
            port_txs.push(tx);
            for _ in 0..cap {
                let (rx, backend, done_tx, completion) = (rx.clone(), backend.clone(), done_tx.clone(), completion.clone());
                workers.push(std::thread::spawn(move || {
                    for job in rx {
                        let req = &job.request;
                        let result = match req.kind {
                            RequestKind::Chat => backend.chat(&req.payload).map(Response::Text),
                            RequestKind::Embed => backend.embed(&req.payload).map(Response::Embedding),
                        };
                        let completion_seq = completion.fetch_add(1, Ordering::SeqCst);
                        let origin = req.origin.agent_id;
                        let _ = job.reply.send(Resolved { request_id: req.request_id, port: p, completion_seq, result });
                        let _ = done_tx.send((p, origin));
                    }
                }));
            }
        }
        drop(done_tx);
        let pending = Arc::new(AtomicUsize::new(0));
        let dispatcher = {
            let pending = pending.clone();
            std::thread::spawn(move || dispatch_loop(submit_rx, done_rx, port_txs, cap, config, pending))
        };
        Channel {
            submit: RwLock::new(Some(submit_tx)),
            next_id: AtomicU64::new(0),
            pending,
            dispatcher: std::sync::Mutex::new(Some(dispatcher)),
            workers: std::sync::Mutex::new(workers),
            mode,
            ports: n_ports,
        }
    }

    /// Channel whose ports all share one backend.
    pub fn uniform(backend: Arc<dyn Backend>, ports: usize, config: ChannelConfig) -> Self {
        Channel::new(vec![backend; ports.max(1)], config)
    }

    pub fn ports(&self) -> usize {
        self.ports
    }

    /// Requests accepted but not yet handed to a port.
    pub fn pending(&self) -> usize {
        self.pending.load(Ordering::SeqCst)
    }

    /// Enqueues a request. Blocks while the queue is full.
    pub fn submit(&self, kind: RequestKind, payload: impl Into<String>, origin: Origin) -> Result<ResponseHandle, ChannelError> {
        let guard = self.submit.read().unwrap_or_else(|e| e.into_inner());
        let tx = guard.as_ref().ok_or(ChannelError::Shutdown)?;
        let request_id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (reply, rx) = bounded(1);
        let request = InferenceRequest { request_id, kind, payload: payload.into(), origin, enqueue_time: Instant::now() };
        self.pending.fetch_add(1, Ordering::SeqCst);
        tx.send(Job { request, reply }).map_err(|_| {
            self.pending.fetch_sub(1, Ordering::SeqCst);
            ChannelError::Shutdown
        })?;
        Ok(ResponseHandle { request_id, rx })
    }

    /// Stops accepting requests, resolves everything already accepted, and
    /// joins all threads. Later calls return empty stats.
    pub fn shutdown(&self) -> DispatchStats {
        self.submit.write().unwrap_or_else(|e| e.into_inner()).take();
        let stats = self
            .dispatcher
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .take()
            .map(|h| h.join().expect("dispatcher panicked"))
            .unwrap_or_default();
        for w in self.workers.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
            let _ = w.join();
        }
        stats
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn dispatch_loop(
    submit_rx: Receiver<Job>,
    done_rx: Receiver<(usize, AuthorId)>,
    port_txs: Vec<Sender<Job>>,
    cap: usize,
    cfg: ChannelConfig,
    pending: Arc<AtomicUsize>,
) -> DispatchStats {
    let n_ports = port_txs.len();
    let mut stats = DispatchStats { per_port: vec![0; n_ports], max_in_flight: vec![0; n_ports], ..Default::default() };
    let mut in_flight = vec![0usize; n_ports];
    let mut ready: BTreeMap<u64, Job> = BTreeMap::new();
    let mut origins: HashMap<AuthorId, OriginState> = HashMap::new();
    let mut submit_rx = submit_rx;
    let mut open = true;
    let mut queued = 0usize;

    let enqueue = |job: Job, ready: &mut BTreeMap<u64, Job>, origins: &mut HashMap<AuthorId, OriginState>| {
        let st = origins.entry(job.request.origin.agent_id).or_default();
        if st.busy || st.head_ready {
            st.queue.push_back(job);
        } else {
            st.head_ready = true;
            ready.insert(job.request.request_id, job);
        }
    };

    loop {
        // Least in-flight port first, ties by index.
        while !ready.is_empty() {
            let Some(port) = (0..n_ports).filter(|&p| in_flight[p] < cap).min_by_key(|&p| (in_flight[p], p)) else {
                break;
            };
            let Some((_, job)) = ready.pop_first() else { break };
            let origin = job.request.origin.agent_id;
            let st = origins.entry(origin).or_default();
            st.head_ready = false;
            st.busy = true;
            in_flight[port] += 1;
            stats.max_in_flight[port] = stats.max_in_flight[port].max(in_flight[port]);
            stats.per_port[port] += 1;
            stats.dispatched += 1;
            if cfg.record_dispatch {
                stats.dispatch_order.push(job.request.request_id);
            }
            queued -= 1;
            pending.fetch_sub(1, Ordering::SeqCst);
            if port_txs[port].send(job).is_err() {
                log::error!("port {port} worker pool is gone");
            }
        }
        if !open && queued == 0 && in_flight.iter().all(|&n| n == 0) {
            break;
        }
        select! {
            recv(submit_rx) -> msg => match msg {
                Ok(job) => {
                    stats.submitted += 1;
                    queued += 1;
                    enqueue(job, &mut ready, &mut origins);
                }
                Err(_) => {
                    open = false;
                    submit_rx = never();
                }
            },
            recv(done_rx) -> msg => {
                if let Ok((port, origin)) = msg {
                    in_flight[port] -= 1;
                    stats.completed += 1;
                    let st = origins.entry(origin).or_default();
                    st.busy = false;
                    if let Some(next) = st.queue.pop_front() {
                        st.head_ready = true;
                        ready.insert(next.request.request_id, next);
                    } else if !st.head_ready {
                        origins.remove(&origin);
                    }
                }
            },
            default(adaptive_wait(queued, &cfg)) => {}
        }
    }
    stats
}

/// What pipeline stages call to reach a model, directly or through a channel.
pub trait Inference: Sync {
    fn chat(&self, origin: Origin, prompt: &str) -> Result<String, BackendError>;
    fn embed(&self, origin: Origin, text: &str) -> Result<Vec<f64>, BackendError>;
    fn mode(&self) -> BackendMode;
}

/// Calls the backend on the caller's thread.
pub struct Direct<B>(pub B);

impl<B: Backend> Inference for Direct<B> {
    fn chat(&self, _: Origin, prompt: &str) -> Result<String, BackendError> {
        self.0.chat(prompt)
    }
    fn embed(&self, _: Origin, text: &str) -> Result<Vec<f64>, BackendError> {
        self.0.embed(text)
    }
    fn mode(&self) -> BackendMode {
        self.0.mode()
    }
}

fn channel_failure(e: ChannelError) -> BackendError {
    match e {
        ChannelError::Backend(b) => b,
        other => BackendError::Transport(other.to_string()),
    }
}

impl Inference for Channel {
    fn chat(&self, origin: Origin, prompt: &str) -> Result<String, BackendError> {
        match self.submit(RequestKind::Chat, prompt, origin).and_then(ResponseHandle::wait).map_err(channel_failure)? {
            Response::Text(t) => Ok(t),
            Response::Embedding(_) => Err(BackendError::Malformed("embedding returned for chat".into())),
        }
    }

    fn embed(&self, origin: Origin, text: &str) -> Result<Vec<f64>, BackendError> {
        match self.submit(RequestKind::Embed, text, origin).and_then(ResponseHandle::wait).map_err(channel_failure)? {
            Response::Embedding(v) => Ok(v),
            Response::Text(_) => Err(BackendError::Malformed("text returned for embed".into())),
        }
    }

    fn mode(&self) -> BackendMode {
        self.mode
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub n_agents: usize,
    pub n_ports: usize,
    pub requests: usize,
    pub wall_clock_s: f64,
    pub throughput: f64,
}

/// Pushes `requests_per_agent` chat requests per agent through a fresh
/// channel of mock ports with the given latency and times the full drain.
pub fn throughput_probe(
    n_agents: usize,
    n_ports: usize,
    latency_us: u64,
    requests_per_agent: usize,
    config: ChannelConfig,
) -> Result<ProbeRow, ChannelError> {
    let backend: Arc<dyn Backend> = Arc::new(MockBackend::new(MockConfig { latency_us, echo: true, ..MockConfig::default() }));
    let channel = Channel::uniform(backend, n_ports, config);
    let start = Instant::now();
    let mut handles = Vec::with_capacity(n_agents * requests_per_agent);
    for round in 0..requests_per_agent {
        for a in 0..n_agents {
            handles.push(channel.submit(
                RequestKind::Chat,
                format!("agent {a} request {round}"),
                Origin::agent(AuthorId(a as u32)),
            )?);
        }
    }
    let requests = handles.len();
    for h in handles {
        h.wait()?;
    }
    let wall = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    channel.shutdown();
    Ok(ProbeRow { n_agents, n_ports, requests, wall_clock_s: wall, throughput: requests as f64 / wall })
}

pub fn write_probe_csv(rows: &[ProbeRow], path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "n_agents,n_ports,requests,wall_clock_s,throughput")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.n_agents, r.n_ports, r.requests, r.wall_clock_s, r.throughput)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn echo(latency_us: u64) -> Arc<dyn Backend> {
        Arc::new(MockBackend::new(MockConfig { latency_us, echo: true, ..MockConfig::default() }))
    }

    #[test]
    fn single_request_passthrough() {
        let ch = Channel::uniform(echo(0), 1, ChannelConfig::default());
        let h = ch.submit(RequestKind::Chat, "hello", Origin::agent(AuthorId(0))).unwrap();
        assert_eq!(h.wait().unwrap(), Response::Text("hello".into()));
        let mock = MockBackend::with_seed(0);
        let ch2 = Channel::uniform(Arc::new(mock.clone()), 1, ChannelConfig::default());
        let got = ch2.embed(Origin::agent(AuthorId(0)), "text").unwrap();
        assert_eq!(got, mock.embed("text").unwrap());
    }

    #[test]
    fn submit_after_shutdown_is_rejected() {
        let ch = Channel::uniform(echo(0), 2, ChannelConfig::default());
        ch.shutdown();
        assert!(matches!(ch.submit(RequestKind::Chat, "x", Origin::agent(AuthorId(0))), Err(ChannelError::Shutdown)));
    }

    #[test]
    fn shutdown_resolves_everything_in_flight() {
        let ch = Channel::uniform(echo(200), 2, ChannelConfig::default());
        let hs: Vec<_> =
            (0..40).map(|i| ch.submit(RequestKind::Chat, format!("{i}"), Origin::agent(AuthorId(i % 5))).unwrap()).collect();
        let stats = ch.shutdown();
        assert_eq!(stats.completed, 40);
        for (i, h) in hs.into_iter().enumerate() {
            assert_eq!(h.wait().unwrap(), Response::Text(format!("{i}")));
        }
    }

    #[test]
    fn hundred_requests_four_ports() {
        let ch = Channel::uniform(echo(100), 4, ChannelConfig { record_dispatch: true, ..Default::default() });
        let hs: Vec<_> = (0..100u32)
            .map(|i| (i % 7, ch.submit(RequestKind::Chat, format!("req {i}"), Origin::agent(AuthorId(i % 7))).unwrap()))
            .collect();
        let mut last: HashMap<u32, u64> = HashMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for (agent, h) in hs {
            let id = h.request_id();
            let r = h.wait_resolved().unwrap();
            assert_eq!(r.result.unwrap(), Response::Text(format!("req {id}")));
            assert!(seen.insert(r.request_id));
            if let Some(prev) = last.insert(agent, r.completion_seq) {
                assert!(prev < r.completion_seq);
            }
        }
        let stats = ch.shutdown();
        assert_eq!(seen.len(), 100);
        assert_eq!(stats.dispatched, 100);
        assert!(stats.max_in_flight.iter().all(|&m| m <= 1));
        assert!(stats.per_port.iter().all(|&n| n > 0));
    }

    #[test]
    fn one_port_one_worker_dispatches_in_submission_order() {
        let ch = Channel::uniform(echo(0), 1, ChannelConfig { record_dispatch: true, ..Default::default() });
        let hs: Vec<_> =
            (0..200u32).map(|i| ch.submit(RequestKind::Chat, "x", Origin::agent(AuthorId(i % 13))).unwrap()).collect();
        for h in hs {
            h.wait().unwrap();
        }
        let stats = ch.shutdown();
        assert_eq!(stats.dispatch_order, (0..200).collect::<Vec<u64>>());
    }

    #[test]
    fn backend_errors_come_back_through_the_handle() {
        let flaky: Arc<dyn Backend> = Arc::new(crate::backend::FaultyBackend::new(MockBackend::with_seed(0), [0]));
        let ch = Channel::uniform(flaky, 1, ChannelConfig::default());
        let err = ch.chat(Origin::agent(AuthorId(0)), "x").unwrap_err();
        assert_eq!(err, BackendError::Injected(0));
        assert!(ch.chat(Origin::agent(AuthorId(0)), "x").is_ok());
    }

    #[test]
    fn adaptive_wait_floor_ceiling_and_monotone() {
        let cfg = ChannelConfig { base_wait_us: 100, max_wait_us: 1_000, pending_threshold: 10, ..Default::default() };
        assert_eq!(adaptive_wait(0, &cfg), Duration::from_micros(100));
        assert_eq!(adaptive_wait(90, &cfg), Duration::from_micros(1_000));
        assert_eq!(adaptive_wait(10_000, &cfg), Duration::from_micros(1_000));
        let mut prev = Duration::ZERO;
        for p in 0..500 {
            let w = adaptive_wait(p, &cfg);
            assert!(w >= prev);
            prev = w;
        }
    }

    #[test]
    fn probe_reports_positive_wall_clock() {
        let row = throughput_probe(10, 2, 0, 1, ChannelConfig::default()).unwrap();
        assert_eq!(row.requests, 10);
        assert!(row.wall_clock_s > 0.0 && row.throughput > 0.0);
    }
}
