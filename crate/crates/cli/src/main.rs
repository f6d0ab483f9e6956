use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scisim_core::backend::PlantedEffects;
use scisim_core::channel::{throughput_probe, write_probe_csv, ChannelConfig};
use scisim_core::corpus::{
    ingest, CorpusError, FrequencyTopicSummarizer, IngestWindows, KeywordDisciplineClassifier, RankTable, StubEthnicityClassifier,
};
use scisim_core::metrics::{compare_signs, read_metrics, MetricsError};
use scisim_core::review::AcceptRule;
use scisim_core::sim::{self, RunOptions, RunSummary, SimulationConfig, SimulationError, CONFIG_FILE};
use scisim_core::synth::{generate, SynthConfig};
use scisim_core::{BackendMode, Corpus, Execution};

/// `println!` that exits quietly when stdout is a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        if let Err(e) = writeln!(std::io::stdout().lock(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            panic!("failed printing to stdout: {e}");
        }
    }};
}

/// Multi-agent simulation of a scientific research society.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend
/// error.
#[derive(Parser)]
#[command(name = "scisim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a corpus snapshot from raw author, paper and ranking files.
    Ingest(IngestArgs),
    /// Write a synthetic raw dataset that `ingest` accepts.
    Synth(SynthArgs),
    /// Run a simulation from a corpus snapshot.
    Simulate(SimulateArgs),
    /// Continue a checkpointed run.
    Resume(ResumeArgs),
    /// Recompute metrics.csv and correlations.csv from a finished run.
    Metrics {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare correlation signs between real and simulated metrics.
    Validate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        sim: PathBuf,
    },
    /// Measure channel throughput over agent and port counts.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    authors: PathBuf,
    #[arg(long)]
    papers: PathBuf,
    #[arg(long)]
    rankings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reference window, e.g. 2002-2009.
    #[arg(long, value_parser = parse_window)]
    reference_years: Option<(i32, i32)>,
    #[arg(long, value_parser = parse_window)]
    validation_years: Option<(i32, i32)>,
    #[arg(long, value_parser = parse_window)]
    author_years: Option<(i32, i32)>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    authors: usize,
    #[arg(long, default_value_t = 400)]
    reference: usize,
    #[arg(long, default_value_t = 100)]
    validation: usize,
    #[arg(long, default_value_t = 60)]
    institutions: usize,
}

/// Overrides applied on top of the config file.
#[derive(Args, Default)]
struct Overrides {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    team_rate: Option<f64>,
    #[arg(long)]
    max_led_teams: Option<usize>,
    #[arg(long)]
    memory_cap: Option<usize>,
    #[arg(long)]
    formation_prob: Option<f64>,
    #[arg(long)]
    accept_rule: Option<AcceptRule>,
    #[arg(long)]
    ports: Option<usize>,
    #[arg(long)]
    port_cap: Option<usize>,
    /// Microseconds.
    #[arg(long)]
    base_wait: Option<u64>,
    /// Microseconds.
    #[arg(long)]
    max_wait: Option<u64>,
    #[arg(long)]
    pending_threshold: Option<usize>,
    /// Live backend base URL; repeat for several.
    #[arg(long = "endpoint")]
    endpoints: Vec<String>,
    /// Encode the planted diversity and rank effects in the mock backend.
    #[arg(long)]
    planted: bool,
    #[arg(long)]
    sequential: bool,
    /// One port, one worker, sequential teams.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Corpus snapshot written by `ingest`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stop_after: Option<u32>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ResumeArgs {
    /// Run directory holding the checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stop_after: Option<u32>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
    agents: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    ports: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    latency_us: u64,
    #[arg(long, default_value_t = 4)]
    requests_per_agent: usize,
    #[arg(long, default_value = "scaling.csv")]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Sim(SimulationError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Sim(e) => e.exit_code() as u8,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Data(m) => f.write_str(m),
            CliError::Sim(e) => write!(f, "{e}"),
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        CliError::Sim(e)
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn parse_window(s: &str) -> Result<(i32, i32), String> {
    let (a, b) = s.split_once('-').ok_or_else(|| format!("expected START-END, got {s:?}"))?;
    let lo: i32 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let hi: i32 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if lo > hi {
        return Err(format!("empty window {s}"));
    }
    Ok((lo, hi))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn run_ingest(a: IngestArgs) -> Result<(), CliError> {
    let mut windows = IngestWindows::default();
    if let Some(w) = a.reference_years {
        windows.reference = w;
        windows.author = w;
    }
    if let Some(w) = a.validation_years {
        windows.validation = w;
    }
    if let Some(w) = a.author_years {
        windows.author = w;
    }
    let ranks = RankTable::from_csv(open(&a.rankings)?)?;
    let (corpus, report) = ingest(
        BufReader::new(open(&a.papers)?),
        BufReader::new(open(&a.authors)?),
        &windows,
        &KeywordDisciplineClassifier,
        &FrequencyTopicSummarizer::default(),
        &StubEthnicityClassifier::default(),
        &ranks,
    )?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    corpus.save(&a.out.join("corpus.json"))?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(a.out.join("ingest_report.json"), &text).map_err(|e| CliError::Data(e.to_string()))?;
    say!("{text}");
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_authors: a.authors,
        n_reference: a.reference,
        n_validation: a.validation,
        n_institutions: a.institutions,
        ..SynthConfig::default()
    };
    generate(&cfg).write(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    say!("wrote papers.jsonl, authors.jsonl and rankings.csv to {}", a.out.display());
    Ok(())
}

impl Overrides {
    fn apply(&self, mut cfg: SimulationConfig) -> SimulationConfig {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v.into(); })*
            };
        }
        set! {
            epochs => cfg.epochs,
            seed => cfg.seed,
            agents => cfg.n_agents,
            team_rate => cfg.team_rate,
            max_led_teams => cfg.max_led_teams,
            memory_cap => cfg.memory_cap,
            formation_prob => cfg.formation_prob,
            accept_rule => cfg.accept_rule,
            ports => cfg.ports,
            port_cap => cfg.channel.port_cap,
            base_wait => cfg.channel.base_wait_us,
            max_wait => cfg.channel.max_wait_us,
            pending_threshold => cfg.channel.pending_threshold,
        }
        if !self.endpoints.is_empty() {
            cfg.endpoints = self.endpoints.clone();
            cfg.backend = BackendMode::Live;
        }
        if self.planted {
            cfg.mock.planted.get_or_insert_with(PlantedEffects::default);
        }
        if self.sequential {
            cfg.execution = Execution::Sequential;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        cfg
    }

    fn load(&self, fallback: Option<&Path>) -> Result<SimulationConfig, CliError> {
        let base = match self.config.as_deref().or(fallback) {
            Some(path) => SimulationConfig::load(path)?,
            None => SimulationConfig::default(),
        };
        let cfg = self.apply(base);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(summary: &RunSummary, out: &Path) {
    if summary.already_complete {
        say!("run in {} is already complete; nothing to do", out.display());
        return;
    }
    say!(
        "epochs {} | teams {} | accepted {} | rejected {} | aborted {} | citation events {}",
        summary.epochs_completed,
        summary.teams_formed,
        summary.accepted,
        summary.rejected,
        summary.aborted,
        summary.citation_events
    );
    if summary.stopped_early {
        say!("stopped early; continue with `scisim resume --out {}`", out.display());
    } else {
        say!("outputs in {}", out.display());
    }
}

fn run_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let cfg = a.overrides.load(None)?;
    let corpus = Corpus::load(&a.corpus)?;
    let summary = sim::run_simulation(&cfg, corpus, &a.out, RunOptions { stop_after: a.stop_after })?;
    report(&summary, &a.out);
    Ok(())
}

fn run_resume(a: ResumeArgs) -> Result<(), CliError> {
    let saved = a.out.join(CONFIG_FILE);
    let cfg = a.overrides.load(Some(&saved))?;
    let summary = sim::resume(&cfg, &a.out, RunOptions { stop_after: a.stop_after })?;
    report(&summary, &a.out);
    Ok(())
}

fn run_validate(real: &Path, simulated: &Path) -> Result<(), CliError> {
    let real = read_metrics(real)?;
    let simulated = read_metrics(simulated)?;
    let fmt = |c: &Option<scisim_core::metrics::CorrelationReport>| match c {
        Some(c) => format!("{:+.4} (p={:.3e}, n={})", c.r, c.p_value, c.n),
        None => "undefined".to_string(),
    };
    say!("{:<10} {:<34} {:<34} signs", "factor", "real", "simulated");
    for c in compare_signs(&real, &simulated) {
        let agree = match c.signs_agree {
            Some(true) => "agree",
            Some(false) => "differ",
            None => "n/a",
        };
        say!("{:<10} {:<34} {:<34} {agree}", c.factor, fmt(&c.real), fmt(&c.simulated));
    }
    Ok(())
}

fn run_probe(a: ProbeArgs) -> Result<(), CliError> {
    if a.agents.contains(&0) || a.ports.contains(&0) {
        return Err(CliError::Config("agent and port counts must be positive".into()));
    }
    let mut rows = Vec::new();
    for &agents in &a.agents {
        for &ports in &a.ports {
            let row = throughput_probe(agents, ports, a.latency_us, a.requests_per_agent, ChannelConfig::default())
                .map_err(|e| CliError::Sim(SimulationError::Data(e.to_string())))?;
            say!(
                "agents {agents:>6} ports {ports:>3} requests {:>7} {:>9.3}s {:>10.1} req/s",
                row.requests,
                row.wall_clock_s,
                row.throughput
            );
            rows.push(row);
        }
    }
    write_probe_csv(&rows, &a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => run_ingest(a),
        Command::Synth(a) => run_synth(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Resume(a) => run_resume(a),
        Command::Metrics { snapshot, out } => {
            sim::snapshot_metrics(&snapshot, &out, Execution::Parallel).map_err(CliError::from).map(|skipped| {
                if skipped > 0 {
                    log::warn!("{skipped} papers with unresolved authors were left out");
                }
                say!("wrote metrics to {}", out.display());
            })
        }
        Command::Validate { real, sim } => run_validate(&real, &sim),
        Command::Probe(a) => run_probe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
