//! Diversity and impact statistics: Shannon entropy of author categories,
//! mean affiliation rank, citation counts, and Pearson correlations between
//! each factor and citations.

pub mod stats;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AuthorId, AuthorRecord, PaperId, PaperRecord};
use crate::par::{self, Execution};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("correlation undefined: {0}")]
    Undefined(String),
    #[error("paper {paper}: unresolvable author {author}")]
    UnresolvedAuthor { paper: PaperId, author: AuthorId },
    #[error("exponential fit: {0}")]
    Fit(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("CSV error on {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

const PROPORTION_TOLERANCE: f64 = 1e-9;

/// `-Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(proportions: &[f64]) -> Result<f64, MetricsError> {
    if proportions.is_empty() {
        return Err(MetricsError::Domain("empty proportion vector".into()));
    }
    if let Some(p) = proportions.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(MetricsError::Domain(format!("invalid proportion {p}")));
    }
    let sum: f64 = proportions.iter().sum();
    if (sum - 1.0).abs() > PROPORTION_TOLERANCE {
        return Err(MetricsError::Domain(format!("proportions sum to {sum}")));
    }
    let h: f64 = proportions.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    Ok(h.max(0.0))
}

/// Entropy of the empirical category distribution of `labels`; 0 when empty.
pub fn label_entropy<'a>(labels: impl IntoIterator<Item = &'a str>) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut n = 0usize;
    for l in labels {
        *counts.entry(l).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    let props: Vec<f64> = counts.values().map(|&c| c as f64 / n as f64).collect();
    shannon_entropy(&props).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Simulated,
    /// Real validation papers of the given calendar year.
    Real(i32),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Simulated => f.write_str("simulated"),
            Source::Real(y) => write!(f, "real{y}"),
        }
    }
}

impl FromStr for Source {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "simulated" {
            return Ok(Source::Simulated);
        }
        s.strip_prefix("real")
            .and_then(|y| y.parse().ok())
            .map(Source::Real)
            .ok_or_else(|| MetricsError::Domain(format!("unknown source {s:?}")))
    }
}

impl Serialize for Source {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub paper_id: PaperId,
    pub d_eth: f64,
    pub d_aff: f64,
    pub mean_rank: Option<f64>,
    pub citations: u64,
    pub source: Source,
}

/// Category used for authors without any listed affiliation.
pub const NO_AFFILIATION: &str = "<none>";

pub fn paper_metrics<'a, F>(paper: &PaperRecord, authors: F, source: Source) -> Result<MetricsRow, MetricsError>
where
    F: Fn(AuthorId) -> Option<&'a AuthorRecord>,
{
    let team = paper
        .author_ids
        .iter()
        .map(|&id| authors(id).ok_or(MetricsError::UnresolvedAuthor { paper: paper.paper_id, author: id }))
        .collect::<Result<Vec<_>, _>>()?;
    let d_eth = label_entropy(team.iter().map(|a| a.ethnicity.as_str()));
    let d_aff = label_entropy(team.iter().map(|a| a.first_affiliation().unwrap_or(NO_AFFILIATION)));
    let ranks: Vec<f64> = team.iter().filter_map(|a| a.affiliation_rank).map(f64::from).collect();
    let mean_rank = (!ranks.is_empty()).then(|| ranks.iter().sum::<f64>() / ranks.len() as f64);
    Ok(MetricsRow { paper_id: paper.paper_id, d_eth, d_aff, mean_rank, citations: paper.citation_count, source })
}

/// Metrics for many papers. Papers with unresolvable authors are skipped and
/// counted in the second return value.
pub fn batch_metrics(
    exec: Execution,
    papers: &[PaperRecord],
    authors: &BTreeMap<AuthorId, &AuthorRecord>,
    source_of: impl Fn(&PaperRecord) -> Source + Sync + Send,
) -> (Vec<MetricsRow>, usize) {
    let results = par::map(exec, papers, |p| paper_metrics(p, |id| authors.get(&id).copied(), source_of(p)));
    let mut rows = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::debug!("metrics skipped: {e}");
                skipped += 1;
            }
        }
    }
    (rows, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub factor: String,
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Pearson r and its two-sided p-value (t-test with n-2 degrees of freedom).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<(f64, f64), MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::Domain(format!("length mismatch {} vs {}", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 3 {
        return Err(MetricsError::Undefined(format!("need at least 3 samples, got {n}")));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::Undefined("zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        stats::student_t_two_sided(t, df)
    };
    Ok((r, p))
}

pub const FACTORS: [&str; 3] = ["d_eth", "d_aff", "mean_rank"];

/// Factor-vs-citation correlations for one source. Rows without a mean rank
/// drop out of the rank correlation only; undefined correlations are
/// omitted.
pub fn correlate(rows: &[MetricsRow], source: Source) -> Vec<CorrelationReport> {
    correlate_labelled(rows.iter().filter(|r| r.source == source), &source.to_string())
}

fn correlate_labelled<'a>(rows: impl Iterator<Item = &'a MetricsRow>, label: &str) -> Vec<CorrelationReport> {
    let rows: Vec<&MetricsRow> = rows.collect();
    let mut out = Vec::new();
    for factor in FACTORS {
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter_map(|r| {
                let x = match factor {
                    "d_eth" => Some(r.d_eth),
                    "d_aff" => Some(r.d_aff),
                    _ => r.mean_rank,
                };
                x.map(|x| (x, r.citations as f64))
            })
            .unzip();
        match pearson(&xs, &ys) {
            Ok((r, p_value)) => out.push(CorrelationReport { factor: format!("{label}:{factor}"), r, p_value, n: xs.len() }),
            Err(e) => log::info!("{label}:{factor}: {e}"),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialFit {
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub bins: usize,
}

/// Least squares of `ln(frequency)` on size over the occupied bins, each bin
/// weighted by its count (the variance of a log count is about `1/count`).
/// `r_squared` is the weighted coefficient of determination.
pub fn fit_exponential(histogram: &BTreeMap<u32, u64>) -> Result<ExponentialFit, MetricsError> {
    let pts: Vec<(f64, f64, f64)> =
        histogram.iter().filter(|(_, &c)| c > 0).map(|(&s, &c)| (f64::from(s), (c as f64).ln(), c as f64)).collect();
    if pts.len() < 3 {
        return Err(MetricsError::Fit(format!("need at least 3 occupied bins, got {}", pts.len())));
    }
    let w: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / w;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / w;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| p.2 * (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(ExponentialFit { rate: -slope, intercept, r_squared, bins: pts.len() })
}

pub fn histogram<I: IntoIterator<Item = u32>>(sizes: I) -> BTreeMap<u32, u64> {
    let mut h = BTreeMap::new();
    for s in sizes {
        *h.entry(s).or_insert(0) += 1;
    }
    h
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CORRELATIONS_FILE: &str = "correlations.csv";

#[derive(Serialize, Deserialize)]
struct MetricsCsvRow {
    paper_id: u64,
    d_eth: f64,
    d_aff: f64,
    mean_rank: Option<f64>,
    citations: u64,
    source: Source,
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> MetricsError + '_ {
    move |source| MetricsError::Csv { path: path.to_path_buf(), source }
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<(), MetricsError> {
    let file = File::create(path).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(["paper_id", "d_eth", "d_aff", "mean_rank", "citations", "source"]).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(MetricsCsvRow {
            paper_id: r.paper_id.0,
            d_eth: r.d_eth,
            d_aff: r.d_aff,
            mean_rank: r.mean_rank,
            citations: r.citations,
            source: r.source,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    rdr.deserialize::<MetricsCsvRow>()
        .map(|r| {
            r.map(|r| MetricsRow {
                paper_id: PaperId(r.paper_id),
                d_eth: r.d_eth,
                d_aff: r.d_aff,
                mean_rank: r.mean_rank,
                citations: r.citations,
                source: r.source,
            })
            .map_err(csv_err(path))
        })
        .collect()
}

pub fn write_correlations(reports: &[CorrelationReport], path: &Path) -> Result<(), MetricsError> {
    let file = File::create(path).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(["factor", "r", "p_value", "n"]).map_err(csv_err(path))?;
    for r in reports {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
}

pub fn read_correlations(path: &Path) -> Result<Vec<CorrelationReport>, MetricsError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    rdr.deserialize().map(|r| r.map_err(csv_err(path))).collect()
}

/// Writes `metrics.csv` and `correlations.csv` into `dir`.
pub fn export_metrics(rows: &[MetricsRow], reports: &[CorrelationReport], dir: &Path) -> Result<(), MetricsError> {
    std::fs::create_dir_all(dir).map_err(|source| MetricsError::Io { path: dir.to_path_buf(), source })?;
    write_metrics(rows, &dir.join(METRICS_FILE))?;
    write_correlations(reports, &dir.join(CORRELATIONS_FILE))
}

/// Side-by-side sign comparison of real and simulated correlations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignComparison {
    pub factor: String,
    pub real: Option<CorrelationReport>,
    pub simulated: Option<CorrelationReport>,
    pub signs_agree: Option<bool>,
}

/// Correlations over all real rows of `real` against all simulated rows of
/// `simulated`, factor by factor.
pub fn compare_signs(real: &[MetricsRow], simulated: &[MetricsRow]) -> Vec<SignComparison> {
    let real = correlate_labelled(real.iter().filter(|r| matches!(r.source, Source::Real(_))), "real");
    let sim = correlate_labelled(simulated.iter().filter(|r| r.source == Source::Simulated), "simulated");
    FACTORS
        .iter()
        .map(|f| {
            let find = |set: &[CorrelationReport]| set.iter().find(|c| c.factor.rsplit(':').next() == Some(*f)).cloned();
            let (real, simulated) = (find(&real), find(&sim));
            let signs_agree = match (&real, &simulated) {
                (Some(a), Some(b)) => Some(a.r.signum() == b.r.signum()),
                _ => None,
            };
            SignComparison { factor: f.to_string(), real, simulated, signs_agree }
        })
        .collect()
}
