//! Pearson correlation against downstream score tables, and the chance level
//! of the weak-alignment score.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("length mismatch: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("{0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("duplicate language code {code:?} in table {source_label:?}")]
    DuplicateLanguage { code: String, source_label: String },
    #[error("tables {left:?} and {right:?} share {common} language codes, need at least 3")]
    InsufficientOverlap {
        left: String,
        right: String,
        common: usize,
    },
    #[error("k = {k} exceeds n = {n}")]
    KExceedsN { n: u64, k: u64 },
    #[error("n must be positive")]
    ZeroN,
    #[error("table {source_label:?}: expected header `language,value`, found {found:?}")]
    BadHeader {
        source_label: String,
        found: Vec<String>,
    },
    #[error("table {source_label:?}, line {line}: {message}")]
    BadRow {
        source_label: String,
        line: u64,
        message: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewPoints(x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(StatsError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(StatsError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Per-language values, e.g. alignment scores or benchmark accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub source: String,
    rows: Vec<(String, f64)>,
}

impl ScoreTable {
    pub fn new(source: impl Into<String>, rows: Vec<(String, f64)>) -> Result<Self, StatsError> {
        let source = source.into();
        let mut seen = HashSet::new();
        for (code, _) in &rows {
            if !seen.insert(code.as_str()) {
                return Err(StatsError::DuplicateLanguage {
                    code: code.clone(),
                    source_label: source,
                });
            }
        }
        Ok(Self { source, rows })
    }

    /// Reads `language,value` CSV.
    pub fn from_csv<R: Read>(source: impl Into<String>, reader: R) -> Result<Self, StatsError> {
        let source = source.into();
        let mut csv = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = csv.headers()?.iter().map(str::to_string).collect();
        if header != ["language", "value"] {
            return Err(StatsError::BadHeader {
                source_label: source,
                found: header,
            });
        }
        let mut rows = Vec::new();
        for record in csv.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let value = record[1].parse::<f64>().map_err(|e| StatsError::BadRow {
                source_label: source.clone(),
                line,
                message: format!("value {:?}: {e}", &record[1]),
            })?;
            rows.push((record[0].to_string(), value));
        }
        Self::new(source, rows)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, StatsError> {
        let path = path.as_ref();
        Self::from_csv(path.display().to_string(), std::fs::File::open(path)?)
    }

    pub fn rows(&self) -> &[(String, f64)] {
        &self.rows
    }

    pub fn get(&self, code: &str) -> Option<f64> {
        self.rows.iter().find(|(c, _)| c == code).map(|r| r.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub r: f64,
    pub n_common: usize,
    /// Joined language codes in lexicographic order.
    pub languages_used: Vec<String>,
    pub sources: (String, String),
}

impl CorrelationReport {
    pub fn summary(&self) -> String {
        format!(
            "pearson r = {:.6} over {} languages ({} vs {})",
            self.r, self.n_common, self.sources.0, self.sources.1
        )
    }
}

/// Pearson correlation over the inner join of two tables on exact language code.
pub fn correlate_tables(
    scores: &ScoreTable,
    perf: &ScoreTable,
) -> Result<CorrelationReport, StatsError> {
    let right: BTreeMap<&str, f64> = perf.rows.iter().map(|(c, v)| (c.as_str(), *v)).collect();
    let mut joined: Vec<(&str, f64, f64)> = scores
        .rows
        .iter()
        .filter_map(|(c, v)| right.get(c.as_str()).map(|w| (c.as_str(), *v, *w)))
        .collect();
    if joined.len() < 3 {
        return Err(StatsError::InsufficientOverlap {
            left: scores.source.clone(),
            right: perf.source.clone(),
            common: joined.len(),
        });
    }
    joined.sort_by(|a, b| a.0.cmp(b.0));
    let x: Vec<f64> = joined.iter().map(|j| j.1).collect();
    let y: Vec<f64> = joined.iter().map(|j| j.2).collect();
    Ok(CorrelationReport {
        r: pearson(&x, &y)?,
        n_common: joined.len(),
        languages_used: joined.iter().map(|j| j.0.to_string()).collect(),
        sources: (scores.source.clone(), perf.source.clone()),
    })
}

/// Chance that a given diagonal entry of a random `n x n` matrix beats the
/// other `2(n - 1)` entries of its row and column.
pub fn chance_alignment_probability(n: u64) -> f64 {
    1.0 / (2.0 * n as f64 - 1.0)
}

/// `P(X >= k)` for `X ~ Binomial(n, 1 / (2n - 1))`: the probability that a
/// random similarity matrix reaches weak-alignment score `k / n`.
///
/// The upper tail is summed directly (never `1 - lower tail`), starting from
/// a log-domain term, so tiny probabilities keep full relative precision.
pub fn robustness_pvalue(n: u64, k: u64) -> Result<f64, StatsError> {
    if n == 0 {
        return Err(StatsError::ZeroN);
    }
    if k > n {
        return Err(StatsError::KExceedsN { n, k });
    }
    if k == 0 {
        return Ok(1.0);
    }
    if n == 1 {
        // p = 1
        return Ok(1.0);
    }
    let p = chance_alignment_probability(n);
    let log_q = (-p).ln_1p();
    if k == 1 {
        return Ok(-(n as f64 * log_q).exp_m1());
    }
    let m = k.min(n - k);
    let log_binom: f64 = (1..=m).map(|j| ((n - m + j) as f64 / j as f64).ln()).sum();
    let log_first = log_binom + k as f64 * p.ln() + (n - k) as f64 * log_q;
    let odds = p / (1.0 - p);
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in k..n {
        term *= (n - i) as f64 / (i + 1) as f64 * odds;
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    Ok((log_first.exp() * sum).min(1.0))
}
