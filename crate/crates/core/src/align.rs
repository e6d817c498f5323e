//! Cosine similarity matrices and the weak-alignment score.
//!
//! For a parallel corpus of `n` sentence pairs, pair `i` is weakly aligned at
//! a layer when `c_ii` strictly exceeds every other entry of row `i` and of
//! column `i` in the cosine matrix. The score is the fraction of weakly
//! aligned pairs; a language pair's score is the mean over selected layers.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dump::ActivationDump;
use crate::error::Result;
use crate::matrix::Matrix;
use crate::repr::{build_sentence_matrices_for, PoolingStrategy, ReprKind, SentenceMatrix};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("sentence count mismatch: source has {src}, target has {tgt}")]
    SentenceCountMismatch { src: usize, tgt: usize },
    #[error("layer count mismatch: source has {src}, target has {tgt}")]
    LayerCountMismatch { src: usize, tgt: usize },
    #[error("unit count mismatch: source has {src}, target has {tgt}")]
    UnitMismatch { src: usize, tgt: usize },
    #[error("dump kind mismatch between source and target")]
    KindMismatch,
    #[error("cannot compare layer {src} with layer {tgt}")]
    LayerMismatch { src: usize, tgt: usize },
    #[error("layer selection is empty")]
    EmptyLayerSelection,
    #[error("layer {layer} out of range (dumps have {n_layers})")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error(
        "invalid layer selection {0:?}: expected \"all\" or a comma-separated list of indices"
    )]
    BadLayerSelection(String),
    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("similarity matrix is empty")]
    Empty,
}

/// Cosine similarities between sentences of two languages at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub layer: usize,
    pub row_language: String,
    pub column_language: String,
    data: Matrix,
    /// Zero-norm sentence vectors met while building the matrix (both sides).
    pub zero_vector_count: usize,
}

impl SimilarityMatrix {
    pub fn new(
        layer: usize,
        row_language: impl Into<String>,
        column_language: impl Into<String>,
        data: Matrix,
    ) -> Result<Self, AlignError> {
        if !data.is_square() {
            return Err(AlignError::NonSquare {
                rows: data.rows(),
                cols: data.cols(),
            });
        }
        Ok(Self {
            layer,
            row_language: row_language.into(),
            column_language: column_language.into(),
            data,
            zero_vector_count: 0,
        })
    }

    /// Unlabelled matrix from rows, mostly for tests and tooling.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, AlignError> {
        let data = Matrix::from_rows(rows).ok_or(AlignError::NonSquare {
            rows: rows.len(),
            cols: 0,
        })?;
        Self::new(0, "", "", data)
    }

    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data.get(i, j)
    }
}

fn normalized_rows(m: &Matrix) -> (nalgebra::DMatrix<f64>, usize) {
    let mut zeros = 0;
    let mut out = m.to_dmatrix();
    for mut row in out.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        } else {
            zeros += 1;
        }
    }
    (out, zeros)
}

/// Entry `(i, j)` is the cosine of sentence `i` of `a` and sentence `j` of `b`.
/// Pairs involving a zero vector get 0.
pub fn cosine_matrix(
    a: &SentenceMatrix,
    b: &SentenceMatrix,
) -> Result<SimilarityMatrix, AlignError> {
    if a.layer != b.layer {
        return Err(AlignError::LayerMismatch {
            src: a.layer,
            tgt: b.layer,
        });
    }
    if a.data.rows() != b.data.rows() {
        return Err(AlignError::SentenceCountMismatch {
            src: a.data.rows(),
            tgt: b.data.rows(),
        });
    }
    if a.data.cols() != b.data.cols() {
        return Err(AlignError::UnitMismatch {
            src: a.data.cols(),
            tgt: b.data.cols(),
        });
    }
    let (na, za) = normalized_rows(&a.data);
    let (nb, zb) = normalized_rows(&b.data);
    let mut sims = Matrix::from_dmatrix(&(na * nb.transpose()));
    let n = sims.rows();
    for i in 0..n {
        for v in sims.row_mut(i) {
            *v = v.clamp(-1.0, 1.0);
        }
    }
    let mut out = SimilarityMatrix::new(a.layer, a.language.clone(), b.language.clone(), sims)?;
    out.zero_vector_count = za + zb;
    Ok(out)
}

/// Per-pair weak-alignment indicator over a square matrix.
pub fn weak_alignment_hits(c: &Matrix) -> Result<Vec<bool>, AlignError> {
    if !c.is_square() {
        return Err(AlignError::NonSquare {
            rows: c.rows(),
            cols: c.cols(),
        });
    }
    let n = c.rows();
    Ok((0..n)
        .map(|i| {
            let d = c.get(i, i);
            (0..n).all(|j| j == i || (d > c.get(i, j) && d > c.get(j, i)))
        })
        .collect())
}

/// Fraction of weakly aligned pairs. Ties fail; `n = 1` scores 1.
pub fn weak_alignment_score(c: &SimilarityMatrix) -> Result<f64, AlignError> {
    if c.n() == 0 {
        return Err(AlignError::Empty);
    }
    let hits = weak_alignment_hits(&c.data)?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / c.n() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LayerSelection {
    #[default]
    All,
    Explicit(Vec<usize>),
}

impl LayerSelection {
    /// Concrete layer indices for a dump with `n_layers` layers.
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>, AlignError> {
        let layers = match self {
            LayerSelection::All => (0..n_layers).collect::<Vec<_>>(),
            LayerSelection::Explicit(ls) => ls.clone(),
        };
        if layers.is_empty() {
            return Err(AlignError::EmptyLayerSelection);
        }
        if let Some(&layer) = layers.iter().find(|&&l| l >= n_layers) {
            return Err(AlignError::LayerOutOfRange { layer, n_layers });
        }
        Ok(layers)
    }
}

impl FromStr for LayerSelection {
    type Err = AlignError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(LayerSelection::All);
        }
        s.split(',')
            .map(|part| part.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(LayerSelection::Explicit)
            .map_err(|_| AlignError::BadLayerSelection(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDescriptor {
    /// `nasca`, `navca`, `mexa`, or a baseline name.
    pub name: String,
    pub repr: ReprKind,
    pub pooling: PoolingStrategy,
    pub aggregation: String,
}

/// Extra per-layer detail carried by baseline reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineDetails {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_retained: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retained_ranks: Option<Vec<[usize; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped_neurons: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub method: MethodDescriptor,
    pub language_pair: (String, String),
    pub layers: Vec<usize>,
    pub per_layer_scores: Vec<f64>,
    pub aggregated_score: f64,
    pub n_sentences: usize,
    pub zero_vector_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineDetails>,
}

impl AlignmentReport {
    pub fn summary(&self) -> String {
        format!(
            "{} {}-{}: {:.6} (mean of {} layers, n = {})",
            self.method.name,
            self.language_pair.0,
            self.language_pair.1,
            self.aggregated_score,
            self.layers.len(),
            self.n_sentences
        )
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Checks that two dumps describe the same parallel corpus layout.
pub(crate) fn check_parallel(a: &ActivationDump, b: &ActivationDump) -> Result<(), AlignError> {
    let (ma, mb) = (a.manifest(), b.manifest());
    if ma.n_sentences != mb.n_sentences {
        return Err(AlignError::SentenceCountMismatch {
            src: ma.n_sentences,
            tgt: mb.n_sentences,
        });
    }
    if ma.n_layers != mb.n_layers {
        return Err(AlignError::LayerCountMismatch {
            src: ma.n_layers,
            tgt: mb.n_layers,
        });
    }
    if ma.kind != mb.kind {
        return Err(AlignError::KindMismatch);
    }
    if ma.n_units != mb.n_units {
        return Err(AlignError::UnitMismatch {
            src: ma.n_units,
            tgt: mb.n_units,
        });
    }
    Ok(())
}

/// Sentence matrices for both dumps at the selected layers.
pub(crate) fn paired_matrices(
    a: &ActivationDump,
    b: &ActivationDump,
    kind: ReprKind,
    strategy: PoolingStrategy,
    selection: &LayerSelection,
) -> Result<(Vec<usize>, Vec<SentenceMatrix>, Vec<SentenceMatrix>)> {
    check_parallel(a, b)?;
    let layers = selection.resolve(a.manifest().n_layers)?;
    let ma = build_sentence_matrices_for(a, kind, strategy, &layers)?;
    let mb = build_sentence_matrices_for(b, kind, strategy, &layers)?;
    Ok((layers, ma, mb))
}

/// Weak-alignment score of every selected layer, aggregated by mean.
pub fn layer_scores(
    src: &ActivationDump,
    tgt: &ActivationDump,
    kind: ReprKind,
    strategy: PoolingStrategy,
    selection: &LayerSelection,
) -> Result<AlignmentReport> {
    let (layers, ma, mb) = paired_matrices(src, tgt, kind, strategy, selection)?;
    let per_layer: Vec<(f64, usize)> = ma
        .par_iter()
        .zip(mb.par_iter())
        .map(|(x, y)| {
            let c = cosine_matrix(x, y)?;
            Ok((weak_alignment_score(&c)?, c.zero_vector_count))
        })
        .collect::<Result<Vec<_>, AlignError>>()?;
    let per_layer_scores: Vec<f64> = per_layer.iter().map(|p| p.0).collect();
    Ok(AlignmentReport {
        method: MethodDescriptor {
            name: kind.score_name().to_string(),
            repr: kind,
            pooling: strategy,
            aggregation: "mean".into(),
        },
        language_pair: (
            src.manifest().language.clone(),
            tgt.manifest().language.clone(),
        ),
        aggregated_score: mean(&per_layer_scores),
        per_layer_scores,
        layers,
        n_sentences: src.manifest().n_sentences,
        zero_vector_count: per_layer.iter().map(|p| p.1).sum(),
        baseline: None,
    })
}
