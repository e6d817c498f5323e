//! Exact parallel-sentence retrieval over cosine similarity matrices.
//!
//! Per-layer similarities are max-pooled across layers before the nearest
//! neighbour search. Argmax ties break to the lowest index.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{cosine_matrix, paired_matrices, LayerSelection, SimilarityMatrix};
use crate::dump::ActivationDump;
use crate::error::Result;
use crate::matrix::Matrix;
use crate::repr::{PoolingStrategy, ReprKind};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no similarity matrices to pool")]
    NoLayers,
    #[error("similarity matrices disagree in shape: {expected} vs {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("layer {layer} is not among the selected layers")]
    LayerNotSelected { layer: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SrcToTgt,
    TgtToSrc,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerAggregation {
    MaxOverLayers,
    SingleLayer(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
    /// Queries whose best similarity was shared by more than one candidate.
    pub ties: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_aggregation: Option<LayerAggregation>,
    /// Per-sentence hit/miss, exported separately as CSV.
    #[serde(skip)]
    pub hits: Vec<bool>,
}

impl RetrievalReport {
    fn from_hits(direction: Direction, hits: Vec<bool>, ties: usize) -> Self {
        let correct = hits.iter().filter(|&&h| h).count();
        let n = hits.len();
        Self {
            direction,
            accuracy: if n == 0 {
                0.0
            } else {
                correct as f64 / n as f64
            },
            correct,
            n,
            ties,
            layer_aggregation: None,
            hits,
        }
    }
}

/// Element-wise maximum over per-layer similarity matrices.
pub fn layer_max_similarity(sims: &[SimilarityMatrix]) -> Result<Matrix, RetrievalError> {
    let first = sims.first().ok_or(RetrievalError::NoLayers)?;
    let mut out = first.data().clone();
    for s in &sims[1..] {
        if s.n() != first.n() {
            return Err(RetrievalError::ShapeMismatch {
                expected: first.n(),
                found: s.n(),
            });
        }
        for i in 0..out.rows() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(s.data().row(i)) {
                *o = o.max(v);
            }
        }
    }
    Ok(out)
}

/// Index of the first maximum and whether the maximum is shared.
fn argmax(values: impl Iterator<Item = f64>) -> (usize, bool) {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    let mut tied = false;
    for (j, v) in values.enumerate() {
        if v > best_value || j == 0 {
            best = j;
            best_value = v;
            tied = false;
        } else if v == best_value {
            tied = true;
        }
    }
    (best, tied)
}

fn direction_hits(sim: &Matrix, direction: Direction) -> (Vec<bool>, usize) {
    let n = sim.rows();
    let results: Vec<(bool, bool)> = (0..n)
        .map(|q| {
            let (best, tied) = match direction {
                Direction::SrcToTgt => argmax(sim.row(q).iter().copied()),
                Direction::TgtToSrc => argmax((0..n).map(|i| sim.get(i, q))),
                Direction::Bidirectional => unreachable!("handled by caller"),
            };
            (best == q, tied)
        })
        .collect();
    let ties = results.iter().filter(|r| r.1).count();
    (results.into_iter().map(|r| r.0).collect(), ties)
}

fn check_square(sim: &Matrix) -> Result<(), RetrievalError> {
    if sim.is_square() {
        Ok(())
    } else {
        Err(RetrievalError::NonSquare {
            rows: sim.rows(),
            cols: sim.cols(),
        })
    }
}

/// Accuracy of nearest-neighbour retrieval in one direction.
///
/// `SrcToTgt` searches each row, `TgtToSrc` each column. Passing
/// `Bidirectional` is the same as [`bidirectional_accuracy`].
pub fn directional_accuracy(
    sim: &Matrix,
    direction: Direction,
) -> Result<RetrievalReport, RetrievalError> {
    check_square(sim)?;
    if direction == Direction::Bidirectional {
        return bidirectional_accuracy(sim);
    }
    let (hits, ties) = direction_hits(sim, direction);
    Ok(RetrievalReport::from_hits(direction, hits, ties))
}

/// A pair counts only if it is retrieved correctly in both directions.
pub fn bidirectional_accuracy(sim: &Matrix) -> Result<RetrievalReport, RetrievalError> {
    check_square(sim)?;
    let (fwd, ties_fwd) = direction_hits(sim, Direction::SrcToTgt);
    let (bwd, ties_bwd) = direction_hits(sim, Direction::TgtToSrc);
    let hits = fwd.iter().zip(&bwd).map(|(&a, &b)| a && b).collect();
    Ok(RetrievalReport::from_hits(
        Direction::Bidirectional,
        hits,
        ties_fwd + ties_bwd,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub repr: ReprKind,
    pub pooling: PoolingStrategy,
    pub language_pair: (String, String),
    pub layers: Vec<usize>,
    pub layer_aggregation: LayerAggregation,
    pub n_sentences: usize,
    pub zero_vector_count: usize,
    pub src_to_tgt: RetrievalReport,
    pub tgt_to_src: RetrievalReport,
    pub bidirectional: RetrievalReport,
}

impl RetrievalSummary {
    pub fn summary(&self) -> String {
        format!(
            "retrieval {}-{} ({}): src->tgt {:.4}, tgt->src {:.4}, both {:.4} (n = {})",
            self.language_pair.0,
            self.language_pair.1,
            self.repr,
            self.src_to_tgt.accuracy,
            self.tgt_to_src.accuracy,
            self.bidirectional.accuracy,
            self.n_sentences
        )
    }

    /// One row per sentence: `sentence,src_to_tgt,tgt_to_src,bidirectional` as 0/1.
    pub fn write_hits_csv<W: Write>(&self, sink: W) -> Result<(), RetrievalError> {
        let mut writer = csv::Writer::from_writer(sink);
        writer.write_record(["sentence", "src_to_tgt", "tgt_to_src", "bidirectional"])?;
        for i in 0..self.n_sentences {
            let bit = |r: &RetrievalReport| u8::from(r.hits[i]).to_string();
            writer.write_record([
                i.to_string(),
                bit(&self.src_to_tgt),
                bit(&self.tgt_to_src),
                bit(&self.bidirectional),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Runs all three retrieval directions between two parallel dumps.
pub fn retrieve(
    src: &ActivationDump,
    tgt: &ActivationDump,
    kind: ReprKind,
    strategy: PoolingStrategy,
    selection: &LayerSelection,
    aggregation: LayerAggregation,
) -> Result<RetrievalSummary> {
    let selection = match aggregation {
        LayerAggregation::MaxOverLayers => selection.clone(),
        LayerAggregation::SingleLayer(l) => LayerSelection::Explicit(vec![l]),
    };
    let (layers, ma, mb) = paired_matrices(src, tgt, kind, strategy, &selection)?;
    let sims = ma
        .par_iter()
        .zip(mb.par_iter())
        .map(|(x, y)| cosine_matrix(x, y))
        .collect::<Result<Vec<_>, _>>()?;
    let zero_vector_count = sims.iter().map(|s| s.zero_vector_count).sum();
    let pooled = layer_max_similarity(&sims)?;
    let tag = |mut r: RetrievalReport| {
        r.layer_aggregation = Some(aggregation);
        r
    };
    Ok(RetrievalSummary {
        repr: kind,
        pooling: strategy,
        language_pair: (
            src.manifest().language.clone(),
            tgt.manifest().language.clone(),
        ),
        layers,
        layer_aggregation: aggregation,
        n_sentences: src.manifest().n_sentences,
        zero_vector_count,
        src_to_tgt: tag(directional_accuracy(&pooled, Direction::SrcToTgt)?),
        tgt_to_src: tag(directional_accuracy(&pooled, Direction::TgtToSrc)?),
        bidirectional: tag(bidirectional_accuracy(&pooled)?),
    })
}
