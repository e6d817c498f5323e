//! Sentence representations from token activations.
//!
//! A neuron is active when its activation is strictly positive (NAS), its
//! magnitude is the absolute activation (NAV), and hidden states are used as
//! is (EMB). Token rows are then pooled into one vector per sentence and
//! layer. All accumulation is done in `f64`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dump::{
    ActivationDump, Dtype, DumpError, DumpKind, DumpManifest, Level, Pooling, StateTransform,
};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReprKind {
    /// Binary activation state.
    Nas,
    /// Absolute activation value.
    Nav,
    /// Raw hidden state.
    Emb,
}

impl ReprKind {
    pub fn dump_kind(self) -> DumpKind {
        match self {
            ReprKind::Nas | ReprKind::Nav => DumpKind::FfnActivation,
            ReprKind::Emb => DumpKind::HiddenState,
        }
    }

    pub fn state(self) -> StateTransform {
        match self {
            ReprKind::Nas => StateTransform::Nas,
            ReprKind::Nav => StateTransform::Nav,
            ReprKind::Emb => StateTransform::Raw,
        }
    }

    /// Name of the alignment score computed from this representation.
    pub fn score_name(self) -> &'static str {
        match self {
            ReprKind::Nas => "nasca",
            ReprKind::Nav => "navca",
            ReprKind::Emb => "mexa",
        }
    }
}

impl fmt::Display for ReprKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReprKind::Nas => "nas",
            ReprKind::Nav => "nav",
            ReprKind::Emb => "emb",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingStrategy {
    /// Position-weighted mean, weight `t / (1 + 2 + ... + T)` for token `t`.
    Weighted,
    Average,
    Last,
}

impl fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingStrategy::Weighted => "weighted",
            PoolingStrategy::Average => "average",
            PoolingStrategy::Last => "last",
        })
    }
}

impl FromStr for ReprKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nas" => Ok(ReprKind::Nas),
            "nav" => Ok(ReprKind::Nav),
            "emb" => Ok(ReprKind::Emb),
            other => Err(format!("unknown representation {other:?} (nas, nav, emb)")),
        }
    }
}

impl FromStr for PoolingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "weighted" => Ok(PoolingStrategy::Weighted),
            "average" => Ok(PoolingStrategy::Average),
            "last" => Ok(PoolingStrategy::Last),
            other => Err(format!(
                "unknown pooling {other:?} (weighted, average, last)"
            )),
        }
    }
}

/// Pooled sentence representations at one layer, `n_sentences x n_units`.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceMatrix {
    pub layer: usize,
    pub repr: ReprKind,
    pub language: String,
    pub data: Matrix,
}

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("cannot pool an empty sentence (T = 0)")]
    EmptySentence,
    #[error("{len} values do not form rows of width {n_units}")]
    Shape { len: usize, n_units: usize },
    #[error("representation {repr} needs a {needed:?} dump, got {found:?}")]
    IncompatibleKind {
        repr: ReprKind,
        needed: DumpKind,
        found: DumpKind,
    },
    #[error("dump state {recorded:?} cannot produce representation {requested}")]
    StateMismatch {
        recorded: StateTransform,
        requested: ReprKind,
    },
    #[error("pooled dump was pooled with {recorded:?}, requested {requested}")]
    PoolingMismatch {
        recorded: Pooling,
        requested: PoolingStrategy,
    },
    #[error("dump is already pooled")]
    AlreadyPooled,
    #[error("layer {layer} out of range (dump has {n_layers})")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[inline]
pub fn detect_state(activation: f32, kind: ReprKind) -> f32 {
    match kind {
        ReprKind::Nas => {
            if activation > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ReprKind::Nav => activation.abs(),
        ReprKind::Emb => activation,
    }
}

/// Element-wise state detection over a row-major `T x n_units` block.
pub fn detect_states(token_activations: &[f32], kind: ReprKind) -> Vec<f32> {
    token_activations
        .iter()
        .map(|&a| detect_state(a, kind))
        .collect()
}

/// Normalized position ramp `w_t = t / sum(1..=T)`, `t` 1-based.
pub fn position_weights(n_tokens: usize) -> Vec<f64> {
    let total = n_tokens as f64 * (n_tokens as f64 + 1.0) / 2.0;
    (1..=n_tokens).map(|t| t as f64 / total).collect()
}

/// Pools a row-major `T x n_units` block into one `n_units` vector.
pub fn pool_sentence(
    states: &[f32],
    n_units: usize,
    strategy: PoolingStrategy,
) -> Result<Vec<f64>, ReprError> {
    pool_mapped(states, n_units, strategy, f64::from)
}

fn pool_mapped(
    states: &[f32],
    n_units: usize,
    strategy: PoolingStrategy,
    map: impl Fn(f32) -> f64,
) -> Result<Vec<f64>, ReprError> {
    if n_units == 0 || !states.len().is_multiple_of(n_units) {
        return Err(ReprError::Shape {
            len: states.len(),
            n_units,
        });
    }
    let n_tokens = states.len() / n_units;
    if n_tokens == 0 {
        return Err(ReprError::EmptySentence);
    }
    let rows = states.chunks_exact(n_units);
    let mut acc = vec![0.0f64; n_units];
    match strategy {
        PoolingStrategy::Weighted => {
            // sum_t t * row_t, divided once by the integer ramp total
            for (t, row) in rows.enumerate() {
                let w = (t + 1) as f64;
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += w * map(v);
                }
            }
            let total = n_tokens as f64 * (n_tokens as f64 + 1.0) / 2.0;
            acc.iter_mut().for_each(|a| *a /= total);
        }
        PoolingStrategy::Average => {
            for row in rows {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += map(v);
                }
            }
            acc.iter_mut().for_each(|a| *a /= n_tokens as f64);
        }
        PoolingStrategy::Last => {
            let last = &states[(n_tokens - 1) * n_units..];
            for (a, &v) in acc.iter_mut().zip(last) {
                *a = map(v);
            }
        }
    }
    Ok(acc)
}

/// Checks that `dump` can yield `kind` representations pooled with `strategy`.
///
/// A pooled dump recording raw states with every sentence one token long is
/// accepted for any kind and strategy: with `T = 1` pooling is the identity,
/// so detection can run after it.
pub fn check_compatible(
    manifest: &DumpManifest,
    kind: ReprKind,
    strategy: PoolingStrategy,
) -> Result<(), ReprError> {
    if manifest.kind != kind.dump_kind() {
        return Err(ReprError::IncompatibleKind {
            repr: kind,
            needed: kind.dump_kind(),
            found: manifest.kind,
        });
    }
    let single_token = manifest.token_counts.iter().all(|&t| t == 1);
    let raw_ok = manifest.state == StateTransform::Raw;
    match manifest.level {
        Level::Token => {
            if !raw_ok && manifest.state != kind.state() {
                return Err(ReprError::StateMismatch {
                    recorded: manifest.state,
                    requested: kind,
                });
            }
        }
        Level::Pooled => {
            if raw_ok && single_token {
                return Ok(());
            }
            if manifest.state != kind.state() {
                return Err(ReprError::StateMismatch {
                    recorded: manifest.state,
                    requested: kind,
                });
            }
            if manifest.pooling != Pooling::from(strategy) && !single_token {
                return Err(ReprError::PoolingMismatch {
                    recorded: manifest.pooling,
                    requested: strategy,
                });
            }
        }
    }
    Ok(())
}

fn sentence_matrix_at(
    dump: &ActivationDump,
    layer: usize,
    kind: ReprKind,
    strategy: PoolingStrategy,
) -> Result<SentenceMatrix, ReprError> {
    let m = dump.manifest();
    // stored states were already detected (u1 bits, pooled nas/nav)
    let detect = m.state == StateTransform::Raw;
    let mut data = Matrix::zeros(m.n_sentences, m.n_units);
    for s in 0..m.n_sentences {
        let pooled = pool_mapped(dump.tensor(s, layer), m.n_units, strategy, |v| {
            f64::from(if detect { detect_state(v, kind) } else { v })
        })?;
        data.row_mut(s).copy_from_slice(&pooled);
    }
    Ok(SentenceMatrix {
        layer,
        repr: kind,
        language: m.language.clone(),
        data,
    })
}

/// One `n_sentences x n_units` matrix per layer, in layer order.
pub fn build_sentence_matrices(
    dump: &ActivationDump,
    kind: ReprKind,
    strategy: PoolingStrategy,
) -> Result<Vec<SentenceMatrix>, ReprError> {
    let layers: Vec<usize> = (0..dump.manifest().n_layers).collect();
    build_sentence_matrices_for(dump, kind, strategy, &layers)
}

/// Like [`build_sentence_matrices`], restricted to `layers` (output follows that order).
pub fn build_sentence_matrices_for(
    dump: &ActivationDump,
    kind: ReprKind,
    strategy: PoolingStrategy,
    layers: &[usize],
) -> Result<Vec<SentenceMatrix>, ReprError> {
    check_compatible(dump.manifest(), kind, strategy)?;
    let n_layers = dump.manifest().n_layers;
    if let Some(&layer) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(ReprError::LayerOutOfRange { layer, n_layers });
    }
    layers
        .par_iter()
        .map(|&l| sentence_matrix_at(dump, l, kind, strategy))
        .collect()
}

/// Pools a token-level dump into a pooled-level dump, the way an extractor
/// writing pooled output would (states detected first, then pooled).
pub fn pool_dump(
    dump: &ActivationDump,
    kind: ReprKind,
    strategy: PoolingStrategy,
) -> Result<ActivationDump, ReprError> {
    let m = dump.manifest();
    if m.level == Level::Pooled {
        return Err(ReprError::AlreadyPooled);
    }
    check_compatible(m, kind, strategy)?;
    let mut tensors = Vec::with_capacity(m.n_sentences * m.n_layers);
    for s in 0..m.n_sentences {
        for l in 0..m.n_layers {
            let pooled = pool_mapped(dump.tensor(s, l), m.n_units, strategy, |v| {
                f64::from(detect_state(v, kind))
            })?;
            tensors.push(pooled.into_iter().map(|v| v as f32).collect());
        }
    }
    let manifest = DumpManifest {
        level: Level::Pooled,
        pooling: strategy.into(),
        dtype: Dtype::F32,
        state: kind.state(),
        ..m.clone()
    };
    Ok(ActivationDump::new(manifest, tensors)?)
}

/// Writes one CSV row per sentence: `sentence,u0,u1,...`.
pub fn write_sentence_matrix_csv<W: Write>(
    matrix: &SentenceMatrix,
    sink: W,
) -> Result<(), ReprError> {
    let mut writer = csv::Writer::from_writer(sink);
    let mut header = vec!["sentence".to_string()];
    header.extend((0..matrix.data.cols()).map(|j| format!("u{j}")));
    writer.write_record(&header)?;
    for (i, row) in matrix.data.iter_rows().enumerate() {
        let mut record = Vec::with_capacity(row.len() + 1);
        record.push(i.to_string());
        record.extend(row.iter().map(|v| v.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
