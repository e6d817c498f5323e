//! Representation-similarity baselines: linear CKA, SVCCA and ANC.
//!
//! Each maps two parallel `n x d` representation matrices (rows are the same
//! sentences in two languages) to one scalar.

use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{
    mean, paired_matrices, AlignmentReport, BaselineDetails, LayerSelection, MethodDescriptor,
};
use crate::dump::ActivationDump;
use crate::error::Result;
use crate::matrix::Matrix;
use crate::repr::{PoolingStrategy, ReprKind};

/// Singular values at or below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-10;

pub const DEFAULT_VARIANCE_RETAINED: f64 = 0.99;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample count mismatch: {x} vs {y}")]
    SampleMismatch { x: usize, y: usize },
    #[error("ANC needs one-to-one neurons: {x} vs {y} columns")]
    ColumnMismatch { x: usize, y: usize },
    #[error("input {0} has zero variance after centering")]
    ZeroVariance(&'static str),
    #[error("every neuron has zero variance on at least one side")]
    AllColumnsSkipped,
    #[error("variance_retained must lie in (0, 1], got {0}")]
    BadVarianceRetained(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Cka,
    Svcca,
    Anc,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Cka => "cka",
            BaselineMethod::Svcca => "svcca",
            BaselineMethod::Anc => "anc",
        }
    }
}

impl FromStr for BaselineMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cka" => Ok(BaselineMethod::Cka),
            "svcca" => Ok(BaselineMethod::Svcca),
            "anc" => Ok(BaselineMethod::Anc),
            other => Err(format!("unknown baseline {other:?} (cka, svcca, anc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub method: BaselineMethod,
    pub value: f64,
    /// SVCCA only: retained rank of each side.
    pub retained_rank: Option<[usize; 2]>,
    /// ANC only: neurons skipped for zero variance.
    pub skipped_neurons: Option<usize>,
}

fn check_samples(x: &Matrix, y: &Matrix) -> Result<(), BaselineError> {
    if x.rows() != y.rows() {
        return Err(BaselineError::SampleMismatch {
            x: x.rows(),
            y: y.rows(),
        });
    }
    if x.rows() < 2 {
        return Err(BaselineError::TooFewSamples(x.rows()));
    }
    Ok(())
}

fn centered(m: &Matrix) -> DMatrix<f64> {
    let mut d = m.to_dmatrix();
    for mut col in d.column_iter_mut() {
        let mu = col.mean();
        col.add_scalar_mut(-mu);
    }
    d
}

/// Linear CKA, `||Xc^T Yc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)` on
/// column-centred inputs.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<BaselineScore, BaselineError> {
    check_samples(x, y)?;
    let xc = centered(x);
    let yc = centered(y);
    let n = x.rows();
    // evaluate in whichever space is smaller; both forms are the same trace identities
    let (cross, self_x, self_y) = if n <= x.cols().max(y.cols()) {
        let k = &xc * xc.transpose();
        let l = &yc * yc.transpose();
        (k.dot(&l), k.norm(), l.norm())
    } else {
        let cross = (xc.transpose() * &yc).norm_squared();
        (
            cross,
            (xc.transpose() * &xc).norm(),
            (yc.transpose() * &yc).norm(),
        )
    };
    if self_x == 0.0 {
        return Err(BaselineError::ZeroVariance("x"));
    }
    if self_y == 0.0 {
        return Err(BaselineError::ZeroVariance("y"));
    }
    Ok(BaselineScore {
        method: BaselineMethod::Cka,
        value: (cross / (self_x * self_y)).clamp(0.0, 1.0),
        retained_rank: None,
        skipped_neurons: None,
    })
}

/// Orthonormal basis of the top singular directions of a centred matrix,
/// truncated to the smallest rank holding `variance_retained` of the squared
/// singular-value mass.
fn truncated_basis(
    centered: DMatrix<f64>,
    variance_retained: f64,
    side: &'static str,
) -> Result<DMatrix<f64>, BaselineError> {
    let svd = centered.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s_max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    if s_max <= 0.0 {
        return Err(BaselineError::ZeroVariance(side));
    }
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| svd.singular_values[i] > RANK_TOLERANCE * s_max)
        .collect();
    let total: f64 = kept.iter().map(|&i| svd.singular_values[i].powi(2)).sum();
    let target = variance_retained * total * (1.0 - 1e-12);
    let mut cumulative = 0.0;
    let mut rank = kept.len();
    for (r, &i) in kept.iter().enumerate() {
        cumulative += svd.singular_values[i].powi(2);
        if cumulative >= target {
            rank = r + 1;
            break;
        }
    }
    let cols: Vec<_> = kept[..rank]
        .iter()
        .map(|&i| u.column(i).into_owned())
        .collect();
    Ok(DMatrix::from_columns(&cols))
}

/// SVCCA: SVD-truncate each centred input, then average the canonical
/// correlations between the two retained subspaces.
///
/// Canonical correlations are the singular values of `Ux^T Uy`, where `Ux` and
/// `Uy` are orthonormal bases of the truncated subspaces (SVD whitening, no
/// covariance inversion).
pub fn svcca(
    x: &Matrix,
    y: &Matrix,
    variance_retained: f64,
) -> Result<BaselineScore, BaselineError> {
    if !(variance_retained > 0.0 && variance_retained <= 1.0) {
        return Err(BaselineError::BadVarianceRetained(variance_retained));
    }
    check_samples(x, y)?;
    let ux = truncated_basis(centered(x), variance_retained, "x")?;
    let uy = truncated_basis(centered(y), variance_retained, "y")?;
    let corr = (ux.transpose() * &uy).singular_values();
    let k = ux.ncols().min(uy.ncols());
    let mut rhos: Vec<f64> = corr.iter().map(|&c| c.min(1.0)).collect();
    rhos.sort_by(|a, b| b.total_cmp(a));
    let value = rhos.iter().take(k).sum::<f64>() / k as f64;
    Ok(BaselineScore {
        method: BaselineMethod::Svcca,
        value: value.clamp(0.0, 1.0),
        retained_rank: Some([ux.ncols(), uy.ncols()]),
        skipped_neurons: None,
    })
}

fn is_constant(values: &[f64]) -> bool {
    values.iter().all(|&v| v == values[0])
}

fn column_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Averaged neuron-wise correlation: mean Pearson correlation of matching
/// columns. Columns constant on either side are skipped and counted.
pub fn anc(x: &Matrix, y: &Matrix) -> Result<BaselineScore, BaselineError> {
    if x.cols() != y.cols() {
        return Err(BaselineError::ColumnMismatch {
            x: x.cols(),
            y: y.cols(),
        });
    }
    check_samples(x, y)?;
    let (xt, yt) = (x.transpose(), y.transpose());
    let per_column: Vec<Option<f64>> = (0..x.cols())
        .into_par_iter()
        .map(|j| {
            let (a, b) = (xt.row(j), yt.row(j));
            if is_constant(a) || is_constant(b) {
                None
            } else {
                Some(column_pearson(a, b))
            }
        })
        .collect();
    let used: Vec<f64> = per_column.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(BaselineError::AllColumnsSkipped);
    }
    Ok(BaselineScore {
        method: BaselineMethod::Anc,
        value: mean(&used).clamp(-1.0, 1.0),
        retained_rank: None,
        skipped_neurons: Some(per_column.len() - used.len()),
    })
}

pub fn score(
    method: BaselineMethod,
    x: &Matrix,
    y: &Matrix,
    variance_retained: f64,
) -> Result<BaselineScore, BaselineError> {
    match method {
        BaselineMethod::Cka => linear_cka(x, y),
        BaselineMethod::Svcca => svcca(x, y, variance_retained),
        BaselineMethod::Anc => anc(x, y),
    }
}

/// Per-layer baseline scores between two dumps, aggregated by mean.
pub fn baseline_scores(
    src: &ActivationDump,
    tgt: &ActivationDump,
    kind: ReprKind,
    strategy: PoolingStrategy,
    selection: &LayerSelection,
    method: BaselineMethod,
    variance_retained: f64,
) -> Result<AlignmentReport> {
    let (layers, ma, mb) = paired_matrices(src, tgt, kind, strategy, selection)?;
    let scores = ma
        .par_iter()
        .zip(mb.par_iter())
        .map(|(a, b)| score(method, &a.data, &b.data, variance_retained))
        .collect::<Result<Vec<_>, _>>()?;
    let per_layer_scores: Vec<f64> = scores.iter().map(|s| s.value).collect();
    let details = BaselineDetails {
        variance_retained: (method == BaselineMethod::Svcca).then_some(variance_retained),
        retained_ranks: (method == BaselineMethod::Svcca)
            .then(|| scores.iter().filter_map(|s| s.retained_rank).collect()),
        skipped_neurons: (method == BaselineMethod::Anc)
            .then(|| scores.iter().filter_map(|s| s.skipped_neurons).collect()),
    };
    Ok(AlignmentReport {
        method: MethodDescriptor {
            name: method.name().to_string(),
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
        zero_vector_count: 0,
        baseline: Some(details),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Matrix {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    #[test]
    fn cka_of_orthogonal_centred_columns_is_zero() {
        let x = col(&[1.0, -1.0, 0.0]);
        let y = col(&[1.0, 1.0, -2.0]);
        assert!(linear_cka(&x, &y).unwrap().value.abs() < 1e-15);
    }

    fn pseudo(rows: usize, cols: usize, salt: u64) -> Matrix {
        let data = (0..rows * cols)
            .map(|i| (((i as u64 + 1) * 2654435761 + salt) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn feature_form(x: &Matrix, y: &Matrix) -> f64 {
        let (xc, yc) = (centered(x), centered(y));
        (xc.transpose() * &yc).norm_squared()
            / ((xc.transpose() * &xc).norm() * (yc.transpose() * &yc).norm())
    }

    fn gram_form(x: &Matrix, y: &Matrix) -> f64 {
        let (xc, yc) = (centered(x), centered(y));
        let (k, l) = (&xc * xc.transpose(), &yc * yc.transpose());
        k.dot(&l) / (k.norm() * l.norm())
    }

    #[test]
    fn cka_gram_and_feature_forms_agree() {
        // wide inputs take the Gram path, tall ones the feature path
        let (x, y) = (pseudo(4, 6, 1), pseudo(4, 3, 2));
        assert!((linear_cka(&x, &y).unwrap().value - feature_form(&x, &y)).abs() < 1e-12);
        let (x, y) = (pseudo(9, 2, 3), pseudo(9, 3, 4));
        assert!((linear_cka(&x, &y).unwrap().value - gram_form(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn cka_zero_variance_errors() {
        let x = col(&[2.0, 2.0, 2.0]);
        let y = col(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            linear_cka(&x, &y),
            Err(BaselineError::ZeroVariance("x"))
        ));
        assert!(matches!(
            linear_cka(&col(&[1.0]), &col(&[1.0])),
            Err(BaselineError::TooFewSamples(1))
        ));
    }

    #[test]
    fn anc_opposite_columns_cancel() {
        let x = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![2.0, 3.0], vec![4.0, 2.0], vec![6.0, 1.0]]).unwrap();
        let s = anc(&x, &y).unwrap();
        assert!(s.value.abs() < 1e-15);
        assert_eq!(s.skipped_neurons, Some(0));
    }

    #[test]
    fn anc_skips_constant_columns() {
        let x = Matrix::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![4.0, 5.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![2.0, 1.0], vec![4.0, 0.0], vec![8.0, 3.0]]).unwrap();
        let s = anc(&x, &y).unwrap();
        assert_eq!(s.skipped_neurons, Some(1));
        assert!((s.value - 1.0).abs() < 1e-12);
        let c = Matrix::from_rows(&[vec![5.0], vec![5.0], vec![5.0]]).unwrap();
        assert!(matches!(anc(&c, &c), Err(BaselineError::AllColumnsSkipped)));
        assert!(matches!(
            anc(&x, &c),
            Err(BaselineError::ColumnMismatch { .. })
        ));
    }

    #[test]
    fn svcca_truncation_keeps_dominant_direction() {
        // second column carries 1e-4 of the variance
        let x = Matrix::from_rows(&[
            vec![1.0, 0.01],
            vec![-1.0, 0.01],
            vec![2.0, -0.01],
            vec![-2.0, -0.01],
        ])
        .unwrap();
        let s = svcca(&x, &x, 0.99).unwrap();
        assert_eq!(s.retained_rank, Some([1, 1]));
        assert!((s.value - 1.0).abs() < 1e-12);
        let full = svcca(&x, &x, 1.0).unwrap();
        assert_eq!(full.retained_rank, Some([2, 2]));
        assert!(matches!(
            svcca(&x, &x, 0.0),
            Err(BaselineError::BadVarianceRetained(_))
        ));
    }

    #[test]
    fn svcca_zero_variance_errors() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![0.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            svcca(&x, &y, 0.99),
            Err(BaselineError::ZeroVariance("x"))
        ));
    }
}
