use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use xalign::align::{layer_scores, LayerSelection};
use xalign::baseline::{baseline_scores, svcca, BaselineMethod};
use xalign::dump::{
    decode_dump, write_dump, ActivationDump, Dtype, DumpKind, DumpManifest, Level, Pooling,
    StateSource, StateTransform, FORMAT_VERSION,
};
use xalign::matrix::Matrix;
use xalign::repr::{build_sentence_matrices, pool_dump, PoolingStrategy, ReprKind};
use xalign::retrieval::{retrieve, LayerAggregation};
use xalign::synth::{generate_pair, SynthSpec};
use xalign::Error;

fn through_bytes(dump: &ActivationDump) -> ActivationDump {
    let mut bytes = Vec::new();
    write_dump(dump, &mut bytes).unwrap();
    decode_dump(&bytes).unwrap()
}

#[test]
fn synthetic_pair_survives_serialization() {
    let spec = SynthSpec::new(60, 64, 3, 0.7, 21);
    let (a, b) = generate_pair(&spec).unwrap();
    let direct = layer_scores(
        &a,
        &b,
        ReprKind::Nav,
        PoolingStrategy::Weighted,
        &LayerSelection::All,
    )
    .unwrap();
    let (a2, b2) = (through_bytes(&a), through_bytes(&b));
    let read = layer_scores(
        &a2,
        &b2,
        ReprKind::Nav,
        PoolingStrategy::Weighted,
        &LayerSelection::All,
    )
    .unwrap();
    assert_eq!(direct, read);
    assert_eq!(read.language_pair, ("src".to_string(), "tgt".to_string()));
    assert_eq!(read.method.name, "navca");
    assert_eq!(read.layers, vec![0, 1, 2]);
}

#[test]
fn score_grows_with_rho() {
    let score = |rho| {
        let (a, b) = generate_pair(&SynthSpec::new(80, 128, 2, rho, 3)).unwrap();
        layer_scores(
            &a,
            &b,
            ReprKind::Nas,
            PoolingStrategy::Weighted,
            &LayerSelection::All,
        )
        .unwrap()
        .aggregated_score
    };
    let (low, mid, high) = (score(0.0), score(0.5), score(1.0));
    assert!(low < mid && mid < high, "{low} {mid} {high}");
    assert_eq!(high, 1.0);
}

#[test]
fn explicit_layer_selection() {
    let (a, b) = generate_pair(&SynthSpec::new(20, 16, 4, 0.8, 1)).unwrap();
    let all = layer_scores(
        &a,
        &b,
        ReprKind::Nas,
        PoolingStrategy::Weighted,
        &LayerSelection::All,
    )
    .unwrap();
    let sel: LayerSelection = "3,1".parse().unwrap();
    let some = layer_scores(&a, &b, ReprKind::Nas, PoolingStrategy::Weighted, &sel).unwrap();
    assert_eq!(some.layers, vec![3, 1]);
    assert_eq!(
        some.per_layer_scores,
        vec![all.per_layer_scores[3], all.per_layer_scores[1]]
    );
    let bad: LayerSelection = "4".parse().unwrap();
    assert!(matches!(
        layer_scores(&a, &b, ReprKind::Nas, PoolingStrategy::Weighted, &bad),
        Err(Error::Align(_))
    ));
}

#[test]
fn mismatched_sentence_counts_are_reported() {
    let (a, _) = generate_pair(&SynthSpec::new(10, 8, 1, 0.5, 1)).unwrap();
    let (b, _) = generate_pair(&SynthSpec::new(12, 8, 1, 0.5, 1)).unwrap();
    let err = layer_scores(
        &a,
        &b,
        ReprKind::Nas,
        PoolingStrategy::Weighted,
        &LayerSelection::All,
    )
    .unwrap_err();
    let text = err.to_string();
    assert!(text.contains("10") && text.contains("12"), "{text}");
}

#[test]
fn wrong_kind_for_repr_is_rejected() {
    let (h, _) =
        generate_pair(&SynthSpec::new(10, 8, 1, 0.5, 1).with_kind(DumpKind::HiddenState)).unwrap();
    let (f, _) = generate_pair(&SynthSpec::new(10, 8, 1, 0.5, 1)).unwrap();
    assert!(matches!(
        layer_scores(
            &h,
            &h,
            ReprKind::Nas,
            PoolingStrategy::Weighted,
            &LayerSelection::All
        ),
        Err(Error::Repr(_))
    ));
    assert!(matches!(
        layer_scores(
            &f,
            &f,
            ReprKind::Emb,
            PoolingStrategy::Weighted,
            &LayerSelection::All
        ),
        Err(Error::Repr(_))
    ));
    assert!(matches!(
        layer_scores(
            &h,
            &f,
            ReprKind::Nas,
            PoolingStrategy::Weighted,
            &LayerSelection::All
        ),
        Err(Error::Align(_))
    ));
}

fn token_level(seed: u64) -> ActivationDump {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_layers, n_units) = (2, 24);
    let token_counts: Vec<usize> = (0..30).map(|_| rng.random_range(1..9)).collect();
    let manifest = DumpManifest {
        format_version: FORMAT_VERSION,
        model_id: "tiny".into(),
        language: format!("l{seed}"),
        kind: DumpKind::FfnActivation,
        level: Level::Token,
        pooling: Pooling::None,
        n_layers,
        n_units,
        n_sentences: token_counts.len(),
        token_counts: token_counts.clone(),
        dtype: Dtype::F32,
        state: StateTransform::Raw,
        state_source: Some(StateSource::Gated),
    };
    let tensors = token_counts
        .iter()
        .flat_map(|&t| std::iter::repeat_n(t, n_layers))
        .map(|t| {
            (0..t * n_units)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect()
        })
        .collect();
    ActivationDump::new(manifest, tensors).unwrap()
}

#[test]
fn pooled_dump_scores_like_its_source() {
    let (a, b) = (token_level(1), token_level(2));
    for kind in [ReprKind::Nas, ReprKind::Nav] {
        for strategy in [
            PoolingStrategy::Weighted,
            PoolingStrategy::Average,
            PoolingStrategy::Last,
        ] {
            let pa = through_bytes(&pool_dump(&a, kind, strategy).unwrap());
            let pb = through_bytes(&pool_dump(&b, kind, strategy).unwrap());
            let direct = layer_scores(&a, &b, kind, strategy, &LayerSelection::All).unwrap();
            let pooled = layer_scores(&pa, &pb, kind, strategy, &LayerSelection::All).unwrap();
            assert_eq!(
                direct.per_layer_scores, pooled.per_layer_scores,
                "{kind} {strategy}"
            );
        }
    }
    let (synthetic, _) = generate_pair(&SynthSpec::new(4, 4, 1, 0.5, 1)).unwrap();
    assert!(pool_dump(&synthetic, ReprKind::Nas, PoolingStrategy::Weighted).is_err());
}

#[test]
fn retrieval_single_layer_and_max() {
    let (a, b) = generate_pair(&SynthSpec::new(40, 64, 3, 0.9, 5)).unwrap();
    let sel = LayerSelection::All;
    let max = retrieve(
        &a,
        &b,
        ReprKind::Nav,
        PoolingStrategy::Weighted,
        &sel,
        LayerAggregation::MaxOverLayers,
    )
    .unwrap();
    let one = retrieve(
        &a,
        &b,
        ReprKind::Nav,
        PoolingStrategy::Weighted,
        &sel,
        LayerAggregation::SingleLayer(2),
    )
    .unwrap();
    assert_eq!(max.layers, vec![0, 1, 2]);
    assert_eq!(one.layers, vec![2]);
    for s in [&max, &one] {
        assert!(s.bidirectional.accuracy <= s.src_to_tgt.accuracy.min(s.tgt_to_src.accuracy));
    }
    let mut csv = Vec::new();
    max.write_hits_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert_eq!(
        text.lines().next().unwrap(),
        "sentence,src_to_tgt,tgt_to_src,bidirectional"
    );
}

#[test]
fn baseline_report_carries_details() {
    let (a, b) = generate_pair(&SynthSpec::new(50, 20, 2, 0.8, 4)).unwrap();
    let sel = LayerSelection::All;
    let report = baseline_scores(
        &a,
        &b,
        ReprKind::Nav,
        PoolingStrategy::Weighted,
        &sel,
        BaselineMethod::Svcca,
        0.99,
    )
    .unwrap();
    assert_eq!(report.method.name, "svcca");
    let details = report.baseline.unwrap();
    assert_eq!(details.variance_retained, Some(0.99));
    assert_eq!(details.retained_ranks.unwrap().len(), 2);
    let anc = baseline_scores(
        &a,
        &b,
        ReprKind::Nav,
        PoolingStrategy::Weighted,
        &sel,
        BaselineMethod::Anc,
        0.99,
    )
    .unwrap();
    assert!(anc.baseline.unwrap().skipped_neurons.is_some());
    let self_cka = baseline_scores(
        &a,
        &a,
        ReprKind::Emb,
        PoolingStrategy::Weighted,
        &sel,
        BaselineMethod::Cka,
        0.99,
    );
    // ffn dumps cannot feed emb
    assert!(self_cka.is_err());
}

/// Two planted directions at angle `theta` inside otherwise independent noise.
#[test]
fn svcca_recovers_planted_angle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 400;
    let theta: f64 = 0.6;
    let (c, s) = (theta.cos(), theta.sin());
    let mut x = Matrix::zeros(n, 2);
    let mut y = Matrix::zeros(n, 2);
    for i in 0..n {
        let shared: f64 = rng.sample(StandardNormal);
        let own: f64 = rng.sample(StandardNormal);
        let other_x: f64 = rng.sample(StandardNormal);
        let other_y: f64 = rng.sample(StandardNormal);
        x.set(i, 0, shared);
        x.set(i, 1, other_x);
        y.set(i, 0, c * shared + s * own);
        y.set(i, 1, other_y);
    }
    let value = svcca(&x, &y, 1.0).unwrap().value;
    // exact oracle: canonical correlations of the sample, via the 2x2 problem
    let oracle = two_dim_cca_mean(&x, &y);
    assert!((value - oracle).abs() < 1e-9, "{value} vs {oracle}");
    assert!((value - c / 2.0).abs() < 0.08, "{value}");
    let swapped = svcca(&y, &x, 1.0).unwrap().value;
    assert!((value - swapped).abs() < 1e-12);
}

/// Mean canonical correlation of two n x 2 matrices from the eigenvalues of
/// `Sxx^-1 Sxy Syy^-1 Syx`.
fn two_dim_cca_mean(x: &Matrix, y: &Matrix) -> f64 {
    let n = x.rows() as f64;
    let centre = |m: &Matrix| -> Vec<[f64; 2]> {
        let mu = [
            m.column(0).iter().sum::<f64>() / n,
            m.column(1).iter().sum::<f64>() / n,
        ];
        m.iter_rows()
            .map(|r| [r[0] - mu[0], r[1] - mu[1]])
            .collect()
    };
    let (xc, yc) = (centre(x), centre(y));
    let cov = |a: &[[f64; 2]], b: &[[f64; 2]]| -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for (ra, rb) in a.iter().zip(b) {
            for i in 0..2 {
                for j in 0..2 {
                    out[i][j] += ra[i] * rb[j];
                }
            }
        }
        out
    };
    let inv = |m: [[f64; 2]; 2]| {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ]
    };
    let mul = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        out
    };
    let sxy = cov(&xc, &yc);
    let syx = cov(&yc, &xc);
    let m = mul(mul(inv(cov(&xc, &xc)), sxy), mul(inv(cov(&yc, &yc)), syx));
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
    (l1.max(0.0).sqrt() + l2.max(0.0).sqrt()) / 2.0
}

#[test]
fn sentence_matrices_cover_every_layer() {
    let (a, _) =
        generate_pair(&SynthSpec::new(7, 5, 3, 0.5, 2).with_languages("deu_Latn", "eng_Latn"))
            .unwrap();
    let ms = build_sentence_matrices(&a, ReprKind::Nas, PoolingStrategy::Last).unwrap();
    assert_eq!(ms.len(), 3);
    for (l, m) in ms.iter().enumerate() {
        assert_eq!(m.layer, l);
        assert_eq!(m.language, "deu_Latn");
        assert_eq!((m.data.rows(), m.data.cols()), (7, 5));
        assert!(m.data.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
