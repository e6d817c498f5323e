//! Cross-lingual alignment scoring over transformer activation dumps.
//!
//! The pipeline reads per-language activation dumps (the `NXAD` container in
//! [`dump`]), turns token activations into sentence representations
//! ([`repr`]), and scores a language pair by how often a parallel sentence is
//! its partner's strict nearest neighbour in cosine space ([`align`]).
//! Neuron activation states give NASCA, absolute activation values give
//! NAVCA, and hidden-state embeddings give the MEXA-style score.
//!
//! Around that core sit parallel-sentence retrieval ([`retrieval`]), the
//! classical similarity baselines linear CKA, SVCCA and ANC ([`baseline`]),
//! correlation and chance-level statistics ([`stats`]), and a synthetic
//! dump generator for model-free validation ([`synth`]).

pub mod align;
pub mod baseline;
pub mod dump;
pub mod error;
pub mod matrix;
pub mod repr;
pub mod retrieval;
pub mod stats;
pub mod synth;

pub use align::{
    cosine_matrix, layer_scores, weak_alignment_score, AlignmentReport, LayerSelection,
    SimilarityMatrix,
};
pub use baseline::{anc, linear_cka, svcca, BaselineMethod, BaselineScore};
pub use dump::{read_dump, validate_manifest, write_dump, ActivationDump, DumpManifest};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use repr::{
    build_sentence_matrices, detect_states, pool_sentence, PoolingStrategy, ReprKind,
    SentenceMatrix,
};
pub use retrieval::{
    bidirectional_accuracy, directional_accuracy, layer_max_similarity, Direction,
    LayerAggregation, RetrievalReport,
};
pub use stats::{correlate_tables, pearson, robustness_pvalue, CorrelationReport, ScoreTable};
pub use synth::{generate_pair, SynthSpec};
