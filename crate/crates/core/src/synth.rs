//! Synthetic parallel dumps with a tunable alignment strength.
//!
//! For every sentence and layer a shared latent `z` and two independent noise
//! vectors are drawn from a unit Gaussian. The two sides are
//! `rho * z + sqrt(1 - rho^2) * e + anisotropy * mu`, where `mu` is one unit
//! direction drawn from the seed and shared by both sides. Output is
//! pooled-level (one "token" per sentence).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dump::{
    ActivationDump, Dtype, DumpError, DumpKind, DumpManifest, Level, Pooling, StateTransform,
    FORMAT_VERSION,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{field} must be positive")]
    ZeroSize { field: &'static str },
    #[error("rho must lie in [0, 1], got {0}")]
    BadRho(f64),
    #[error("anisotropy must be finite and non-negative, got {0}")]
    BadAnisotropy(f64),
    #[error(transparent)]
    Dump(#[from] DumpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_sentences: usize,
    pub n_units: usize,
    pub n_layers: usize,
    /// Weight of the shared latent.
    pub rho: f64,
    /// Length of the common offset added to every vector.
    pub anisotropy: f64,
    pub seed: u64,
    pub kind: DumpKind,
    pub src_language: String,
    pub tgt_language: String,
}

impl SynthSpec {
    pub fn new(n_sentences: usize, n_units: usize, n_layers: usize, rho: f64, seed: u64) -> Self {
        Self {
            n_sentences,
            n_units,
            n_layers,
            rho,
            anisotropy: 0.0,
            seed,
            kind: DumpKind::FfnActivation,
            src_language: "src".into(),
            tgt_language: "tgt".into(),
        }
    }

    pub fn with_anisotropy(mut self, anisotropy: f64) -> Self {
        self.anisotropy = anisotropy;
        self
    }

    pub fn with_kind(mut self, kind: DumpKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_languages(mut self, src: impl Into<String>, tgt: impl Into<String>) -> Self {
        self.src_language = src.into();
        self.tgt_language = tgt.into();
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for (field, v) in [
            ("n_sentences", self.n_sentences),
            ("n_units", self.n_units),
            ("n_layers", self.n_layers),
        ] {
            if v == 0 {
                return Err(SynthError::ZeroSize { field });
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(SynthError::BadRho(self.rho));
        }
        if !(self.anisotropy.is_finite() && self.anisotropy >= 0.0) {
            return Err(SynthError::BadAnisotropy(self.anisotropy));
        }
        Ok(())
    }

    fn manifest(&self, language: &str) -> DumpManifest {
        DumpManifest {
            format_version: FORMAT_VERSION,
            model_id: "synthetic".into(),
            language: language.to_string(),
            kind: self.kind,
            level: Level::Pooled,
            pooling: Pooling::Weighted,
            n_layers: self.n_layers,
            n_units: self.n_units,
            n_sentences: self.n_sentences,
            token_counts: vec![1; self.n_sentences],
            dtype: Dtype::F32,
            state: StateTransform::Raw,
            state_source: None,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Deterministic in `spec`; `rho = 1` with zero anisotropy yields identical payloads.
pub fn generate_pair(spec: &SynthSpec) -> Result<(ActivationDump, ActivationDump), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.n_units;
    let mut mu = gaussian(&mut rng, d);
    let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    mu.iter_mut().for_each(|v| *v /= norm);
    let offset: Vec<f64> = mu.iter().map(|v| spec.anisotropy * v).collect();
    let noise_weight = (1.0 - spec.rho * spec.rho).max(0.0).sqrt();

    let total = spec.n_sentences * spec.n_layers;
    let mut side_a = Vec::with_capacity(total);
    let mut side_b = Vec::with_capacity(total);
    for _ in 0..total {
        // always draw all three so every rho shares the same random stream
        let z = gaussian(&mut rng, d);
        let e1 = gaussian(&mut rng, d);
        let e2 = gaussian(&mut rng, d);
        let side = |e: &[f64]| -> Vec<f32> {
            (0..d)
                .map(|u| {
                    let mut v = spec.rho * z[u];
                    if noise_weight > 0.0 {
                        v += noise_weight * e[u];
                    }
                    (v + offset[u]) as f32
                })
                .collect()
        };
        side_a.push(side(&e1));
        side_b.push(side(&e2));
    }
    Ok((
        ActivationDump::new(spec.manifest(&spec.src_language), side_a)?,
        ActivationDump::new(spec.manifest(&spec.tgt_language), side_b)?,
    ))
}
