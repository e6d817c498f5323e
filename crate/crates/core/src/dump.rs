//! The `NXAD` activation-dump container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NXAD" | format_version: u32 | header_length: u64 | JSON manifest | payload
//! ```
//!
//! The payload holds one tensor per (sentence, layer), sentence-major and
//! layer-minor. Token-level tensors are row-major `token_counts[s] x n_units`
//! (rows are tokens); pooled tensors are a single `n_units` vector. `f32`
//! values are stored as IEEE-754 little-endian words. `u1` rows are bitpacked:
//! unit `j` is bit `j % 8` of byte `j / 8`, LSB first, pad bits zero.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repr::PoolingStrategy;

pub const MAGIC: [u8; 4] = *b"NXAD";
pub const FORMAT_VERSION: u32 = 1;
/// Magic, version and header length.
pub const PREAMBLE_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpKind {
    FfnActivation,
    HiddenState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Token,
    Pooled,
}

/// Pooling recorded in a manifest; `None` for token-level dumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Weighted,
    Average,
    Last,
    None,
}

impl From<PoolingStrategy> for Pooling {
    fn from(strategy: PoolingStrategy) -> Self {
        match strategy {
            PoolingStrategy::Weighted => Pooling::Weighted,
            PoolingStrategy::Average => Pooling::Average,
            PoolingStrategy::Last => Pooling::Last,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    U1,
}

/// Transform applied to activations before they were stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateTransform {
    #[default]
    Raw,
    Nas,
    Nav,
}

/// Which FFN quantity the extractor thresholded or recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSource {
    /// Gated product of the activated gate and the up projection.
    Gated,
    /// Activated gate projection only.
    GateOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format_version: u32,
    pub model_id: String,
    pub language: String,
    pub kind: DumpKind,
    pub level: Level,
    pub pooling: Pooling,
    pub n_layers: usize,
    pub n_units: usize,
    pub n_sentences: usize,
    pub token_counts: Vec<usize>,
    pub dtype: Dtype,
    #[serde(default)]
    pub state: StateTransform,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_source: Option<StateSource>,
}

impl DumpManifest {
    /// Rows stored for sentence `s` at each layer.
    pub fn rows_for(&self, sentence: usize) -> usize {
        match self.level {
            Level::Token => self.token_counts[sentence],
            Level::Pooled => 1,
        }
    }

    /// Bytes used by one stored row of `n_units` values.
    pub fn row_bytes(&self) -> usize {
        match self.dtype {
            Dtype::F32 => self.n_units * 4,
            Dtype::U1 => self.n_units.div_ceil(8),
        }
    }

    /// Payload length implied by the manifest, `None` on arithmetic overflow.
    pub fn payload_len(&self) -> Option<u64> {
        let row_bytes = match self.dtype {
            Dtype::F32 => (self.n_units as u64).checked_mul(4)?,
            Dtype::U1 => (self.n_units as u64).div_ceil(8),
        };
        let rows_per_layer: u64 = match self.level {
            Level::Token => self
                .token_counts
                .iter()
                .try_fold(0u64, |acc, &t| acc.checked_add(t as u64))?,
            Level::Pooled => self.n_sentences as u64,
        };
        rows_per_layer
            .checked_mul(self.n_layers as u64)?
            .checked_mul(row_bytes)
    }
}

/// One failed manifest invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl Violation {
    fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            field,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("bad magic: expected \"NXAD\", found {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated {section}: expected {expected} bytes, got {actual}")]
    Truncated {
        section: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("payload size disagrees with manifest: expected {expected} bytes, got {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("malformed JSON header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("invalid manifest: {}", join_violations(.0))]
    InvalidManifest(Vec<Violation>),
    #[error("expected {expected} tensors (n_sentences x n_layers), got {actual}")]
    TensorCount { expected: usize, actual: usize },
    #[error(
        "tensor (sentence {sentence}, layer {layer}) has {actual} values, expected {expected}"
    )]
    TensorShape {
        sentence: usize,
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("u1 tensor (sentence {sentence}, layer {layer}) holds a value other than 0 or 1")]
    NonBinary { sentence: usize, layer: usize },
    #[error("u1 tensor (sentence {sentence}, layer {layer}) has nonzero pad bits")]
    NonzeroPadding { sentence: usize, layer: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn join_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Checks every manifest invariant. An empty list means the manifest is valid.
pub fn validate_manifest(manifest: &DumpManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    if manifest.format_version != FORMAT_VERSION {
        out.push(Violation::new(
            "format_version",
            format!(
                "{} is not the supported version {FORMAT_VERSION}",
                manifest.format_version
            ),
        ));
    }
    if manifest.language.is_empty() {
        out.push(Violation::new("language", "must not be empty"));
    }
    for (field, value) in [
        ("n_layers", manifest.n_layers),
        ("n_units", manifest.n_units),
        ("n_sentences", manifest.n_sentences),
    ] {
        if value == 0 {
            out.push(Violation::new(field, "must be positive"));
        }
    }
    if manifest.token_counts.len() != manifest.n_sentences {
        out.push(Violation::new(
            "token_counts",
            format!(
                "has {} entries but n_sentences is {}",
                manifest.token_counts.len(),
                manifest.n_sentences
            ),
        ));
    }
    if let Some(s) = manifest.token_counts.iter().position(|&t| t == 0) {
        out.push(Violation::new(
            "token_counts",
            format!("sentence {s} has zero tokens"),
        ));
    }
    match (manifest.level, manifest.pooling) {
        (Level::Pooled, Pooling::None) => out.push(Violation::new(
            "pooling",
            "pooled level requires a pooling strategy",
        )),
        (Level::Token, p) if p != Pooling::None => out.push(Violation::new(
            "pooling",
            "token level must record pooling = none",
        )),
        _ => {}
    }
    if manifest.dtype == Dtype::U1 {
        if manifest.kind != DumpKind::FfnActivation {
            out.push(Violation::new(
                "dtype",
                "u1 is only valid for ffn_activation dumps",
            ));
        }
        if manifest.level != Level::Token {
            out.push(Violation::new("dtype", "u1 is only valid at token level"));
        }
        if manifest.state != StateTransform::Nas {
            out.push(Violation::new("state", "u1 dumps must record state = nas"));
        }
    }
    if manifest.kind == DumpKind::HiddenState && manifest.state != StateTransform::Raw {
        out.push(Violation::new(
            "state",
            "hidden_state dumps must record state = raw",
        ));
    }
    if manifest.payload_len().is_none() {
        out.push(Violation::new("n_units", "payload size overflows u64"));
    }
    out
}

/// Immutable, validated activation dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    manifest: DumpManifest,
    /// Flattened per (sentence, layer), sentence-major.
    tensors: Vec<Vec<f32>>,
}

impl ActivationDump {
    /// Validates the manifest and every tensor shape before accepting the data.
    pub fn new(manifest: DumpManifest, tensors: Vec<Vec<f32>>) -> Result<Self, DumpError> {
        let violations = validate_manifest(&manifest);
        if !violations.is_empty() {
            return Err(DumpError::InvalidManifest(violations));
        }
        let expected = manifest.n_sentences * manifest.n_layers;
        if tensors.len() != expected {
            return Err(DumpError::TensorCount {
                expected,
                actual: tensors.len(),
            });
        }
        for (idx, tensor) in tensors.iter().enumerate() {
            let (sentence, layer) = (idx / manifest.n_layers, idx % manifest.n_layers);
            let want = manifest.rows_for(sentence) * manifest.n_units;
            if tensor.len() != want {
                return Err(DumpError::TensorShape {
                    sentence,
                    layer,
                    expected: want,
                    actual: tensor.len(),
                });
            }
            if manifest.dtype == Dtype::U1 && tensor.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(DumpError::NonBinary { sentence, layer });
            }
        }
        Ok(Self { manifest, tensors })
    }

    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    /// Row-major tensor for one sentence at one layer.
    pub fn tensor(&self, sentence: usize, layer: usize) -> &[f32] {
        &self.tensors[sentence * self.manifest.n_layers + layer]
    }

    pub fn tensors(&self) -> &[Vec<f32>] {
        &self.tensors
    }

    pub fn into_parts(self) -> (DumpManifest, Vec<Vec<f32>>) {
        (self.manifest, self.tensors)
    }

    /// Total container size in bytes.
    pub fn encoded_len(&self) -> u64 {
        let header = serde_json::to_vec(&self.manifest).map_or(0, |h| h.len());
        (PREAMBLE_LEN + header) as u64 + self.manifest.payload_len().unwrap_or(0)
    }
}

fn pack_bits(values: &[f32], out: &mut Vec<u8>) {
    for chunk in values.chunks(8) {
        let mut byte = 0u8;
        for (bit, &v) in chunk.iter().enumerate() {
            if v != 0.0 {
                byte |= 1 << bit;
            }
        }
        out.push(byte);
    }
}

/// Returns false when a pad bit beyond `n_units` is set.
fn unpack_bits(bytes: &[u8], n_units: usize, out: &mut Vec<f32>) -> bool {
    for j in 0..n_units {
        out.push(f32::from((bytes[j / 8] >> (j % 8)) & 1));
    }
    let used = n_units % 8;
    used == 0 || bytes[bytes.len() - 1] >> used == 0
}

/// Serializes the dump and returns the number of bytes written.
pub fn write_dump<W: Write>(dump: &ActivationDump, mut sink: W) -> Result<u64, DumpError> {
    let manifest = &dump.manifest;
    let header = serde_json::to_vec(manifest)?;
    sink.write_all(&MAGIC)?;
    sink.write_all(&FORMAT_VERSION.to_le_bytes())?;
    sink.write_all(&(header.len() as u64).to_le_bytes())?;
    sink.write_all(&header)?;
    let mut written = (PREAMBLE_LEN + header.len()) as u64;

    let mut buf = Vec::new();
    for (idx, tensor) in dump.tensors.iter().enumerate() {
        buf.clear();
        match manifest.dtype {
            Dtype::F32 => {
                buf.reserve(tensor.len() * 4);
                for v in tensor {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::U1 => {
                let rows = manifest.rows_for(idx / manifest.n_layers);
                for r in 0..rows {
                    let row = &tensor[r * manifest.n_units..(r + 1) * manifest.n_units];
                    pack_bits(row, &mut buf);
                }
            }
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

/// Reads a complete container and re-validates it.
pub fn read_dump<R: Read>(mut source: R) -> Result<ActivationDump, DumpError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_dump(&bytes)
}

/// Decodes a container held in memory.
pub fn decode_dump(bytes: &[u8]) -> Result<ActivationDump, DumpError> {
    if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
        return Err(DumpError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(DumpError::Truncated {
            section: "preamble",
            expected: PREAMBLE_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice"));
    if version != FORMAT_VERSION {
        return Err(DumpError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
    let available = (bytes.len() - PREAMBLE_LEN) as u64;
    if header_len > available {
        return Err(DumpError::Truncated {
            section: "header",
            expected: header_len,
            actual: available,
        });
    }
    let header_end = PREAMBLE_LEN + header_len as usize;
    let manifest: DumpManifest = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])?;

    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        return Err(DumpError::InvalidManifest(violations));
    }
    // validate_manifest guarantees this is computable
    let expected = manifest.payload_len().unwrap_or(u64::MAX);
    let payload = &bytes[header_end..];
    let actual = payload.len() as u64;
    if actual < expected {
        return Err(DumpError::Truncated {
            section: "payload",
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(DumpError::SizeMismatch { expected, actual });
    }

    let n_units = manifest.n_units;
    let row_bytes = manifest.row_bytes();
    let mut tensors = Vec::with_capacity(manifest.n_sentences * manifest.n_layers);
    let mut offset = 0usize;
    for sentence in 0..manifest.n_sentences {
        let rows = manifest.rows_for(sentence);
        for layer in 0..manifest.n_layers {
            let len = rows * row_bytes;
            let chunk = &payload[offset..offset + len];
            offset += len;
            let mut tensor = Vec::with_capacity(rows * n_units);
            match manifest.dtype {
                Dtype::F32 => tensor.extend(
                    chunk
                        .chunks_exact(4)
                        .map(|w| f32::from_le_bytes(w.try_into().expect("4-byte word"))),
                ),
                Dtype::U1 => {
                    for row in chunk.chunks_exact(row_bytes) {
                        if !unpack_bits(row, n_units, &mut tensor) {
                            return Err(DumpError::NonzeroPadding { sentence, layer });
                        }
                    }
                }
            }
            tensors.push(tensor);
        }
    }
    ActivationDump::new(manifest, tensors)
}

pub fn read_dump_file(path: impl AsRef<Path>) -> Result<ActivationDump, DumpError> {
    read_dump(BufReader::new(File::open(path)?))
}

pub fn write_dump_file(dump: &ActivationDump, path: impl AsRef<Path>) -> Result<u64, DumpError> {
    write_dump(dump, BufWriter::new(File::create(path)?))
}
