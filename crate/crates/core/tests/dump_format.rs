use proptest::prelude::*;

use xalign::dump::{
    decode_dump, read_dump, write_dump, ActivationDump, Dtype, DumpError, DumpKind, DumpManifest,
    Level, Pooling, StateSource, StateTransform, FORMAT_VERSION, PREAMBLE_LEN,
};

fn sample_dump() -> ActivationDump {
    let manifest = DumpManifest {
        format_version: FORMAT_VERSION,
        model_id: "tiny".into(),
        language: "isl_Latn".into(),
        kind: DumpKind::FfnActivation,
        level: Level::Token,
        pooling: Pooling::None,
        n_layers: 2,
        n_units: 3,
        n_sentences: 2,
        token_counts: vec![2, 1],
        dtype: Dtype::F32,
        state: StateTransform::Raw,
        state_source: Some(StateSource::Gated),
    };
    let tensors = vec![
        vec![0.5, -1.0, 2.0, 0.0, 3.25, -0.125],
        vec![1.0, 1.0, 1.0, -2.0, -2.0, -2.0],
        vec![7.0, 8.0, 9.0],
        vec![-7.0, -8.0, -9.0],
    ];
    ActivationDump::new(manifest, tensors).unwrap()
}

fn encode(dump: &ActivationDump) -> Vec<u8> {
    let mut out = Vec::new();
    write_dump(dump, &mut out).unwrap();
    out
}

#[test]
fn layout_matches_the_documented_container() {
    let dump = sample_dump();
    let bytes = encode(&dump);
    assert_eq!(&bytes[..4], b"NXAD");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value =
        serde_json::from_slice(&bytes[PREAMBLE_LEN..PREAMBLE_LEN + header_len]).unwrap();
    assert_eq!(header["kind"], "ffn_activation");
    assert_eq!(header["level"], "token");
    assert_eq!(header["pooling"], "none");
    assert_eq!(header["dtype"], "f32");
    assert_eq!(header["state_source"], "gated");
    let payload = &bytes[PREAMBLE_LEN + header_len..];
    // (2 + 1 tokens) x 2 layers x 3 units x 4 bytes
    assert_eq!(payload.len(), 72);
    // sentence 0, layer 0, token 0, unit 1 is -1.0
    assert_eq!(&payload[4..8], &(-1.0f32).to_le_bytes());
    // sentence-major: the third tensor is sentence 1, layer 0
    assert_eq!(&payload[48..52], &7.0f32.to_le_bytes());
    assert_eq!(dump.encoded_len() as usize, bytes.len());
}

#[test]
fn reads_headers_written_by_other_tools() {
    // key order and whitespace differ from what write_dump emits
    let header = br#"{ "dtype": "u1", "kind": "ffn_activation", "level": "token",
        "pooling": "none", "format_version": 1, "model_id": "gpt2", "language": "deu_Latn",
        "n_layers": 1, "n_units": 10, "n_sentences": 1, "token_counts": [2],
        "state": "nas", "state_source": "gate_only" }"#;
    let mut bytes = b"NXAD".to_vec();
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header);
    // two tokens, 2 bytes each: units 0 and 9 set, then unit 4
    bytes.extend_from_slice(&[0b0000_0001, 0b0000_0010, 0b0001_0000, 0]);
    let dump = decode_dump(&bytes).unwrap();
    let t = dump.tensor(0, 0);
    assert_eq!(t.len(), 20);
    assert_eq!(t[0], 1.0);
    assert_eq!(t[9], 1.0);
    assert_eq!(t[10 + 4], 1.0);
    assert_eq!(t.iter().sum::<f32>(), 3.0);
    assert_eq!(dump.manifest().state_source, Some(StateSource::GateOnly));
}

#[test]
fn bad_magic() {
    let mut bytes = encode(&sample_dump());
    bytes[0..4].copy_from_slice(b"NXAE");
    assert!(matches!(
        decode_dump(&bytes),
        Err(DumpError::BadMagic { .. })
    ));
    assert!(matches!(
        decode_dump(b"NX"),
        Err(DumpError::BadMagic { .. })
    ));
}

#[test]
fn unsupported_version() {
    let mut bytes = encode(&sample_dump());
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        decode_dump(&bytes),
        Err(DumpError::UnsupportedVersion {
            found: 2,
            supported: 1
        })
    ));
}

#[test]
fn truncated_payload_names_lengths() {
    let bytes = encode(&sample_dump());
    let err = decode_dump(&bytes[..bytes.len() - 1]).unwrap_err();
    match err {
        DumpError::Truncated {
            section: "payload",
            expected: 72,
            actual: 71,
        } => {}
        other => panic!("unexpected {other:?}"),
    }
    assert!(err_text(&bytes[..bytes.len() - 1]).contains("expected 72 bytes, got 71"));
}

fn err_text(bytes: &[u8]) -> String {
    decode_dump(bytes).unwrap_err().to_string()
}

#[test]
fn truncated_preamble_and_header() {
    let bytes = encode(&sample_dump());
    assert!(matches!(
        decode_dump(&bytes[..10]),
        Err(DumpError::Truncated {
            section: "preamble",
            ..
        })
    ));
    assert!(matches!(
        decode_dump(&bytes[..PREAMBLE_LEN + 5]),
        Err(DumpError::Truncated {
            section: "header",
            ..
        })
    ));
}

#[test]
fn trailing_bytes_are_a_size_mismatch() {
    let mut bytes = encode(&sample_dump());
    bytes.push(0);
    assert!(matches!(
        decode_dump(&bytes),
        Err(DumpError::SizeMismatch {
            expected: 72,
            actual: 73
        })
    ));
}

#[test]
fn malformed_header_json() {
    let mut bytes = encode(&sample_dump());
    bytes[PREAMBLE_LEN] = b'[';
    assert!(matches!(decode_dump(&bytes), Err(DumpError::Header(_))));
}

#[test]
fn invalid_manifest_detected_before_payload() {
    let dump = sample_dump();
    let mut manifest = dump.manifest().clone();
    manifest.token_counts.push(4);
    let header = serde_json::to_vec(&manifest).unwrap();
    let mut bytes = b"NXAD".to_vec();
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    match decode_dump(&bytes) {
        Err(DumpError::InvalidManifest(v)) => assert_eq!(v[0].field, "token_counts"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn nonzero_pad_bits_rejected() {
    let manifest = DumpManifest {
        format_version: FORMAT_VERSION,
        model_id: "m".into(),
        language: "en".into(),
        kind: DumpKind::FfnActivation,
        level: Level::Token,
        pooling: Pooling::None,
        n_layers: 1,
        n_units: 5,
        n_sentences: 1,
        token_counts: vec![1],
        dtype: Dtype::U1,
        state: StateTransform::Nas,
        state_source: None,
    };
    let dump = ActivationDump::new(manifest, vec![vec![1.0, 0.0, 1.0, 0.0, 1.0]]).unwrap();
    let mut bytes = encode(&dump);
    let last = bytes.len() - 1;
    assert_eq!(bytes[last], 0b0001_0101);
    bytes[last] |= 0b1000_0000;
    assert!(matches!(
        decode_dump(&bytes),
        Err(DumpError::NonzeroPadding { .. })
    ));
}

#[test]
fn reads_from_any_reader() {
    let bytes = encode(&sample_dump());
    let dump = read_dump(std::io::Cursor::new(bytes)).unwrap();
    assert_eq!(dump, sample_dump());
}

#[test]
fn file_roundtrip() {
    let dir = std::env::temp_dir().join(format!("xalign-dump-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("a.nxad");
    let written = xalign::dump::write_dump_file(&sample_dump(), &path).unwrap();
    assert_eq!(written, std::fs::metadata(&path).unwrap().len());
    assert_eq!(xalign::dump::read_dump_file(&path).unwrap(), sample_dump());
    std::fs::remove_dir_all(&dir).unwrap();
}

prop_compose! {
    fn arb_dump()(
        u1 in any::<bool>(),
        pooled in any::<bool>(),
        n_units in 1usize..20,
        n_layers in 1usize..4,
        counts in proptest::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
    ) -> ActivationDump {
        let pooled = pooled && !u1;
        let manifest = DumpManifest {
            format_version: FORMAT_VERSION,
            model_id: "prop".into(),
            language: "xx".into(),
            kind: DumpKind::FfnActivation,
            level: if pooled { Level::Pooled } else { Level::Token },
            pooling: if pooled { Pooling::Average } else { Pooling::None },
            n_layers,
            n_units,
            n_sentences: counts.len(),
            token_counts: counts.clone(),
            dtype: if u1 { Dtype::U1 } else { Dtype::F32 },
            state: if u1 { StateTransform::Nas } else { StateTransform::Raw },
            state_source: None,
        };
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let mut tensors = Vec::new();
        for &t in &counts {
            let rows = if pooled { 1 } else { t };
            for _ in 0..n_layers {
                tensors.push((0..rows * n_units).map(|_| {
                    let r = next();
                    if u1 { (r & 1) as f32 } else { f32::from_bits(r as u32) }
                }).collect());
            }
        }
        ActivationDump::new(manifest, tensors).unwrap()
    }
}

proptest! {
    #[test]
    fn roundtrip_is_bit_exact(dump in arb_dump()) {
        let bytes = encode(&dump);
        let back = decode_dump(&bytes).unwrap();
        prop_assert_eq!(back.manifest(), dump.manifest());
        for (a, b) in back.tensors().iter().zip(dump.tensors()) {
            let bits_a: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn any_truncation_is_detected(dump in arb_dump(), cut in 1usize..64) {
        let bytes = encode(&dump);
        let cut = cut.min(bytes.len());
        prop_assert!(decode_dump(&bytes[..bytes.len() - cut]).is_err());
    }
}
