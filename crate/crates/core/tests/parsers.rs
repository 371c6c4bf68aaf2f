mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use robust_kd::checkpoint::{decode, encode_multihead};
use robust_kd::config::RunConfig;
use robust_kd::corruptions::{parse_manifest_line, AugmentedDataset, SeverityTable};
use robust_kd::data::parse_cifar10_binary;

const SEVERITY_TOML: &str = include_str!("../data/severity_tables.toml");

fn sample_manifest() -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = AugmentedDataset { num_classes: CLASSES, examples: mixed_batch(&mut rng, 6) };
    data.manifest().iter().map(|r| serde_json::to_string(r).unwrap()).collect()
}

fn checkpoint_bytes() -> Vec<u8> {
    let (_, model) = tiny_model(0, 0.25);
    encode_multihead(&model, "cafe").unwrap()
}

#[test]
fn valid_inputs_parse() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::parse(&cfg.to_toml(), &[]).unwrap(), cfg);
    SeverityTable::parse(SEVERITY_TOML).unwrap();
    for line in sample_manifest() {
        parse_manifest_line(&line).unwrap();
    }
    decode(&checkpoint_bytes()).unwrap();
    let record: Vec<u8> = std::iter::once(3).chain((0..3072).map(|i| (i % 251) as u8)).collect();
    assert_eq!(parse_cifar10_binary(&record, 2).unwrap().len(), 1);
}

fn mutate(mut bytes: Vec<u8>, edits: &[(usize, u8)]) -> Vec<u8> {
    for &(pos, b) in edits {
        if !bytes.is_empty() {
            let i = pos % bytes.len();
            bytes[i] = b;
        }
    }
    bytes
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn run_config_never_panics(text in ".{0,400}", edits in prop::collection::vec((any::<usize>(), 32u8..127), 0..6)) {
        let _ = RunConfig::parse(&text, &[]);
        let mutated = String::from_utf8(mutate(RunConfig::default().to_toml().into_bytes(), &edits)).unwrap();
        let _ = RunConfig::parse(&mutated, &[]);
        let _ = RunConfig::parse("", &[text]);
    }

    #[test]
    fn severity_table_never_panics(text in ".{0,400}", edits in prop::collection::vec((any::<usize>(), 32u8..127), 0..6)) {
        let _ = SeverityTable::parse(&text);
        let mutated = String::from_utf8(mutate(SEVERITY_TOML.as_bytes().to_vec(), &edits)).unwrap();
        if let Ok(table) = SeverityTable::parse(&mutated) {
            for kind in robust_kd::corruptions::CorruptionKind::ALL {
                if let Some(m) = table.magnitudes(*kind) {
                    prop_assert!(m.windows(2).all(|w| w[0] <= w[1]));
                }
            }
        }
    }

    #[test]
    fn checkpoint_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..512),
                                      edits in prop::collection::vec((any::<usize>(), any::<u8>()), 1..4)) {
        let _ = decode(&bytes);
        let valid = checkpoint_bytes();
        let mutated = mutate(valid.clone(), &edits);
        if mutated != valid {
            prop_assert!(decode(&mutated).is_err());
        }
        let cut = edits[0].0 % valid.len();
        prop_assert!(decode(&valid[..cut]).is_err());
    }

    #[test]
    fn manifest_line_never_panics(text in ".{0,200}", edits in prop::collection::vec((any::<usize>(), 32u8..127), 0..4)) {
        let _ = parse_manifest_line(&text);
        for line in sample_manifest() {
            let mutated = String::from_utf8(mutate(line.into_bytes(), &edits)).unwrap();
            if let Ok(rec) = parse_manifest_line(&mutated) {
                prop_assert_eq!(rec.beta == 1, rec.provenance.is_none());
            }
        }
    }

    #[test]
    fn cifar_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..8000), downsample in 0usize..6) {
        if let Ok(examples) = parse_cifar10_binary(&bytes, downsample) {
            prop_assert_eq!(examples.len() * 3073, bytes.len());
            prop_assert!(examples.iter().all(|e| e.label < 10 && e.image.is_in_unit_range()));
        }
    }
}
