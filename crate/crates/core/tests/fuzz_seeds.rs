//! Replays the checked-in fuzz seeds, plus truncated and bit-flipped
//! variants, through the same checks the fuzz targets make.

use std::fs;
use std::path::PathBuf;

use cltune_core::checkpoint::Artifact;
use cltune_core::corpus::{parse_corpus_cache, write_corpus_cache};
use cltune_core::harness::ExperimentConfig;
use cltune_core::trainer::MetricsRecord;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files.into_iter().map(|p| fs::read(p).unwrap()).collect()
}

/// The seed itself, every prefix at a coarse stride, and single-byte flips.
fn variants(seed: &[u8]) -> Vec<Vec<u8>> {
    let stride = (seed.len() / 64).max(1);
    let mut out = vec![seed.to_vec()];
    out.extend((0..seed.len()).step_by(stride).map(|n| seed[..n].to_vec()));
    out.extend((0..seed.len()).step_by(stride).map(|i| {
        let mut v = seed.to_vec();
        v[i] ^= 0x5a;
        v
    }));
    out
}

#[test]
fn checkpoint_seeds() {
    for seed in seeds("checkpoint_decode") {
        assert!(Artifact::decode(&seed).is_ok());
        for data in variants(&seed) {
            if let Ok(artifact) = Artifact::decode(&data) {
                let bytes = artifact.encode().unwrap();
                assert_eq!(Artifact::decode(&bytes).unwrap().encode().unwrap(), bytes);
            }
        }
    }
}

#[test]
fn corpus_cache_seeds() {
    for seed in seeds("corpus_cache_parse") {
        assert!(parse_corpus_cache(std::str::from_utf8(&seed).unwrap(), 64).is_ok());
        for data in variants(&seed) {
            let Ok(text) = std::str::from_utf8(&data) else { continue };
            if let Ok((header, stream)) = parse_corpus_cache(text, 64) {
                let again = parse_corpus_cache(&write_corpus_cache(&header, &stream), 64).unwrap();
                assert_eq!(again, (header, stream));
            }
        }
    }
}

#[test]
fn config_seeds() {
    for seed in seeds("config_parse") {
        assert!(ExperimentConfig::parse(std::str::from_utf8(&seed).unwrap()).is_ok());
        for data in variants(&seed) {
            let Ok(text) = std::str::from_utf8(&data) else { continue };
            if let Ok(config) = ExperimentConfig::parse(text) {
                assert_eq!(config.digest().len(), 64);
            }
        }
    }
}

#[test]
fn metrics_line_seeds() {
    for seed in seeds("metrics_line_parse") {
        assert!(MetricsRecord::parse_line(std::str::from_utf8(&seed).unwrap()).is_ok());
        for data in variants(&seed) {
            let Ok(line) = std::str::from_utf8(&data) else { continue };
            if let Ok(record) = MetricsRecord::parse_line(line) {
                MetricsRecord::parse_line(&record.to_line()).unwrap();
            }
        }
    }
}
