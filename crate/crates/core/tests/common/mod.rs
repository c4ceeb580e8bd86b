#![allow(dead_code)]

pub mod cli_runs;
pub mod gradcheck;
pub mod metric_oracles;
pub mod suites;
pub mod synth_runs;

use std::path::PathBuf;

use dynamic_etm::corpus::{count_terms, TimedDocument};
use dynamic_etm::detm::{random_embeddings, sample_corpus, SynthConfig, SyntheticCorpus};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn doc(tokens: &[u32], time_bin: usize) -> TimedDocument {
    let d = TimedDocument::new(tokens.to_vec(), time_bin, "test");
    debug_assert_eq!(d.counts, count_terms(tokens));
    d
}

/// The synthetic corpus used by the optimization, recovery and smoothness
/// checks: K=3, V=100, L=10, T=5, 2000 documents of 40 tokens.
pub fn synthetic() -> SyntheticCorpus {
    let cfg = SynthConfig::default();
    let rho = random_embeddings(cfg.embedding_dim, cfg.vocab_size, 7);
    sample_corpus(&cfg, &rho).expect("synthetic corpus")
}
