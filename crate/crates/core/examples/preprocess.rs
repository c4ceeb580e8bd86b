//! Turns a JSONL corpus into a vocabulary and time-binned splits.
//!
//! cargo run --example preprocess -- [corpus.jsonl] [out_dir]

use std::path::PathBuf;

use dynamic_etm::corpus::{aggregate_by_time, default_stopwords, load_jsonl, preprocess, CorpusBundle, DatasetSummary, PreprocessConfig};

fn main() -> dynamic_etm::Result<()> {
    let mut args = std::env::args().skip(1);
    let input = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus100.jsonl"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("detm-corpus"));

    let raw = load_jsonl(&input)?;
    let cfg = PreprocessConfig { min_df: 2, ..Default::default() };
    let bundle = preprocess(&raw, &cfg, &default_stopwords())?;
    println!("{}\n{}", DatasetSummary::header(), bundle.split.summary(&bundle.vocab).row());
    println!("time bins: {}", bundle.split.bin_labels.join(", "));

    // most frequent terms per bin
    let agg = aggregate_by_time(&bundle.split, &bundle.vocab);
    for (t, label) in bundle.split.bin_labels.iter().enumerate() {
        let row = agg.rows.row_slice(t);
        let top: Vec<&str> = dynamic_etm::eval::top_terms(row, 5).into_iter().map(|v| bundle.vocab.term(v)).collect();
        println!("{label}: {}", top.join(" "));
    }

    bundle.save(&out)?;
    assert_eq!(CorpusBundle::load(&out)?, bundle);
    println!("saved to {}", out.display());
    Ok(())
}
