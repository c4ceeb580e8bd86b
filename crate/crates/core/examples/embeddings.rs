//! Trains skip-gram vectors on the preprocessed fixture corpus and prints
//! nearest neighbours by cosine similarity.
//!
//! cargo run --release --example embeddings -- [word ...]

use std::path::PathBuf;

use dynamic_etm::corpus::{default_stopwords, load_jsonl, preprocess, PreprocessConfig};
use dynamic_etm::embeddings::{save_word2vec, train_skipgram, EmbeddingMatrix, SkipGramConfig};

fn cosine(e: &EmbeddingMatrix, a: usize, b: usize) -> f64 {
    let (x, y) = (e.column(a), e.column(b));
    let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    let norm = |z: &[f64]| z.iter().map(|p| p * p).sum::<f64>().sqrt();
    dot / (norm(&x) * norm(&y)).max(1e-12)
}

fn main() -> dynamic_etm::Result<()> {
    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus100.jsonl");
    let bundle = preprocess(&load_jsonl(&fixture)?, &PreprocessConfig::default(), &default_stopwords())?;
    let cfg = SkipGramConfig { dim: 50, ..Default::default() };
    let sg = train_skipgram(&bundle.split.train, &bundle.vocab, &cfg)?;
    for (i, loss) in sg.epoch_loss.iter().enumerate() {
        println!("epoch {i:2} loss {loss:.4}");
    }

    let vocab = &bundle.vocab;
    let mut queries: Vec<String> = std::env::args().skip(1).collect();
    if queries.is_empty() {
        queries = vocab.terms().iter().take(3).cloned().collect();
    }
    for q in &queries {
        let Some(id) = vocab.id(q) else {
            println!("{q}: not in vocabulary");
            continue;
        };
        let mut sims: Vec<(f64, usize)> = (0..vocab.len()).filter(|&v| v != id).map(|v| (cosine(&sg.embeddings, id, v), v)).collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0));
        let near: Vec<String> = sims.iter().take(5).map(|(s, v)| format!("{} {s:.2}", vocab.term(*v))).collect();
        println!("{q}: {}", near.join(", "));
    }

    let out = std::env::temp_dir().join("detm-embeddings.txt");
    save_word2vec(&out, &sg.embeddings, vocab)?;
    println!("word2vec text format written to {}", out.display());
    Ok(())
}
