//! Prints the top words of each topic over time and the probability curve of
//! a few words within a topic.
//!
//! cargo run --release --example export -- [epochs]

use dynamic_etm::corpus::aggregate_by_time;
use dynamic_etm::detm::{random_embeddings, sample_corpus, Detm, DetmHyperparams, SynthConfig};
use dynamic_etm::eval::{top_terms, TopicModel};
use dynamic_etm::training::Trainer;

fn main() -> dynamic_etm::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let cfg = SynthConfig::default();
    let synth = sample_corpus(&cfg, &random_embeddings(cfg.embedding_dim, cfg.vocab_size, 7))?;
    let (split, vocab) = (&synth.bundle.split, &synth.bundle.vocab);
    let h = DetmHyperparams {
        num_topics: cfg.num_topics,
        epochs,
        patience: epochs,
        encoder_hidden: 100,
        lstm_hidden: 50,
        lstm_input_dim: 50,
        lstm_layers: 1,
        lr: 0.01,
        batch_size: 200,
        ..DetmHyperparams::default()
    };
    let m = Detm::new(h, &synth.rho, &aggregate_by_time(split, vocab))?;
    let opt = m.optimizer();
    let mut tr = Trainer::new(m, opt);
    tr.run(split, |_, _| Ok(()))?;
    let beta = tr.model.topic_matrix()?;

    for k in 0..beta.num_topics() {
        println!("topic {k}");
        for t in 0..beta.num_times() {
            let words: Vec<&str> = top_terms(beta.row(k, t), 8).into_iter().map(|v| vocab.term(v)).collect();
            println!("  {:>4}  {}", split.bin_labels[t], words.join(" "));
        }
    }

    // the leading words of topic 0 at the first time step, tracked forward
    let tracked = top_terms(beta.row(0, 0), 3);
    println!("\nword curves in topic 0");
    for v in tracked {
        let curve: Vec<String> = (0..beta.num_times()).map(|t| format!("{:.4}", beta.get(0, t, v))).collect();
        println!("  {:>6}  {}", vocab.term(v), curve.join(" "));
    }
    Ok(())
}
