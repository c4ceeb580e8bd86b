//! End-to-end run on the Debian package changelogs installed on this
//! machine: entries are dated by their sign-off line and binned into
//! five-year steps. Compares topic diversity of DETM and DLDA-rep.
//!
//! cargo run --release --example debian_changelogs -- [max_docs] [topics]

#[path = "../tests/support/debian.rs"]
mod debian;

use std::path::Path;
use std::time::Instant;

use dynamic_etm::corpus::{aggregate_by_time, default_stopwords, preprocess, DatasetSummary, PreprocessConfig};
use dynamic_etm::detm::{Detm, DetmHyperparams};
use dynamic_etm::dlda_rep::{DldaHyperparams, DldaRep};
use dynamic_etm::embeddings::{train_skipgram, SkipGramConfig};
use dynamic_etm::eval::{metric_report, top_terms, TopicModel};
use dynamic_etm::training::Trainer;

fn main() -> dynamic_etm::Result<()> {
    env_logger::init();
    let arg = |i: usize, d: usize| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (max_docs, k) = (arg(1, 8000), arg(2, 50));
    let start = Instant::now();
    let raw = debian::load(Path::new(debian::DOC_ROOT), 1997..=2026, max_docs);
    println!("{} changelog entries", raw.len());
    let cfg = PreprocessConfig { min_df: 3, bin_width: 5, ..Default::default() };
    let b = preprocess(&raw, &cfg, &default_stopwords())?;
    println!("{}\n{}", DatasetSummary::header(), b.split.summary(&b.vocab).row());

    let emb = train_skipgram(&b.split.train, &b.vocab, &SkipGramConfig { dim: 100, ..Default::default() })?.embeddings;
    println!("embeddings done at {:.0}s", start.elapsed().as_secs_f64());

    let h = DetmHyperparams {
        num_topics: k,
        epochs: 10,
        patience: 10,
        encoder_hidden: 200,
        lstm_hidden: 100,
        lstm_input_dim: 100,
        lstm_layers: 1,
        alpha_init_std: 1.0,
        alpha_init_shared: true,
        ..DetmHyperparams::default()
    };
    let m = Detm::new(h, &emb, &aggregate_by_time(&b.split, &b.vocab))?;
    let opt = m.optimizer();
    let mut detm = Trainer::new(m, opt);
    detm.run(&b.split, |_, e| {
        println!("detm epoch {:2} elbo {:.0}", e.epoch, e.elbo);
        Ok(())
    })?;

    let h = DldaHyperparams { num_topics: k, epochs: 15, patience: 15, encoder_hidden: 200, beta_init_std: 1.0, ..DldaHyperparams::default() };
    let m = DldaRep::new(h, &b.vocab, b.split.num_times)?;
    let opt = m.optimizer();
    let mut dlda = Trainer::new(m, opt);
    dlda.run(&b.split, |_, e| {
        println!("dlda epoch {:2} elbo {:.0}", e.epoch, e.elbo);
        Ok(())
    })?;

    for (name, model) in [("detm", &detm.model as &dyn TopicModel), ("dlda-rep", &dlda.model)] {
        let r = metric_report(model, &b.split)?;
        println!("{name:>8}: perplexity {:.1} tc {:.4} td {:.4} tq {:.4}", r.perplexity, r.tc, r.td, r.tq);
    }
    let beta = detm.model.topic_matrix()?;
    for kk in 0..k.min(5) {
        println!("detm topic {kk}");
        for t in 0..beta.num_times() {
            let words: Vec<&str> = top_terms(beta.row(kk, t), 8).into_iter().map(|v| b.vocab.term(v)).collect();
            println!("  {}  {}", b.split.bin_labels[t], words.join(" "));
        }
    }
    println!("total {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
