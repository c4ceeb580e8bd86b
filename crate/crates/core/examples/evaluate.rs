//! Trains both models briefly on a synthetic corpus and compares them with
//! the full metric report: document-completion perplexity, coherence,
//! diversity and their product.
//!
//! cargo run --release --example evaluate -- [epochs]

use dynamic_etm::corpus::aggregate_by_time;
use dynamic_etm::detm::{random_embeddings, sample_corpus, Detm, DetmHyperparams, SynthConfig};
use dynamic_etm::dlda_rep::{DldaHyperparams, DldaRep};
use dynamic_etm::eval::{metric_report, MetricReport};
use dynamic_etm::training::Trainer;

fn main() -> dynamic_etm::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let cfg = SynthConfig::default();
    let synth = sample_corpus(&cfg, &random_embeddings(cfg.embedding_dim, cfg.vocab_size, 7))?;
    let split = &synth.bundle.split;

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
    let m = Detm::new(h, &synth.rho, &aggregate_by_time(split, &synth.bundle.vocab))?;
    let opt = m.optimizer();
    let mut detm = Trainer::new(m, opt);
    detm.run(split, |_, _| Ok(()))?;

    let h = DldaHyperparams { num_topics: cfg.num_topics, epochs, patience: epochs, encoder_hidden: 100, batch_size: 200, ..DldaHyperparams::default() };
    let m = DldaRep::new(h, &synth.bundle.vocab, split.num_times)?;
    let opt = m.optimizer();
    let mut dlda = Trainer::new(m, opt);
    dlda.run(split, |_, _| Ok(()))?;

    println!("model    {}", MetricReport::csv_header());
    let detm_report = metric_report(&detm.model, split)?;
    println!("detm     {}", detm_report.csv_row());
    println!("dlda-rep {}", metric_report(&dlda.model, split)?.csv_row());

    println!("\nper-time scores for DETM");
    let pt = &detm_report.per_time;
    for ((label, tc), td) in pt.labels.iter().zip(&pt.tc).zip(&pt.td) {
        println!("{label:>6}  tc {tc:.4}  td {td:.4}");
    }
    let out = std::env::temp_dir().join("detm-eval");
    detm_report.write(&out)?;
    println!("report written to {}", out.display());
    Ok(())
}
