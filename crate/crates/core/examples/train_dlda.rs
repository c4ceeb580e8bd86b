//! Fits the DLDA-rep baseline on a synthetic corpus. The per-time topics are
//! tied for the first few epochs and then trained separately.
//!
//! cargo run --release --example train_dlda -- [epochs]

use dynamic_etm::detm::{matched_tv_distance, random_embeddings, sample_corpus, SynthConfig};
use dynamic_etm::dlda_rep::{DldaHyperparams, DldaRep};
use dynamic_etm::eval::TopicModel;
use dynamic_etm::training::Trainer;

fn main() -> dynamic_etm::Result<()> {
    env_logger::init();
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let cfg = SynthConfig::default();
    let synth = sample_corpus(&cfg, &random_embeddings(cfg.embedding_dim, cfg.vocab_size, 7))?;
    let split = &synth.bundle.split;
    let hyper = DldaHyperparams {
        num_topics: cfg.num_topics,
        epochs,
        patience: epochs,
        encoder_hidden: 100,
        batch_size: 200,
        ..DldaHyperparams::default()
    };
    let model = DldaRep::new(hyper, &synth.bundle.vocab, split.num_times)?;
    let opt = model.optimizer();
    let mut tr = Trainer::new(model, opt);
    tr.run(split, |t, e| {
        let tied = if t.model.is_tied() { " (tied)" } else { "" };
        println!("epoch {:3} elbo {:9.1} kl_eta {:7.2} val {:?}{tied}", e.epoch, e.elbo, e.kl_eta, e.val_score);
        Ok(())
    })?;

    let tv = matched_tv_distance(&tr.model.topic_matrix()?, &synth.truth.beta)?;
    println!("matched TV distance to the true topics: {tv:.4}");
    let cov = tr.model.eta_covariance(0)?;
    println!("posterior variance of topic 0 logits over time:");
    for t in 0..split.num_times {
        print!(" {:.4}", cov.get(t, t));
    }
    println!();
    Ok(())
}
