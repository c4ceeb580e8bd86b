//! Samples a corpus from the generative process, fits both models and
//! compares recovered topics against the truth. Networks are shrunk to
//! match the 100-word vocabulary.
//!
//! cargo run --release --example synthetic_recovery -- [epochs]

use std::time::Instant;

use dynamic_etm::corpus::aggregate_by_time;
use dynamic_etm::detm::{
    matched_tv_distance, random_embeddings, sample_corpus, Detm, DetmHyperparams, SynthConfig,
    TopicMatrix,
};
use dynamic_etm::dlda_rep::{DldaHyperparams, DldaRep};
use dynamic_etm::eval::TopicModel;
use dynamic_etm::numcore::Tensor;
use dynamic_etm::training::Trainer;

fn main() -> dynamic_etm::Result<()> {
    env_logger::init();
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let cfg = SynthConfig::default();
    let synth = sample_corpus(&cfg, &random_embeddings(cfg.embedding_dim, cfg.vocab_size, 7))?;
    let split = &synth.bundle.split;
    let uniform = TopicMatrix::new(
        Tensor::full(&[cfg.num_topics * cfg.num_times, cfg.vocab_size], 1.0 / cfg.vocab_size as f64),
        cfg.num_topics,
        cfg.num_times,
    )?;
    let base = matched_tv_distance(&uniform, &synth.truth.beta)?;
    println!("uniform baseline TV {base:.4}");

    let hyper = DetmHyperparams {
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
    let start = Instant::now();
    let w = aggregate_by_time(split, &synth.bundle.vocab);
    let model = Detm::new(hyper, &synth.rho, &w)?;
    let opt = model.optimizer();
    let mut tr = Trainer::new(model, opt);
    tr.run(split, |_, e| {
        println!("detm epoch {:3} elbo {:.2} val {:?}", e.epoch, e.elbo, e.val_score);
        Ok(())
    })?;
    let tv = matched_tv_distance(&tr.model.topic_matrix()?, &synth.truth.beta)?;
    println!("detm TV {tv:.4} ({:.1}s)", start.elapsed().as_secs_f64());

    let hyper = DldaHyperparams {
        num_topics: cfg.num_topics,
        epochs,
        patience: epochs,
        encoder_hidden: 100,
        batch_size: 200,
        ..DldaHyperparams::default()
    };
    let start = Instant::now();
    let model = DldaRep::new(hyper, &synth.bundle.vocab, split.num_times)?;
    let opt = model.optimizer();
    let mut tr = Trainer::new(model, opt);
    tr.run(split, |_, e| {
        println!("dlda epoch {:3} elbo {:.2} val {:?}", e.epoch, e.elbo, e.val_score);
        Ok(())
    })?;
    let tv = matched_tv_distance(&tr.model.topic_matrix()?, &synth.truth.beta)?;
    println!("dlda TV {tv:.4} ({:.1}s)", start.elapsed().as_secs_f64());
    Ok(())
}
