//! Fits a DETM on a synthetic corpus, checkpoints halfway and resumes.
//!
//! cargo run --release --example train_detm -- [epochs]

use std::collections::BTreeMap;

use dynamic_etm::checkpoint::Checkpoint;
use dynamic_etm::corpus::aggregate_by_time;
use dynamic_etm::detm::{alpha_step_distance, random_embeddings, sample_corpus, Detm, DetmHyperparams, SynthConfig};
use dynamic_etm::training::Trainer;

fn main() -> dynamic_etm::Result<()> {
    env_logger::init();
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let cfg = SynthConfig::default();
    let synth = sample_corpus(&cfg, &random_embeddings(cfg.embedding_dim, cfg.vocab_size, 7))?;
    let split = &synth.bundle.split;
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
    let w = aggregate_by_time(split, &synth.bundle.vocab);
    let model = Detm::new(hyper.clone(), &synth.rho, &w)?;
    let opt = model.optimizer();
    let mut tr = Trainer::new(model, opt);
    let half = epochs / 2;
    while tr.progress.epochs_done < half {
        let e = tr.run_epoch(split)?;
        println!("epoch {:3} elbo {:9.1} kl_alpha {:7.2} kl_eta {:6.2} val {:?}", e.epoch, e.elbo, e.kl_alpha, e.kl_eta, e.val_score);
    }

    let dir = std::env::temp_dir().join("detm-checkpoint");
    tr.checkpoint(BTreeMap::new())?.save(&dir)?;
    println!("checkpoint at {}", dir.display());

    let ckpt = Checkpoint::load(&dir)?;
    let model = Detm::from_checkpoint(&ckpt)?;
    let opt = model.optimizer();
    let mut tr = Trainer::resume(model, opt, &ckpt)?;
    tr.run(split, |_, e| {
        println!("epoch {:3} elbo {:9.1} kl_alpha {:7.2} kl_eta {:6.2} val {:?}", e.epoch, e.elbo, e.kl_alpha, e.kl_eta, e.val_score);
        Ok(())
    })?;
    println!("mean alpha step between times: {:.5}", alpha_step_distance(&tr.model)?);
    Ok(())
}
