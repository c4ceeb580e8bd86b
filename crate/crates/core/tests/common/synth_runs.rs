//! Training runs on the shared synthetic corpus.

use dynamic_etm::corpus::aggregate_by_time;
use dynamic_etm::detm::{matched_tv_distance, Detm, DetmHyperparams, SyntheticCorpus, TopicMatrix};
use dynamic_etm::dlda_rep::{DldaHyperparams, DldaRep};
use dynamic_etm::numcore::Tensor;
use dynamic_etm::training::{EpochLog, Trainable, Trainer};

/// Reduced networks and a larger step size, so a run takes seconds.
pub fn small_detm(num_topics: usize, epochs: usize) -> DetmHyperparams {
    DetmHyperparams {
        num_topics,
        epochs,
        patience: epochs,
        encoder_hidden: 100,
        lstm_hidden: 50,
        lstm_layers: 1,
        lstm_input_dim: 50,
        lr: 0.01,
        batch_size: 200,
        ..DetmHyperparams::default()
    }
}

pub fn small_dlda(num_topics: usize, epochs: usize) -> DldaHyperparams {
    DldaHyperparams {
        num_topics,
        epochs,
        patience: epochs,
        encoder_hidden: 100,
        batch_size: 200,
        ..DldaHyperparams::default()
    }
}

pub fn fit<M: Trainable>(model: M, opt: dynamic_etm::training::Optimizer, c: &SyntheticCorpus) -> (M, Vec<EpochLog>) {
    let mut tr = Trainer::new(model, opt);
    let mut log = Vec::new();
    tr.run(&c.bundle.split, |_, e| {
        log.push(e.clone());
        Ok(())
    })
    .expect("training");
    (tr.model, log)
}

pub fn fit_detm(c: &SyntheticCorpus, hyper: DetmHyperparams) -> (Detm, Vec<EpochLog>) {
    let w = aggregate_by_time(&c.bundle.split, &c.bundle.vocab);
    let m = Detm::new(hyper, &c.rho, &w).expect("model");
    let opt = m.optimizer();
    fit(m, opt, c)
}

pub fn fit_dlda(c: &SyntheticCorpus, hyper: DldaHyperparams) -> (DldaRep, Vec<EpochLog>) {
    let m = DldaRep::new(hyper, &c.bundle.vocab, c.bundle.split.num_times).expect("model");
    let opt = m.optimizer();
    fit(m, opt, c)
}

/// Mean ELBO of the first and last `n` epochs.
pub fn elbo_ends(log: &[EpochLog], n: usize) -> (f64, f64) {
    let mean = |s: &[EpochLog]| s.iter().map(|e| e.elbo).sum::<f64>() / s.len() as f64;
    (mean(&log[..n]), mean(&log[log.len() - n..]))
}

/// Matched TV distance of uniform topics to the truth.
pub fn uniform_tv(c: &SyntheticCorpus) -> f64 {
    let b = &c.truth.beta;
    let (k, t, v) = (b.num_topics(), b.num_times(), b.vocab_size());
    let u = TopicMatrix::new(Tensor::full(&[k * t, v], 1.0 / v as f64), k, t).unwrap();
    matched_tv_distance(&u, b).unwrap()
}

/// Greedy learned-to-true topic assignment at time 0 by TV distance.
pub fn topic_matching(learned: &TopicMatrix, truth: &TopicMatrix) -> Vec<usize> {
    let k = truth.num_topics();
    let tv = |a: &[f64], b: &[f64]| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let mut pairs: Vec<(f64, usize, usize)> = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| (tv(learned.row(i, 0), truth.row(j, 0)), i, j))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut to_truth = vec![usize::MAX; k];
    let mut used = vec![false; k];
    for (_, i, j) in pairs {
        if to_truth[i] == usize::MAX && !used[j] {
            to_truth[i] = j;
            used[j] = true;
        }
    }
    to_truth
}
