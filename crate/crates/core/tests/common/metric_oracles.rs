//! Counting oracles for the evaluation metrics.

use std::collections::BTreeSet;

use dynamic_etm::corpus::{load_jsonl, preprocess, default_stopwords, CorpusBundle, PreprocessConfig, TimedDocument};
use dynamic_etm::detm::TopicMatrix;
use dynamic_etm::eval::{doc_completion_perplexity, topic_coherence, topic_diversity, ThetaQuery, TopicModel, NPMI_EPS};
use dynamic_etm::numcore::Tensor;
use dynamic_etm::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A model with fixed topics and the same proportions for every document.
pub struct Fixed {
    pub beta: TopicMatrix,
    pub theta: Vec<f64>,
}

impl TopicModel for Fixed {
    fn num_topics(&self) -> usize {
        self.beta.num_topics()
    }
    fn num_times(&self) -> usize {
        self.beta.num_times()
    }
    fn vocab_size(&self) -> usize {
        self.beta.vocab_size()
    }
    fn topic_matrix(&self) -> Result<TopicMatrix> {
        Ok(self.beta.clone())
    }
    fn infer_thetas(&self, q: &[ThetaQuery]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![self.theta.clone(); q.len()])
    }
}

pub fn uniform_model(k: usize, t: usize, v: usize) -> Fixed {
    Fixed {
        beta: TopicMatrix::new(Tensor::full(&[k * t, v], 1.0 / v as f64), k, t).unwrap(),
        theta: vec![1.0 / k as f64; k],
    }
}

/// Row-normalized `exp` of Gaussian noise, `(K*T) x V`.
pub fn random_topics(k: usize, t: usize, v: usize, seed: u64) -> TopicMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(&[k * t, v], 2.0, &mut rng).map(f64::exp);
    for r in 0..k * t {
        let row = x.row_slice_mut(r);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    TopicMatrix::new(x, k, t).unwrap()
}

/// `|perplexity - V|` of a forced-uniform model on the synthetic test split.
pub fn uniform_perplexity_gap() -> f64 {
    let c = super::synthetic();
    let split = &c.bundle.split;
    let v = c.bundle.vocab.len();
    let m = uniform_model(3, split.num_times, v);
    (doc_completion_perplexity(&m, &split.test).unwrap() - v as f64).abs()
}

/// Diversity of K identical topics and of K topics with disjoint top lists,
/// against the exact values `1/K` and `1`.
pub fn diversity_extremes() -> [(f64, f64); 2] {
    let (k, t, top) = (4, 2, 25);
    let v = k * top;
    let mut same = Tensor::zeros(&[k * t, v]);
    let mut disjoint = Tensor::zeros(&[k * t, v]);
    for r in 0..k * t {
        let kk = r / t;
        for w in 0..v {
            // strictly decreasing weights so top lists are unambiguous
            same.row_slice_mut(r)[w] = (v - w) as f64;
            let own = w / top == kk;
            disjoint.row_slice_mut(r)[w] = if own { 2.0 * v as f64 - w as f64 } else { (v - w) as f64 };
        }
        for m in [&mut same, &mut disjoint] {
            let row = m.row_slice_mut(r);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
    }
    let td = |m: Tensor| topic_diversity(&TopicMatrix::new(m, k, t).unwrap(), top).unwrap().mean;
    [(td(same), 1.0 / k as f64), (td(disjoint), 1.0)]
}

pub fn corpus20() -> CorpusBundle {
    let raw = load_jsonl(&super::fixture("corpus20.jsonl")).unwrap();
    let cfg = PreprocessConfig { max_df: 1.0, ..Default::default() };
    preprocess(&raw, &cfg, &default_stopwords()).unwrap()
}

/// Coherence by scanning every reference document for every pair.
pub fn brute_force_coherence(beta: &TopicMatrix, docs: &[TimedDocument], top_n: usize) -> Vec<f64> {
    let sets: Vec<BTreeSet<u32>> = docs.iter().map(|d| d.tokens.iter().copied().collect()).collect();
    let d = docs.len() as f64;
    let df = |ws: &[u32]| sets.iter().filter(|s| ws.iter().all(|w| s.contains(w))).count() as f64;
    (0..beta.num_times())
        .map(|t| {
            let mut per_topic = 0.0;
            for k in 0..beta.num_topics() {
                let row = beta.row(k, t);
                let mut order: Vec<u32> = (0..row.len() as u32).collect();
                order.sort_by(|&a, &b| row[b as usize].partial_cmp(&row[a as usize]).unwrap().then(a.cmp(&b)));
                let top = &order[..top_n];
                let (mut s, mut pairs) = (0.0, 0.0);
                for i in 0..top_n {
                    for j in i + 1..top_n {
                        let (pi, pj, pij) = (df(&[top[i]]) / d, df(&[top[j]]) / d, df(&[top[i], top[j]]) / d);
                        s += if pij == 0.0 {
                            -1.0
                        } else if pij == 1.0 {
                            0.0
                        } else {
                            let v = ((pij + NPMI_EPS) / (pi * pj + NPMI_EPS)).ln() / -(pij + NPMI_EPS).ln();
                            v.clamp(-1.0, 1.0)
                        };
                        pairs += 1.0;
                    }
                }
                per_topic += s / pairs;
            }
            per_topic / beta.num_topics() as f64
        })
        .collect()
}

/// Largest gap between library and brute-force coherence on the 20-document
/// fixture, over several random topic matrices.
pub fn coherence_oracle_gap() -> f64 {
    let b = corpus20();
    let docs: Vec<TimedDocument> = b.split.all_docs().cloned().collect();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let beta = random_topics(3, b.split.num_times, b.vocab.len(), seed);
        let lib = topic_coherence(&beta, &docs, 10).unwrap();
        let oracle = brute_force_coherence(&beta, &docs, 10);
        for (a, o) in lib.per_time.iter().zip(&oracle) {
            worst = worst.max((a - o).abs());
        }
    }
    worst
}
