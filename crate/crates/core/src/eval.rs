//! Model-agnostic evaluation: document-completion perplexity, NPMI topic
//! coherence, topic diversity and topic quality (coherence x diversity).
//!
//! Every metric reads a model only through [`TopicModel`], so the dynamic
//! embedded topic model and the baseline go through identical code.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{count_terms, CorpusSplit, TimedDocument};
use crate::detm::TopicMatrix;
use crate::{Error, Result};

/// Smoothing inside the NPMI logs.
pub const NPMI_EPS: f64 = 1e-10;
pub const COHERENCE_TOP_N: usize = 10;
pub const DIVERSITY_TOP_N: usize = 25;

/// Conditioning information for one topic-proportion estimate.
#[derive(Clone, Debug)]
pub struct ThetaQuery {
    pub counts: Vec<(u32, u32)>,
    pub time: usize,
}

/// Read-only view of a trained model used by every metric.
pub trait TopicModel {
    fn num_topics(&self) -> usize;
    fn num_times(&self) -> usize;
    fn vocab_size(&self) -> usize;
    /// Topics computed at the variational means (no sampling).
    fn topic_matrix(&self) -> Result<TopicMatrix>;
    /// Point estimates of topic proportions, one per query, without sampling.
    fn infer_thetas(&self, queries: &[ThetaQuery]) -> Result<Vec<Vec<f64>>>;
}

/// Splits token positions: the first half gets the extra token on odd lengths.
pub fn halves(tokens: &[u32]) -> (&[u32], &[u32]) {
    tokens.split_at(tokens.len().div_ceil(2))
}

fn mixture_prob(theta: &[f64], beta: &TopicMatrix, t: usize, term: usize) -> f64 {
    theta
        .iter()
        .enumerate()
        .map(|(k, th)| th * beta.row(k, t)[term])
        .sum()
}

/// Log-likelihood totals from document completion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompletionTotals {
    pub log_prob: f64,
    pub tokens: usize,
    pub docs: usize,
}

/// Conditions on the first half of each document and scores the second.
/// Documents with fewer than two tokens are skipped.
pub fn completion_totals<M: TopicModel + ?Sized>(
    model: &M,
    docs: &[TimedDocument],
) -> Result<CompletionTotals> {
    let beta = model.topic_matrix()?;
    let eligible: Vec<&TimedDocument> = docs.iter().filter(|d| d.len() >= 2).collect();
    let queries: Vec<ThetaQuery> = eligible
        .iter()
        .map(|d| ThetaQuery {
            counts: count_terms(halves(&d.tokens).0),
            time: d.time_bin,
        })
        .collect();
    let thetas = model.infer_thetas(&queries)?;
    let mut totals = CompletionTotals {
        log_prob: 0.0,
        tokens: 0,
        docs: eligible.len(),
    };
    for (d, theta) in eligible.iter().zip(&thetas) {
        for &w in halves(&d.tokens).1 {
            let p = mixture_prob(theta, &beta, d.time_bin, w as usize);
            totals.log_prob += p.max(f64::MIN_POSITIVE).ln();
            totals.tokens += 1;
        }
    }
    Ok(totals)
}

/// `exp(-sum log p / N)` over second-half tokens of the test documents.
pub fn doc_completion_perplexity<M: TopicModel + ?Sized>(
    model: &M,
    test_docs: &[TimedDocument],
) -> Result<f64> {
    let t = completion_totals(model, test_docs)?;
    if t.docs == 0 {
        return Err(Error::Data(
            "no test document has at least 2 tokens; perplexity undefined".into(),
        ));
    }
    Ok((-t.log_prob / t.tokens as f64).exp())
}

/// Mean per-token log-likelihood of documents under topic proportions
/// inferred from the documents themselves, everything at variational means.
/// Used as the validation score for early stopping.
pub fn reconstruction_score<M: TopicModel + ?Sized>(
    model: &M,
    docs: &[TimedDocument],
) -> Result<Option<f64>> {
    let docs: Vec<&TimedDocument> = docs.iter().filter(|d| !d.is_empty()).collect();
    if docs.is_empty() {
        return Ok(None);
    }
    let beta = model.topic_matrix()?;
    let queries: Vec<ThetaQuery> = docs
        .iter()
        .map(|d| ThetaQuery {
            counts: d.counts.clone(),
            time: d.time_bin,
        })
        .collect();
    let thetas = model.infer_thetas(&queries)?;
    let (mut lp, mut n) = (0.0, 0usize);
    for (d, theta) in docs.iter().zip(&thetas) {
        for &(w, c) in &d.counts {
            let p = mixture_prob(theta, &beta, d.time_bin, w as usize);
            lp += c as f64 * p.max(f64::MIN_POSITIVE).ln();
            n += c as usize;
        }
    }
    Ok(Some(lp / n as f64))
}

/// Indices of the `n` largest entries, ties to the lower index.
pub fn top_terms(row: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// NPMI from document frequencies over `d` documents.
pub fn npmi(df_i: usize, df_j: usize, df_ij: usize, d: usize) -> f64 {
    if df_ij == 0 {
        return -1.0;
    }
    let n = d as f64;
    let (pi, pj, pij) = (df_i as f64 / n, df_j as f64 / n, df_ij as f64 / n);
    if df_ij == d {
        return 0.0;
    }
    let v = ((pij + NPMI_EPS) / (pi * pj + NPMI_EPS)).ln() / -(pij + NPMI_EPS).ln();
    v.clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerTimeScore {
    pub mean: f64,
    pub per_time: Vec<f64>,
}

/// Average NPMI over all pairs of each topic's `top_n` terms, averaged over
/// topics and then over time. Co-occurrence is document-level in `ref_docs`.
pub fn topic_coherence(
    beta: &TopicMatrix,
    ref_docs: &[TimedDocument],
    top_n: usize,
) -> Result<PerTimeScore> {
    if ref_docs.is_empty() {
        return Err(Error::Data("coherence needs a non-empty reference corpus".into()));
    }
    if top_n < 2 || top_n > beta.vocab_size() {
        return Err(Error::Config(format!(
            "coherence top_n must be in [2, V={}], got {top_n}",
            beta.vocab_size()
        )));
    }
    let tops: Vec<Vec<Vec<usize>>> = (0..beta.num_times())
        .map(|t| {
            (0..beta.num_topics())
                .map(|k| top_terms(beta.row(k, t), top_n))
                .collect()
        })
        .collect();
    let needed: BTreeSet<usize> = tops.iter().flatten().flatten().copied().collect();
    let mut postings: HashMap<usize, Vec<u32>> = needed.iter().map(|&w| (w, Vec::new())).collect();
    for (i, d) in ref_docs.iter().enumerate() {
        for &(w, _) in &d.counts {
            if let Some(p) = postings.get_mut(&(w as usize)) {
                p.push(i as u32);
            }
        }
    }
    let mut pair_cache: HashMap<(usize, usize), usize> = HashMap::new();
    let mut co_df = |a: usize, b: usize| -> usize {
        let key = (a.min(b), a.max(b));
        *pair_cache
            .entry(key)
            .or_insert_with(|| intersection_len(&postings[&key.0], &postings[&key.1]))
    };
    let dfs: HashMap<usize, usize> = needed
        .iter()
        .map(|&w| (w, postings_len(&postings, w)))
        .collect();
    let d = ref_docs.len();
    let per_time: Vec<f64> = tops
        .iter()
        .map(|topics| {
            let per_topic: Vec<f64> = topics
                .iter()
                .map(|top| {
                    let mut s = 0.0;
                    let mut pairs = 0;
                    for i in 0..top.len() {
                        for j in i + 1..top.len() {
                            let (a, b) = (top[i], top[j]);
                            s += npmi(dfs[&a], dfs[&b], co_df(a, b), d);
                            pairs += 1;
                        }
                    }
                    s / pairs as f64
                })
                .collect();
            per_topic.iter().sum::<f64>() / per_topic.len() as f64
        })
        .collect();
    Ok(PerTimeScore {
        mean: per_time.iter().sum::<f64>() / per_time.len() as f64,
        per_time,
    })
}

fn postings_len(p: &HashMap<usize, Vec<u32>>, w: usize) -> usize {
    p.get(&w).map_or(0, Vec::len)
}

fn intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Fraction of unique terms among all topics' `top_n` lists, per time step,
/// averaged over time.
pub fn topic_diversity(beta: &TopicMatrix, top_n: usize) -> Result<PerTimeScore> {
    if top_n == 0 || beta.vocab_size() < top_n {
        return Err(Error::Config(format!(
            "diversity top_n must be in [1, V={}], got {top_n}",
            beta.vocab_size()
        )));
    }
    let k = beta.num_topics();
    let per_time: Vec<f64> = (0..beta.num_times())
        .map(|t| {
            let unique: BTreeSet<usize> = (0..k)
                .flat_map(|kk| top_terms(beta.row(kk, t), top_n))
                .collect();
            unique.len() as f64 / (top_n * k) as f64
        })
        .collect();
    Ok(PerTimeScore {
        mean: per_time.iter().sum::<f64>() / per_time.len() as f64,
        per_time,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub coherence_top_n: usize,
    pub diversity_top_n: usize,
    /// Which split supplies coherence co-occurrence counts.
    pub reference_corpus: String,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            coherence_top_n: COHERENCE_TOP_N,
            diversity_top_n: DIVERSITY_TOP_N,
            reference_corpus: "train".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerTime {
    pub labels: Vec<String>,
    pub tc: Vec<f64>,
    pub td: Vec<f64>,
}

/// JSON keys: `perplexity`, `tc`, `td`, `tq`, `per_time`, `config`,
/// `test_docs`, `test_tokens`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub perplexity: f64,
    pub tc: f64,
    pub td: f64,
    pub tq: f64,
    pub per_time: PerTime,
    pub config: MetricConfig,
    pub test_docs: usize,
    pub test_tokens: usize,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "perplexity,tc,td,tq"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.perplexity, self.tc, self.td, self.tq)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        let p = dir.join("metrics.json");
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("metrics.csv");
        let csv = format!("{}\n{}\n", Self::csv_header(), self.csv_row());
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        let mut per = String::from("t,label,tc,td\n");
        for (t, label) in self.per_time.labels.iter().enumerate() {
            per.push_str(&format!(
                "{t},{label},{},{}\n",
                self.per_time.tc[t], self.per_time.td[t]
            ));
        }
        let p = dir.join("metrics_per_time.csv");
        fs::write(&p, per).map_err(|e| Error::io(&p, e))
    }
}

/// All metrics with the default settings: perplexity on the test split,
/// coherence against the training split, diversity of the top 25 terms.
pub fn metric_report<M: TopicModel + ?Sized>(
    model: &M,
    corpus: &CorpusSplit,
) -> Result<MetricReport> {
    metric_report_with(model, corpus, &MetricConfig::default())
}

pub fn metric_report_with<M: TopicModel + ?Sized>(
    model: &M,
    corpus: &CorpusSplit,
    config: &MetricConfig,
) -> Result<MetricReport> {
    let beta = model.topic_matrix()?;
    let totals = completion_totals(model, &corpus.test)?;
    if totals.docs == 0 {
        return Err(Error::Data(
            "no test document has at least 2 tokens; perplexity undefined".into(),
        ));
    }
    let reference = match config.reference_corpus.as_str() {
        "train" => &corpus.train,
        "validation" => &corpus.validation,
        "test" => &corpus.test,
        other => return Err(Error::Config(format!("unknown reference corpus {other:?}"))),
    };
    let tc = topic_coherence(&beta, reference, config.coherence_top_n)?;
    let td = topic_diversity(&beta, config.diversity_top_n)?;
    Ok(MetricReport {
        perplexity: (-totals.log_prob / totals.tokens as f64).exp(),
        tc: tc.mean,
        td: td.mean,
        tq: tc.mean * td.mean,
        per_time: PerTime {
            labels: corpus.bin_labels.clone(),
            tc: tc.per_time,
            td: td.per_time,
        },
        config: config.clone(),
        test_docs: totals.docs,
        test_tokens: totals.tokens,
    })
}

/// Per-term document frequencies, keyed by term id.
pub fn document_frequencies(docs: &[TimedDocument]) -> BTreeMap<u32, usize> {
    let mut df = BTreeMap::new();
    for d in docs {
        for &(w, _) in &d.counts {
            *df.entry(w).or_default() += 1;
        }
    }
    df
}
