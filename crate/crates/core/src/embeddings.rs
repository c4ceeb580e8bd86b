//! Word embeddings `rho` (an `L x V` matrix): skip-gram with negative sampling
//! trained on the training split, or vectors loaded from word2vec text files.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TimedDocument, Vocabulary};
use crate::numcore::serialize;
use crate::numcore::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    /// `L x V`; column `v` is the embedding of term `v`.
    pub rho: Tensor,
    pub vocab_hash: String,
}

impl EmbeddingMatrix {
    pub fn new(rho: Tensor, vocab_hash: impl Into<String>) -> Result<Self> {
        if rho.shape().len() != 2 {
            return Err(Error::shape("embeddings", format!("rho must be L x V, got {:?}", rho.shape())));
        }
        if !rho.all_finite() {
            return Err(Error::Numerical("non-finite embedding entry".into()));
        }
        Ok(EmbeddingMatrix {
            rho,
            vocab_hash: vocab_hash.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.rho.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.rho.cols()
    }

    pub fn column(&self, v: usize) -> Vec<f64> {
        (0..self.dim()).map(|l| self.rho.get(l, v)).collect()
    }

    /// Rejects a vocabulary this matrix was not built for.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if self.vocab_size() != vocab.len() || self.vocab_hash != vocab.hash() {
            return Err(Error::Data(format!(
                "embeddings bound to vocabulary {} ({} terms) but corpus vocabulary is {} ({} terms)",
                short(&self.vocab_hash),
                self.vocab_size(),
                short(&vocab.hash()),
                vocab.len()
            )));
        }
        Ok(())
    }

    /// Binary export: `rho.bin` plus `embeddings.json` with shape and hash.
    pub fn save_binary(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        serialize::write_tensor(&dir.join("rho.bin"), &self.rho)?;
        let meta = BinaryMeta {
            shape: self.rho.shape().to_vec(),
            vocab_hash: self.vocab_hash.clone(),
        };
        let p = dir.join("embeddings.json");
        fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load_binary(dir: &Path) -> Result<Self> {
        let p = dir.join("embeddings.json");
        let meta: BinaryMeta =
            serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let rho = serialize::read_tensor(&dir.join("rho.bin"), &meta.shape)?;
        EmbeddingMatrix::new(rho, meta.vocab_hash)
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

#[derive(Serialize, Deserialize)]
struct BinaryMeta {
    shape: Vec<usize>,
    vocab_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial learning rate, decayed linearly to `lr * 1e-4`.
    pub lr: f64,
    /// Frequent-word subsampling threshold; 0 disables it.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 300,
            window: 5,
            negatives: 10,
            epochs: 5,
            lr: 0.025,
            subsample: 1e-4,
            seed: 1,
        }
    }
}

pub struct SkipGramModel {
    pub embeddings: EmbeddingMatrix,
    /// Output (context) vectors, `V x L`.
    pub context: Tensor,
    /// Mean negative-sampling loss per epoch.
    pub epoch_loss: Vec<f64>,
}

impl SkipGramModel {
    /// Skip-gram's own score for `context` appearing near `center`.
    pub fn affinity(&self, center: usize, context: usize) -> f64 {
        let l = self.embeddings.dim();
        (0..l)
            .map(|i| self.embeddings.rho.get(i, center) * self.context.get(context, i))
            .sum()
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::numcore::graph::sigmoid(x)
}

/// Skip-gram with negative sampling. The centre-word (input) matrix becomes
/// `rho`. Single-threaded and deterministic under `cfg.seed`.
pub fn train_skipgram(
    docs: &[TimedDocument],
    vocab: &Vocabulary,
    cfg: &SkipGramConfig,
) -> Result<SkipGramModel> {
    let (v, l) = (vocab.len(), cfg.dim);
    if l == 0 || v == 0 || cfg.window == 0 {
        return Err(Error::Config(
            "skip-gram needs dim >= 1, window >= 1 and a non-empty vocabulary".into(),
        ));
    }
    let mut freq = vec![0u64; v];
    for d in docs {
        for &t in &d.tokens {
            freq[t as usize] += 1;
        }
    }
    let total: u64 = freq.iter().sum();
    if docs.iter().all(|d| d.tokens.len() < 2) {
        return Err(Error::Data(
            "corpus has no (center, context) pair: every document has fewer than 2 tokens".into(),
        ));
    }
    let noise = WeightedIndex::new(freq.iter().map(|&f| (f as f64).powf(0.75)))
        .map_err(|e| Error::Data(format!("noise distribution: {e}")))?;
    let keep_prob: Vec<f64> = freq
        .iter()
        .map(|&f| {
            if cfg.subsample <= 0.0 || f == 0 {
                return 1.0;
            }
            let z = f as f64 / total as f64;
            ((z / cfg.subsample).sqrt() + 1.0) * cfg.subsample / z
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = 0.5 / l as f64;
    // input vectors stored V x L for locality, transposed at the end
    let mut input = Tensor::uniform(&[v, l], half, &mut rng);
    let mut output = Tensor::zeros(&[v, l]);
    let total_steps = (cfg.epochs as u64 * total).max(1) as f64;
    let mut processed = 0u64;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut grad_in = vec![0.0; l];

    for _ in 0..cfg.epochs {
        let (mut loss, mut pairs) = (0.0, 0u64);
        for d in docs {
            let sent: Vec<usize> = d
                .tokens
                .iter()
                .map(|&t| t as usize)
                .filter(|&t| keep_prob[t] >= 1.0 || rng.random::<f64>() < keep_prob[t])
                .collect();
            processed += d.tokens.len() as u64;
            let lr = cfg.lr * (1.0 - processed as f64 / total_steps).max(1e-4);
            for (pos, &center) in sent.iter().enumerate() {
                let b = rng.random_range(1..=cfg.window);
                let lo = pos.saturating_sub(b);
                let hi = (pos + b).min(sent.len() - 1);
                for cpos in lo..=hi {
                    if cpos == pos {
                        continue;
                    }
                    let ctx = sent[cpos];
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let targets = std::iter::once((ctx, 1.0))
                        .chain((0..cfg.negatives).map(|_| (noise.sample(&mut rng), 0.0)));
                    for (target, label) in targets {
                        if label == 0.0 && target == ctx {
                            continue;
                        }
                        let vin = input.row_slice(center);
                        let vout = output.row_slice(target);
                        let dot: f64 = vin.iter().zip(vout).map(|(a, b)| a * b).sum();
                        let s = sigmoid(dot);
                        loss -= if label == 1.0 {
                            s.max(1e-300).ln()
                        } else {
                            (1.0 - s).max(1e-300).ln()
                        };
                        let gscale = lr * (label - s);
                        for i in 0..l {
                            grad_in[i] += gscale * vout[i];
                        }
                        let vout = output.row_slice_mut(target);
                        for i in 0..l {
                            vout[i] += gscale * input.get(center, i);
                        }
                    }
                    for (x, g) in input.row_slice_mut(center).iter_mut().zip(&grad_in) {
                        *x += g;
                    }
                    pairs += 1;
                }
            }
        }
        epoch_loss.push(if pairs > 0 { loss / pairs as f64 } else { 0.0 });
    }
    let rho = input.transpose();
    Ok(SkipGramModel {
        embeddings: EmbeddingMatrix::new(rho, vocab.hash())?,
        context: output,
        epoch_loss,
    })
}

/// Writes `V L` then `term x_1 ... x_L` per line. Values use the shortest
/// decimal form that parses back to the same `f64`.
pub fn save_word2vec(path: &Path, emb: &EmbeddingMatrix, vocab: &Vocabulary) -> Result<()> {
    emb.check_vocab(vocab)?;
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", vocab.len(), emb.dim()));
    for (v, term) in vocab.terms().iter().enumerate() {
        out.push_str(term);
        for l in 0..emb.dim() {
            out.push(' ');
            out.push_str(&emb.rho.get(l, v).to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads word2vec text vectors aligned to `vocab`. Terms absent from the file
/// get `N(0, 0.1^2)` columns drawn from `seed`. Returns the matrix and the
/// number of such out-of-file terms.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(EmbeddingMatrix, usize)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let file_dim: usize = header
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data(format!("{}: bad header {header:?}", path.display())))?;
    if file_dim != dim {
        return Err(Error::Data(format!(
            "{}: vectors have dimension {file_dim}, requested {dim}",
            path.display()
        )));
    }
    let mut rho = Tensor::zeros(&[dim, vocab.len()]);
    let mut found = vec![false; vocab.len()];
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(term) = parts.next() else { continue };
        let Some(v) = vocab.id(term) else { continue };
        let vals: Vec<f64> = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 2)))?;
        if vals.len() != dim {
            return Err(Error::Data(format!(
                "{}:{}: {} values, expected {dim}",
                path.display(),
                i + 2,
                vals.len()
            )));
        }
        for (l, x) in vals.into_iter().enumerate() {
            rho.set(l, v, x);
        }
        found[v] = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut oov = 0;
    for (v, _) in found.iter().enumerate().filter(|(_, f)| !**f) {
        oov += 1;
        for l in 0..dim {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            rho.set(l, v, 0.1 * z);
        }
    }
    if oov > 0 {
        log::info!("{oov} vocabulary terms missing from {}; initialized randomly", path.display());
    }
    Ok((EmbeddingMatrix::new(rho, vocab.hash())?, oov))
}
