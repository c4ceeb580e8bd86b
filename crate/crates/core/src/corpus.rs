//! Time-stamped corpora: tokenization, vocabulary filtering, time binning,
//! train/validation/test splits and the on-disk corpus bundle.
//!
//! Bundle layout (all little-endian):
//!
//! * `vocab.txt` one term per line, line number (from 0) is the term id.
//! * `docs.bin` `u32` triples `(doc, term, count)`, documents numbered
//!   train, then validation, then test; terms ascending within a document.
//! * `tokens.bin` per document in the same order: `u32` length followed by
//!   that many `u32` term ids in token order.
//! * `splits.json` document numbers of each split plus source ids.
//! * `bins.json` number of bins, bin labels and each document's bin.
//! * `summary.json` the dataset-statistics row and per-term document
//!   frequencies.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numcore::Tensor;
use crate::{Error, Result};

/// Bundled English stop-word list.
pub const ENGLISH_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

pub fn default_stopwords() -> HashSet<String> {
    parse_stopwords(ENGLISH_STOPWORDS)
}

/// One word per line; `#` starts a comment line.
pub fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizationConfig {
    pub lowercase: bool,
    /// Tokens shorter than this (in characters) are dropped.
    pub min_token_len: usize,
}

impl Default for TokenizationConfig {
    fn default() -> Self {
        TokenizationConfig {
            lowercase: true,
            min_token_len: 2,
        }
    }
}

/// Splits on every non-alphabetic character, so digits and punctuation never
/// survive.
pub fn tokenize(text: &str, rules: &TokenizationConfig) -> Vec<String> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|t| t.chars().count() >= rules.min_token_len.max(1))
        .map(|t| {
            if rules.lowercase {
                t.to_lowercase()
            } else {
                t.to_string()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    id_of: HashMap<String, usize>,
    doc_freq: Vec<usize>,
    num_docs: usize,
}

impl Vocabulary {
    /// Vocabulary from an ordered term list; document frequencies unknown.
    pub fn from_terms(terms: Vec<String>) -> Result<Self> {
        let n = terms.len();
        Self::with_stats(terms, vec![0; n], 0)
    }

    fn with_stats(terms: Vec<String>, doc_freq: Vec<usize>, num_docs: usize) -> Result<Self> {
        let mut id_of = HashMap::with_capacity(terms.len());
        for (i, t) in terms.iter().enumerate() {
            if id_of.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary term {t:?}")));
            }
        }
        Ok(Vocabulary {
            terms,
            id_of,
            doc_freq,
            num_docs,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term(&self, id: usize) -> &str {
        &self.terms[id]
    }

    pub fn id(&self, term: &str) -> Option<usize> {
        self.id_of.get(term).copied()
    }

    pub fn doc_freq(&self) -> &[usize] {
        &self.doc_freq
    }

    /// Number of documents the frequencies were counted over.
    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    /// SHA-256 of the newline-joined term list, as hex. Binds embeddings and
    /// checkpoints to a vocabulary.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.terms {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Term ids of in-vocabulary tokens; the rest are dropped.
    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens
            .iter()
            .filter_map(|t| self.id(t).map(|i| i as u32))
            .collect()
    }
}

/// Counts behind an empty-vocabulary error.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VocabularyDiagnostics {
    pub num_docs: usize,
    pub candidates: usize,
    pub stopwords: usize,
    pub below_min_df: usize,
    pub above_max_df: usize,
}

/// Keeps terms with `min_df <= df` and `df / D <= max_df_fraction` that are
/// not stop words. Frequencies are counted over the raw token sequences.
/// Terms are ordered by descending document frequency, ties broken
/// lexicographically.
pub fn build_vocabulary(
    docs: &[Vec<String>],
    min_df: usize,
    max_df_fraction: f64,
    stopwords: &HashSet<String>,
) -> Result<Vocabulary> {
    if min_df < 1 {
        return Err(Error::Config("min_df must be at least 1".into()));
    }
    if !(max_df_fraction > 0.0 && max_df_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "max_df_fraction must be in (0, 1], got {max_df_fraction}"
        )));
    }
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        let unique: BTreeSet<&str> = doc.iter().map(String::as_str).collect();
        for t in unique {
            *df.entry(t).or_default() += 1;
        }
    }
    let d = docs.len() as f64;
    let mut diag = VocabularyDiagnostics {
        num_docs: docs.len(),
        candidates: df.len(),
        ..Default::default()
    };
    let mut kept: Vec<(&str, usize)> = Vec::new();
    for (&t, &n) in &df {
        if stopwords.contains(t) {
            diag.stopwords += 1;
        } else if n < min_df {
            diag.below_min_df += 1;
        } else if n as f64 / d > max_df_fraction {
            diag.above_max_df += 1;
        } else {
            kept.push((t, n));
        }
    }
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "empty vocabulary: {} documents, {} candidate terms, {} stop words, \
             {} below min_df={min_df}, {} above max_df={max_df_fraction}",
            diag.num_docs, diag.candidates, diag.stopwords, diag.below_min_df, diag.above_max_df
        )));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let (terms, freqs) = kept.into_iter().map(|(t, n)| (t.to_string(), n)).unzip();
    Vocabulary::with_stats(terms, freqs, docs.len())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimedDocument {
    pub tokens: Vec<u32>,
    /// `(term, count)` sorted by term.
    pub counts: Vec<(u32, u32)>,
    pub time_bin: usize,
    pub source_id: String,
}

impl TimedDocument {
    pub fn new(tokens: Vec<u32>, time_bin: usize, source_id: impl Into<String>) -> Self {
        let counts = count_terms(&tokens);
        TimedDocument {
            tokens,
            counts,
            time_bin,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Dense `counts / len` of length `vocab_size`.
    pub fn normalized_bow(&self, vocab_size: usize) -> Vec<f64> {
        normalized_bow(&self.counts, vocab_size)
    }
}

pub fn count_terms(tokens: &[u32]) -> Vec<(u32, u32)> {
    let mut m: BTreeMap<u32, u32> = BTreeMap::new();
    for &t in tokens {
        *m.entry(t).or_default() += 1;
    }
    m.into_iter().collect()
}

pub fn normalized_bow(counts: &[(u32, u32)], vocab_size: usize) -> Vec<f64> {
    let total: u32 = counts.iter().map(|c| c.1).sum();
    let mut v = vec![0.0; vocab_size];
    if total > 0 {
        for &(t, c) in counts {
            v[t as usize] = c as f64 / total as f64;
        }
    }
    v
}

/// A document before time binning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StampedDocument {
    pub tokens: Vec<u32>,
    pub year: i64,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<TimedDocument>,
    pub validation: Vec<TimedDocument>,
    pub test: Vec<TimedDocument>,
    pub num_times: usize,
    pub bin_labels: Vec<String>,
}

impl CorpusSplit {
    pub fn all_docs(&self) -> impl Iterator<Item = &TimedDocument> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn summary(&self, vocab: &Vocabulary) -> DatasetSummary {
        DatasetSummary {
            train_docs: self.train.len(),
            validation_docs: self.validation.len(),
            test_docs: self.test.len(),
            timestamps: self.num_times,
            vocabulary: vocab.len(),
        }
    }
}

/// One row of the dataset-statistics table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train_docs: usize,
    pub validation_docs: usize,
    pub test_docs: usize,
    pub timestamps: usize,
    pub vocabulary: usize,
}

impl DatasetSummary {
    pub fn header() -> &'static str {
        "# Docs Train\t# Docs Val\t# Docs Test\t# Timestamps\tVocabulary"
    }

    pub fn row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.train_docs, self.validation_docs, self.test_docs, self.timestamps, self.vocabulary
        )
    }
}

/// Dense bins over the distinct values of `(year - min_year) / width`.
/// Returns each document's bin and the bin labels.
pub fn bin_years(years: &[i64], width: i64) -> Result<(Vec<usize>, Vec<String>)> {
    if width < 1 {
        return Err(Error::Config(format!("bin width must be >= 1, got {width}")));
    }
    let Some(&min) = years.iter().min() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let raw: Vec<i64> = years.iter().map(|y| (y - min).div_euclid(width)).collect();
    let distinct: BTreeSet<i64> = raw.iter().copied().collect();
    let index: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let labels = distinct
        .iter()
        .map(|&r| {
            let start = min + r * width;
            if width == 1 {
                start.to_string()
            } else {
                format!("{start}-{}", start + width - 1)
            }
        })
        .collect();
    Ok((raw.iter().map(|r| index[r]).collect(), labels))
}

/// Seeded shuffle, split by `ratios`, then bin by year. One-token documents
/// are dropped from validation and test. Every bin must occur in training.
pub fn split_and_bin(
    docs: Vec<StampedDocument>,
    ratios: [f64; 3],
    seed: u64,
    bin_width: i64,
) -> Result<CorpusSplit> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let years: Vec<i64> = docs.iter().map(|d| d.year).collect();
    let (bins, labels) = bin_years(&years, bin_width)?;
    let n = docs.len();
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = order[..n_train].to_vec();
    let mut val_idx = order[n_train..n_train + n_val].to_vec();
    let mut test_idx = order[n_train + n_val..].to_vec();
    for idx in [&mut train_idx, &mut val_idx, &mut test_idx] {
        idx.sort_unstable();
    }

    let mut slots: Vec<Option<StampedDocument>> = docs.into_iter().map(Some).collect();
    let mut take = |idx: &[usize], min_len: usize| -> (Vec<TimedDocument>, usize) {
        let mut out = Vec::with_capacity(idx.len());
        let mut dropped = 0;
        for &i in idx {
            let d = slots[i].take().expect("each document used once");
            if d.tokens.len() < min_len {
                dropped += 1;
                continue;
            }
            out.push(TimedDocument::new(d.tokens, bins[i], d.source_id));
        }
        (out, dropped)
    };
    let (train, _) = take(&train_idx, 1);
    let (validation, dv) = take(&val_idx, 2);
    let (test, dt) = take(&test_idx, 2);
    if dv + dt > 0 {
        log::info!("dropped {dv} validation and {dt} test documents with fewer than 2 tokens");
    }

    let mut seen = vec![false; labels.len()];
    for d in &train {
        seen[d.time_bin] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!(
            "time bin {missing} ({}) has no training documents",
            labels[missing]
        )));
    }
    Ok(CorpusSplit {
        train,
        validation,
        test,
        num_times: labels.len(),
        bin_labels: labels,
    })
}

/// Per-time mean of normalized bag-of-words vectors over training documents.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeAggregatedBow {
    /// `T x V`.
    pub rows: Tensor,
    pub docs_per_bin: Vec<usize>,
}

pub fn aggregate_by_time(split: &CorpusSplit, vocab: &Vocabulary) -> TimeAggregatedBow {
    let (t, v) = (split.num_times, vocab.len());
    let mut rows = Tensor::zeros(&[t, v]);
    let mut docs_per_bin = vec![0usize; t];
    for d in &split.train {
        let total = d.len() as f64;
        if total == 0.0 {
            continue;
        }
        docs_per_bin[d.time_bin] += 1;
        let row = rows.row_slice_mut(d.time_bin);
        for &(term, c) in &d.counts {
            row[term as usize] += c as f64 / total;
        }
    }
    for (b, &n) in docs_per_bin.iter().enumerate() {
        if n > 0 {
            for x in rows.row_slice_mut(b) {
                *x /= n as f64;
            }
        }
    }
    TimeAggregatedBow { rows, docs_per_bin }
}

/// Raw input document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDocument {
    pub text: String,
    pub year: i64,
    pub source_id: String,
}

/// First run of digits in a timestamp string, read as a year.
pub fn parse_year(s: &str) -> Option<i64> {
    let start = s.find(|c: char| c.is_ascii_digit())?;
    let digits: String = s[start..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

#[derive(Deserialize)]
struct JsonRecord {
    text: String,
    timestamp: serde_json::Value,
}

/// JSON lines: `{"text": ..., "timestamp": "1970" | 1970 | "1970-05-01"}`.
/// Source ids are `line:<n>` (1-based).
pub fn load_jsonl(path: &Path) -> Result<Vec<RawDocument>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        let year = match &rec.timestamp {
            serde_json::Value::Number(n) => n.as_i64(),
            serde_json::Value::String(s) => parse_year(s),
            _ => None,
        }
        .ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: unmappable timestamp {}",
                path.display(),
                i + 1,
                rec.timestamp
            ))
        })?;
        docs.push(RawDocument {
            text: rec.text,
            year,
            source_id: format!("line:{}", i + 1),
        });
    }
    Ok(docs)
}

/// One document per regular file, timestamp from the file-name prefix
/// (`1970_speech.txt`). Files are read in name order.
pub fn load_text_dir(dir: &Path) -> Result<Vec<RawDocument>> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let year = parse_year(&name)
                .filter(|_| name.starts_with(|c: char| c.is_ascii_digit()))
                .ok_or_else(|| Error::Data(format!("{name}: no year prefix in file name")))?;
            let path = dir.join(&name);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(RawDocument {
                text,
                year,
                source_id: name,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub tokenization: TokenizationConfig,
    pub min_df: usize,
    pub max_df: f64,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub bin_width: i64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            tokenization: TokenizationConfig::default(),
            min_df: 1,
            max_df: 0.7,
            ratios: [0.85, 0.05, 0.10],
            seed: 1,
            bin_width: 1,
        }
    }
}

/// Raw documents to a vocabulary and split. Out-of-vocabulary tokens are
/// dropped; documents left empty are dropped from every split.
pub fn preprocess(
    raw: &[RawDocument],
    cfg: &PreprocessConfig,
    stopwords: &HashSet<String>,
) -> Result<CorpusBundle> {
    let tokenized: Vec<Vec<String>> = raw
        .iter()
        .map(|d| tokenize(&d.text, &cfg.tokenization))
        .collect();
    let vocab = build_vocabulary(&tokenized, cfg.min_df, cfg.max_df, stopwords)?;
    let mut empty = 0;
    let stamped: Vec<StampedDocument> = raw
        .iter()
        .zip(&tokenized)
        .filter_map(|(d, toks)| {
            let ids = vocab.encode(toks);
            if ids.is_empty() {
                empty += 1;
                return None;
            }
            Some(StampedDocument {
                tokens: ids,
                year: d.year,
                source_id: d.source_id.clone(),
            })
        })
        .collect();
    if empty > 0 {
        log::info!("dropped {empty} documents with no in-vocabulary tokens");
    }
    let split = split_and_bin(stamped, cfg.ratios, cfg.seed, cfg.bin_width)?;
    Ok(CorpusBundle { vocab, split })
}

/// A vocabulary together with the split documents that use it.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusBundle {
    pub vocab: Vocabulary,
    pub split: CorpusSplit,
}

#[derive(Serialize, Deserialize)]
struct SplitsFile {
    train: Vec<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
    source_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct BinsFile {
    num_bins: usize,
    labels: Vec<String>,
    doc_time_bins: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SummaryFile {
    summary: DatasetSummary,
    vocab_hash: String,
    num_docs_counted: usize,
    doc_freq: Vec<usize>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn le_u32s(bytes: &[u8], path: &Path) -> Result<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!("{}: truncated u32 stream", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

impl CorpusBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut vocab_txt = String::new();
        for t in self.vocab.terms() {
            vocab_txt.push_str(t);
            vocab_txt.push('\n');
        }
        let p = dir.join("vocab.txt");
        fs::write(&p, vocab_txt).map_err(|e| Error::io(&p, e))?;

        let docs: Vec<&TimedDocument> = self.split.all_docs().collect();
        let mut triples = Vec::new();
        let mut tokens = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            for &(term, c) in &d.counts {
                for x in [i as u32, term, c] {
                    triples.extend_from_slice(&x.to_le_bytes());
                }
            }
            tokens.extend_from_slice(&(d.tokens.len() as u32).to_le_bytes());
            for &t in &d.tokens {
                tokens.extend_from_slice(&t.to_le_bytes());
            }
        }
        let p = dir.join("docs.bin");
        fs::write(&p, triples).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("tokens.bin");
        fs::write(&p, tokens).map_err(|e| Error::io(&p, e))?;

        let (nt, nv) = (self.split.train.len(), self.split.validation.len());
        write_json(
            &dir.join("splits.json"),
            &SplitsFile {
                train: (0..nt).collect(),
                validation: (nt..nt + nv).collect(),
                test: (nt + nv..docs.len()).collect(),
                source_ids: docs.iter().map(|d| d.source_id.clone()).collect(),
            },
        )?;
        write_json(
            &dir.join("bins.json"),
            &BinsFile {
                num_bins: self.split.num_times,
                labels: self.split.bin_labels.clone(),
                doc_time_bins: docs.iter().map(|d| d.time_bin).collect(),
            },
        )?;
        write_json(
            &dir.join("summary.json"),
            &SummaryFile {
                summary: self.split.summary(&self.vocab),
                vocab_hash: self.vocab.hash(),
                num_docs_counted: self.vocab.num_docs(),
                doc_freq: self.vocab.doc_freq().to_vec(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("vocab.txt");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let terms: Vec<String> = text.lines().map(str::to_string).collect();
        let summary: Option<SummaryFile> = {
            let sp = dir.join("summary.json");
            if sp.exists() {
                Some(read_json(&sp)?)
            } else {
                None
            }
        };
        let vocab = match &summary {
            Some(s) if s.doc_freq.len() == terms.len() => {
                Vocabulary::with_stats(terms, s.doc_freq.clone(), s.num_docs_counted)?
            }
            _ => Vocabulary::from_terms(terms)?,
        };
        let splits: SplitsFile = read_json(&dir.join("splits.json"))?;
        let bins: BinsFile = read_json(&dir.join("bins.json"))?;
        let n = bins.doc_time_bins.len();
        if splits.source_ids.len() != n {
            return Err(Error::Data("splits.json and bins.json disagree on document count".into()));
        }

        let p = dir.join("tokens.bin");
        let raw = le_u32s(&fs::read(&p).map_err(|e| Error::io(&p, e))?, &p)?;
        let mut docs_tokens = Vec::with_capacity(n);
        let mut pos = 0;
        while pos < raw.len() {
            let len = raw[pos] as usize;
            let end = pos + 1 + len;
            if end > raw.len() {
                return Err(Error::Data(format!("{}: truncated document", p.display())));
            }
            docs_tokens.push(raw[pos + 1..end].to_vec());
            pos = end;
        }
        if docs_tokens.len() != n {
            return Err(Error::Data(format!(
                "{}: {} documents, expected {n}",
                p.display(),
                docs_tokens.len()
            )));
        }

        let p = dir.join("docs.bin");
        let triples = le_u32s(&fs::read(&p).map_err(|e| Error::io(&p, e))?, &p)?;
        if triples.len() % 3 != 0 {
            return Err(Error::Data(format!("{}: not a sequence of triples", p.display())));
        }
        let mut counts: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
        for c in triples.chunks_exact(3) {
            let d = c[0] as usize;
            if d >= n || c[1] as usize >= vocab.len() {
                return Err(Error::Data(format!("{}: triple out of range", p.display())));
            }
            counts[d].push((c[1], c[2]));
        }

        let mut all: Vec<Option<TimedDocument>> = Vec::with_capacity(n);
        for (i, toks) in docs_tokens.into_iter().enumerate() {
            if toks.iter().any(|&t| t as usize >= vocab.len()) {
                return Err(Error::Data(format!("document {i}: term id out of range")));
            }
            if bins.doc_time_bins[i] >= bins.num_bins {
                return Err(Error::Data(format!("document {i}: time bin out of range")));
            }
            let d = TimedDocument::new(toks, bins.doc_time_bins[i], splits.source_ids[i].clone());
            if d.counts != counts[i] {
                return Err(Error::Data(format!(
                    "document {i}: docs.bin counts disagree with tokens.bin"
                )));
            }
            all.push(Some(d));
        }
        let mut pick = |idx: &[usize]| -> Result<Vec<TimedDocument>> {
            idx.iter()
                .map(|&i| {
                    all.get_mut(i)
                        .and_then(Option::take)
                        .ok_or_else(|| Error::Data(format!("document {i} listed twice or missing")))
                })
                .collect()
        };
        let split = CorpusSplit {
            train: pick(&splits.train)?,
            validation: pick(&splits.validation)?,
            test: pick(&splits.test)?,
            num_times: bins.num_bins,
            bin_labels: bins.labels,
        };
        Ok(CorpusBundle { vocab, split })
    }
}
