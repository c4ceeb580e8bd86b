//! The `detm` command line: `preprocess`, `embed`, `train`, `eval`, `export`
//! and `synth`.
//!
//! Settings come from an optional TOML file with one section per stage
//! (`[preprocess]`, `[embed]`, `[detm]`, `[dlda_rep]`, `[synth]`, `[eval]`);
//! flags override file values. Every output directory receives the resolved
//! configuration as `config.toml` plus `run.json` with the tool version and
//! subcommand.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{
    aggregate_by_time, default_stopwords, load_jsonl, load_text_dir, parse_stopwords, preprocess,
    CorpusBundle, DatasetSummary, PreprocessConfig,
};
use crate::detm::{random_embeddings, sample_corpus, Detm, DetmHyperparams, SynthConfig, TopicMatrix};
use crate::dlda_rep::{self, DldaHyperparams, DldaRep};
use crate::embeddings::{load_embeddings, save_word2vec, train_skipgram, EmbeddingMatrix, SkipGramConfig};
use crate::eval::{metric_report_with, top_terms, MetricConfig, ThetaQuery, TopicModel};
use crate::training::{EpochLog, Trainable, Trainer};
use crate::{detm, Error, Result, VERSION};

#[derive(Parser, Debug)]
#[command(name = "detm", version, about = "Dynamic embedded topic model pipeline")]
pub struct Cli {
    /// TOML file with [preprocess], [embed], [detm], [dlda_rep], [synth], [eval] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads. Computation is single-threaded; values above 1 are
    /// accepted and ignored so runs stay deterministic.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Raw documents (JSON lines file or directory of year-prefixed files) to a corpus bundle.
    Preprocess(PreprocessArgs),
    /// Skip-gram embeddings on the training split, or import of word2vec vectors.
    Embed(EmbedArgs),
    /// Fit a model and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Perplexity, coherence, diversity and quality of a checkpoint.
    Eval(EvalArgs),
    /// Topic trajectories or word-probability curves as CSV.
    Export(ExportArgs),
    /// Sample a corpus from the generative process.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub min_df: Option<usize>,
    #[arg(long)]
    pub max_df: Option<f64>,
    /// Stop-word file (one word per line); defaults to the bundled English list.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    /// Train, validation and test fractions, e.g. `0.85,0.05,0.1`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub bin_width: Option<i64>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// word2vec text file to import instead of training.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Detm,
    DldaRep,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "detm")]
    pub model: ModelKind,
    /// Embedding directory written by `embed` (required for `detm`).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train `rho` jointly with the topic model.
    #[arg(long)]
    pub finetune_rho: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    Topics,
    WordCurves,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum)]
    pub what: ExportKind,
    /// Terms for word curves, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub terms: Vec<String>,
    /// Topic ids to include (default: all).
    #[arg(long, value_delimiter = ',')]
    pub topics: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub docs: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub times: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub tokens: Option<usize>,
}

/// Every stage's settings; the on-disk config file has this shape.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub preprocess: PreprocessConfig,
    pub embed: SkipGramConfig,
    pub detm: DetmHyperparams,
    pub dlda_rep: DldaHyperparams,
    pub synth: SynthConfig,
    pub eval: MetricConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn set_seed(&mut self, seed: u64) {
        self.preprocess.seed = seed;
        self.embed.seed = seed;
        self.detm.seed = seed;
        self.dlda_rep.seed = seed;
        self.synth.seed = seed;
    }
}

#[derive(Serialize)]
struct RunInfo<'a> {
    version: &'a str,
    command: &'a str,
    args: Vec<String>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_run_files(dir: &Path, cfg: &FileConfig, command: &str, args: &[String]) -> Result<()> {
    let toml = toml::to_string(cfg).map_err(|e| Error::Config(format!("serializing config: {e}")))?;
    write_file(&dir.join("config.toml"), toml)?;
    let info = RunInfo {
        version: VERSION,
        command,
        args: args.to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&info)?;
    s.push('\n');
    write_file(&dir.join("run.json"), s)
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let shown: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match run(&cli, &shown) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, args: &[String]) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    if cli.threads > 1 {
        log::warn!("--threads {} ignored: computation is single-threaded", cli.threads);
    }
    let out = &cli.out;
    let name = match &cli.command {
        Command::Preprocess(a) => {
            cmd_preprocess(a, &mut cfg, out)?;
            "preprocess"
        }
        Command::Embed(a) => {
            cmd_embed(a, &mut cfg, out)?;
            "embed"
        }
        Command::Train(a) => {
            cmd_train(a, &mut cfg, out)?;
            "train"
        }
        Command::Eval(a) => {
            cmd_eval(a, &cfg, out)?;
            "eval"
        }
        Command::Export(a) => {
            cmd_export(a, out)?;
            "export"
        }
        Command::Synth(a) => {
            cmd_synth(a, &mut cfg, out)?;
            "synth"
        }
    };
    write_run_files(out, &cfg, name, args)
}

pub fn cmd_preprocess(a: &PreprocessArgs, cfg: &mut FileConfig, out: &Path) -> Result<()> {
    let p = &mut cfg.preprocess;
    if let Some(x) = a.min_df {
        p.min_df = x;
    }
    if let Some(x) = a.max_df {
        p.max_df = x;
    }
    if let Some(r) = &a.ratios {
        p.ratios = [r[0], r[1], r[2]];
    }
    if let Some(w) = a.bin_width {
        p.bin_width = w;
    }
    let stopwords = match &a.stopwords {
        Some(path) => parse_stopwords(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?),
        None => default_stopwords(),
    };
    let raw = if a.input.is_dir() {
        load_text_dir(&a.input)?
    } else {
        load_jsonl(&a.input)?
    };
    let bundle = preprocess(&raw, p, &stopwords)?;
    bundle.save(out)?;
    let s = bundle.split.summary(&bundle.vocab);
    println!("{}\n{}", DatasetSummary::header(), s.row());
    Ok(())
}

pub fn cmd_embed(a: &EmbedArgs, cfg: &mut FileConfig, out: &Path) -> Result<()> {
    let e = &mut cfg.embed;
    if let Some(x) = a.dim {
        e.dim = x;
    }
    if let Some(x) = a.window {
        e.window = x;
    }
    if let Some(x) = a.negatives {
        e.negatives = x;
    }
    if let Some(x) = a.epochs {
        e.epochs = x;
    }
    let bundle = CorpusBundle::load(&a.corpus)?;
    let emb = match &a.pretrained {
        Some(path) => {
            let (m, oov) = load_embeddings(path, &bundle.vocab, e.dim, e.seed)?;
            log::info!("{oov} vocabulary terms missing from {}", path.display());
            m
        }
        None => {
            let model = train_skipgram(&bundle.split.train, &bundle.vocab, e)?;
            let mut log = String::from("epoch,loss\n");
            for (i, l) in model.epoch_loss.iter().enumerate() {
                log.push_str(&format!("{i},{l}\n"));
            }
            write_file(&out.join("skipgram_log.csv"), log)?;
            model.embeddings
        }
    };
    emb.save_binary(out)?;
    save_word2vec(&out.join("vectors.txt"), &emb, &bundle.vocab)
}

/// A checkpoint of either model type.
pub enum LoadedModel {
    Detm(Detm),
    DldaRep(DldaRep),
}

impl LoadedModel {
    pub fn load(dir: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load(dir)?;
        let m = match ckpt.manifest.model_type.as_str() {
            detm::MODEL_TYPE => LoadedModel::Detm(Detm::from_checkpoint(&ckpt)?),
            dlda_rep::MODEL_TYPE => LoadedModel::DldaRep(DldaRep::from_checkpoint(&ckpt)?),
            other => return Err(Error::Data(format!("unknown model type {other:?}"))),
        };
        Ok((m, ckpt))
    }

    pub fn as_topic_model(&self) -> &dyn TopicModel {
        match self {
            LoadedModel::Detm(m) => m,
            LoadedModel::DldaRep(m) => m,
        }
    }
}

impl TopicModel for LoadedModel {
    fn num_topics(&self) -> usize {
        self.as_topic_model().num_topics()
    }
    fn num_times(&self) -> usize {
        self.as_topic_model().num_times()
    }
    fn vocab_size(&self) -> usize {
        self.as_topic_model().vocab_size()
    }
    fn topic_matrix(&self) -> Result<TopicMatrix> {
        self.as_topic_model().topic_matrix()
    }
    fn infer_thetas(&self, q: &[ThetaQuery]) -> Result<Vec<Vec<f64>>> {
        self.as_topic_model().infer_thetas(q)
    }
}

fn load_rho(path: &Path, bundle: &CorpusBundle) -> Result<EmbeddingMatrix> {
    let emb = if path.is_dir() {
        EmbeddingMatrix::load_binary(path)?
    } else {
        let dim = fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .lines()
            .next()
            .and_then(|h| h.split_whitespace().nth(1)?.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: bad word2vec header", path.display())))?;
        load_embeddings(path, &bundle.vocab, dim, 0)?.0
    };
    emb.check_vocab(&bundle.vocab)?;
    Ok(emb)
}

fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    if fresh {
        s.push_str(EpochLog::csv_header());
        s.push('\n');
    }
    s.push_str(&entry.csv_row());
    s.push('\n');
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

fn fit<M: Trainable>(mut trainer: Trainer<M>, bundle: &CorpusBundle, out: &Path) -> Result<()> {
    let ckpt_dir = out.join("checkpoint");
    let log_path = out.join("train_log.csv");
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if trainer.progress.epochs_done == 0 && log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    trainer.checkpoint(BTreeMap::new())?.save(&ckpt_dir)?;
    trainer.run(&bundle.split, |t, entry| {
        append_log(&log_path, entry)?;
        let mut metrics = BTreeMap::from([
            ("elbo".to_string(), entry.elbo),
            ("rec_loglik".to_string(), entry.rec_loglik),
        ]);
        if let Some(v) = entry.val_score {
            metrics.insert("val_score".into(), v);
        }
        t.checkpoint(metrics)?.save(&ckpt_dir)
    })?;
    log::info!(
        "trained {} epochs{}",
        trainer.progress.epochs_done,
        if trainer.progress.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, cfg: &mut FileConfig, out: &Path) -> Result<()> {
    let bundle = CorpusBundle::load(&a.corpus)?;
    let hash = bundle.vocab.hash();
    if let Some(dir) = &a.resume {
        let (model, ckpt) = LoadedModel::load(dir)?;
        if ckpt.manifest.vocab_hash != hash {
            return Err(Error::Data("checkpoint vocabulary does not match the corpus".into()));
        }
        return match model {
            LoadedModel::Detm(mut m) => {
                if let Some(e) = a.epochs {
                    m.hyper.epochs = e;
                }
                cfg.detm = m.hyper.clone();
                let opt = m.optimizer();
                fit(Trainer::resume(m, opt, &ckpt)?, &bundle, out)
            }
            LoadedModel::DldaRep(mut m) => {
                if let Some(e) = a.epochs {
                    m.hyper.epochs = e;
                }
                cfg.dlda_rep = m.hyper.clone();
                let opt = m.optimizer();
                fit(Trainer::resume(m, opt, &ckpt)?, &bundle, out)
            }
        };
    }
    match a.model {
        ModelKind::Detm => {
            let h = &mut cfg.detm;
            if let Some(x) = a.epochs {
                h.epochs = x;
            }
            if let Some(x) = a.topics {
                h.num_topics = x;
            }
            if let Some(x) = a.batch_size {
                h.batch_size = x;
            }
            h.finetune_rho |= a.finetune_rho;
            h.validate()?;
            let path = a
                .embeddings
                .as_ref()
                .ok_or_else(|| Error::Config("--embeddings is required for detm".into()))?;
            let rho = load_rho(path, &bundle)?;
            let w = aggregate_by_time(&bundle.split, &bundle.vocab);
            let m = Detm::new(h.clone(), &rho, &w)?;
            let opt = m.optimizer();
            fit(Trainer::new(m, opt), &bundle, out)
        }
        ModelKind::DldaRep => {
            let h = &mut cfg.dlda_rep;
            if let Some(x) = a.epochs {
                h.epochs = x;
            }
            if let Some(x) = a.topics {
                h.num_topics = x;
            }
            if let Some(x) = a.batch_size {
                h.batch_size = x;
            }
            h.validate()?;
            let m = DldaRep::new(h.clone(), &bundle.vocab, bundle.split.num_times)?;
            let opt = m.optimizer();
            fit(Trainer::new(m, opt), &bundle, out)
        }
    }
}

fn load_checked(checkpoint: &Path, corpus: &Path) -> Result<(LoadedModel, CorpusBundle)> {
    let bundle = CorpusBundle::load(corpus)?;
    let (model, ckpt) = LoadedModel::load(checkpoint)?;
    if ckpt.manifest.vocab_hash != bundle.vocab.hash() {
        return Err(Error::Data("checkpoint vocabulary does not match the corpus".into()));
    }
    if ckpt.manifest.num_times != bundle.split.num_times {
        return Err(Error::Data("checkpoint and corpus disagree on the number of time steps".into()));
    }
    Ok((model, bundle))
}

pub fn cmd_eval(a: &EvalArgs, cfg: &FileConfig, out: &Path) -> Result<()> {
    let (model, bundle) = load_checked(&a.checkpoint, &a.corpus)?;
    let report = metric_report_with(&model, &bundle.split, &cfg.eval)?;
    report.write(out)?;
    println!("{}\n{}", crate::eval::MetricReport::csv_header(), report.csv_row());
    Ok(())
}

pub fn cmd_export(a: &ExportArgs, out: &Path) -> Result<()> {
    let (model, bundle) = load_checked(&a.checkpoint, &a.corpus)?;
    let beta = model.topic_matrix()?;
    let (k, t) = (beta.num_topics(), beta.num_times());
    let topics: Vec<usize> = if a.topics.is_empty() {
        (0..k).collect()
    } else {
        a.topics.clone()
    };
    if let Some(bad) = topics.iter().find(|&&x| x >= k) {
        return Err(Error::Config(format!("topic {bad} out of range (K={k})")));
    }
    let vocab = &bundle.vocab;
    match a.what {
        ExportKind::Topics => {
            if a.top_n == 0 || a.top_n > beta.vocab_size() {
                return Err(Error::Config(format!("--top-n must be in [1, {}]", beta.vocab_size())));
            }
            let mut s = String::from("t,k,rank,term,prob\n");
            for tt in 0..t {
                for &kk in &topics {
                    for (rank, v) in top_terms(beta.row(kk, tt), a.top_n).into_iter().enumerate() {
                        s.push_str(&format!(
                            "{tt},{kk},{},{},{}\n",
                            rank + 1,
                            vocab.term(v),
                            beta.get(kk, tt, v)
                        ));
                    }
                }
            }
            write_file(&out.join("topics.csv"), s)
        }
        ExportKind::WordCurves => {
            let (known, skipped): (Vec<&String>, Vec<&String>) =
                a.terms.iter().partition(|w| vocab.id(w).is_some());
            let mut s = String::from("t,k,term,prob\n");
            for w in &known {
                let v = vocab.id(w).expect("partitioned on presence");
                for &kk in &topics {
                    for tt in 0..t {
                        s.push_str(&format!("{tt},{kk},{w},{}\n", beta.get(kk, tt, v)));
                    }
                }
            }
            write_file(&out.join("word_curves.csv"), s)?;
            let mut sk = String::new();
            for w in &skipped {
                sk.push_str(w);
                sk.push('\n');
            }
            write_file(&out.join("skipped_terms.txt"), sk)?;
            if !skipped.is_empty() {
                log::warn!("skipped terms not in the vocabulary: {skipped:?}");
            }
            if known.is_empty() {
                return Err(Error::Data("none of the requested terms is in the vocabulary".into()));
            }
            Ok(())
        }
    }
}

pub fn cmd_synth(a: &SynthArgs, cfg: &mut FileConfig, out: &Path) -> Result<()> {
    let s = &mut cfg.synth;
    if let Some(x) = a.docs {
        s.num_docs = x;
    }
    if let Some(x) = a.topics {
        s.num_topics = x;
    }
    if let Some(x) = a.times {
        s.num_times = x;
    }
    if let Some(x) = a.vocab {
        s.vocab_size = x;
    }
    if let Some(x) = a.dim {
        s.embedding_dim = x;
    }
    if let Some(x) = a.tokens {
        s.tokens_per_doc = x;
    }
    let rho = random_embeddings(s.embedding_dim, s.vocab_size, s.seed);
    let synth = sample_corpus(s, &rho)?;
    synth.bundle.save(&out.join("corpus"))?;
    synth.rho.save_binary(&out.join("embeddings"))?;
    synth.truth.save(&out.join("truth"))?;
    let sm = synth.bundle.split.summary(&synth.bundle.vocab);
    println!("{}\n{}", DatasetSummary::header(), sm.row());
    Ok(())
}
