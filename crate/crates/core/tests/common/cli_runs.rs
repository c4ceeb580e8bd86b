//! Drives the `detm` binary on the bundled fixture.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dynamic_etm::checkpoint::Checkpoint;

/// Small networks so a fixture run takes seconds.
pub const CONFIG: &str = r#"
[embed]
dim = 16
epochs = 3

[detm]
num_topics = 4
encoder_hidden = 32
lstm_hidden = 16
lstm_layers = 1
lstm_input_dim = 16
batch_size = 32

[dlda_rep]
num_topics = 4
encoder_hidden = 32
batch_size = 32
"#;

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn detm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_detm")).args(args).output().expect("spawn detm");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs the command and panics with its stderr unless it exits 0.
pub fn ok(args: &[&str]) -> Output {
    let o = detm(args);
    assert_eq!(o.code, 0, "detm {args:?} failed:\n{}", o.stderr);
    o
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Directories of one full pipeline run.
pub struct Pipeline {
    pub root: PathBuf,
    pub config: PathBuf,
    pub corpus: PathBuf,
    pub embeddings: PathBuf,
    pub train: PathBuf,
    pub eval: PathBuf,
    pub topics: PathBuf,
    pub curves: PathBuf,
}

impl Pipeline {
    pub fn checkpoint(&self) -> PathBuf {
        self.train.join("checkpoint")
    }
}

/// preprocess -> embed -> train (`epochs`) -> eval -> export, under `root`.
pub fn pipeline(root: &Path, epochs: usize) -> Pipeline {
    fs::create_dir_all(root).unwrap();
    let config = root.join("config.toml");
    fs::write(&config, CONFIG).unwrap();
    let p = Pipeline {
        root: root.to_path_buf(),
        corpus: root.join("corpus"),
        embeddings: root.join("emb"),
        train: root.join("train"),
        eval: root.join("eval"),
        topics: root.join("topics"),
        curves: root.join("curves"),
        config,
    };
    let cfg = s(&p.config);
    let fixture = super::fixture("corpus100.jsonl");
    ok(&["--config", cfg, "--out", s(&p.corpus), "preprocess", "--input", s(&fixture)]);
    ok(&["--config", cfg, "--out", s(&p.embeddings), "embed", "--corpus", s(&p.corpus)]);
    let e = epochs.to_string();
    ok(&[
        "--config", cfg, "--out", s(&p.train), "train", "--corpus", s(&p.corpus), "--embeddings",
        s(&p.embeddings), "--epochs", &e,
    ]);
    let ck = p.checkpoint();
    ok(&["--config", cfg, "--out", s(&p.eval), "eval", "--checkpoint", s(&ck), "--corpus", s(&p.corpus)]);
    ok(&["--out", s(&p.topics), "export", "--checkpoint", s(&ck), "--corpus", s(&p.corpus), "--what", "topics"]);
    ok(&[
        "--out", s(&p.curves), "export", "--checkpoint", s(&ck), "--corpus", s(&p.corpus), "--what",
        "word-curves", "--terms", "solar,drought,notaword",
    ]);
    p
}

/// Trains `first` epochs, resumes to `total`, and compares with an unbroken
/// `total`-epoch run. Returns the largest relative gap over the final ELBO
/// and every parameter.
pub fn resume_gap(p: &Pipeline, model: &str, first: usize, total: usize) -> f64 {
    let cfg = s(&p.config);
    let dirs = [p.root.join(format!("{model}_full")), p.root.join(format!("{model}_a")), p.root.join(format!("{model}_b"))];
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["--config", cfg, "--out", s(out), "train", "--corpus", s(&p.corpus), "--model", model];
        if model == "detm" {
            args.extend(["--embeddings", s(&p.embeddings)]);
        }
        args.extend(extra);
        ok(&args);
    };
    let (f, t) = (first.to_string(), total.to_string());
    train(&dirs[0], &["--epochs", &t]);
    train(&dirs[1], &["--epochs", &f]);
    let a = dirs[1].join("checkpoint");
    train(&dirs[2], &["--epochs", &t, "--resume", s(&a)]);

    let full = Checkpoint::load(&dirs[0].join("checkpoint")).unwrap();
    let resumed = Checkpoint::load(&dirs[2].join("checkpoint")).unwrap();
    assert_eq!(full.manifest.epoch, total);
    assert_eq!(resumed.manifest.epoch, total);
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1.0);
    let mut worst = rel(full.manifest.metrics["elbo"], resumed.manifest.metrics["elbo"]);
    for (name, prm) in full.params.iter() {
        let other = resumed.params.tensor(name).unwrap();
        for (x, y) in prm.tensor.data().iter().zip(other.data()) {
            worst = worst.max(rel(*x, *y));
        }
    }
    worst
}
