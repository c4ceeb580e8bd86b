//! Minibatch training loop shared by both models: per-epoch seeded streams,
//! clipping, optimizer steps, validation scoring, early stopping and
//! checkpoint round trips.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    flatten_moments, moment, param_entries, Checkpoint, Manifest, OptimizerState,
    TrainingProgress,
};
use crate::corpus::{CorpusSplit, TimedDocument};
use crate::detm::ElboBreakdown;
use crate::eval::{reconstruction_score, TopicModel};
use crate::numcore::{clip_grad_norm, Adam, Bound, Graph, ParamStore, RmsProp, Var};
use crate::{Error, Result};

/// The random stream for one epoch: every epoch starts from the run seed on
/// its own stream, so a resumed run replays the same draws.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    RmsProp(RmsProp),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ParamStore, grads: &crate::numcore::GradMap) -> Result<()> {
        match self {
            Optimizer::Adam(o) => o.step(params, grads),
            Optimizer::RmsProp(o) => o.step(params, grads),
        }
    }

    fn state(&self) -> (OptimizerState, BTreeMap<String, crate::numcore::Tensor>) {
        let (kind, step, tensors) = match self {
            Optimizer::Adam(o) => ("adam", o.step, flatten_moments([("m", &o.m), ("v", &o.v)])),
            Optimizer::RmsProp(o) => ("rmsprop", o.step, flatten_moments([("sq", &o.sq)])),
        };
        let shapes = tensors.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
        (
            OptimizerState {
                kind: kind.into(),
                step,
                tensors: shapes,
            },
            tensors,
        )
    }

    /// Restores moments saved by a checkpoint into an optimizer of the same kind.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let Some(state) = &ckpt.manifest.optimizer else {
            return Ok(());
        };
        let t = &ckpt.optimizer_tensors;
        match (self, state.kind.as_str()) {
            (Optimizer::Adam(o), "adam") => {
                o.step = state.step;
                o.m = moment(t, "m");
                o.v = moment(t, "v");
            }
            (Optimizer::RmsProp(o), "rmsprop") => {
                o.step = state.step;
                o.sq = moment(t, "sq");
            }
            (_, other) => {
                return Err(Error::Data(format!(
                    "checkpoint optimizer {other:?} does not match this model"
                )))
            }
        }
        Ok(())
    }
}

/// Settings of the loop itself, independent of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub patience: usize,
    pub seed: u64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub elbo: f64,
    pub rec_loglik: f64,
    pub kl_theta: f64,
    pub kl_eta: f64,
    pub kl_alpha: f64,
    pub val_score: Option<f64>,
    pub grad_norm: f64,
}

impl EpochLog {
    pub fn csv_header() -> &'static str {
        "epoch,elbo,rec_loglik,kl_theta,kl_eta,kl_alpha,val_score,grad_norm"
    }

    pub fn csv_row(&self) -> String {
        let val = self.val_score.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.elbo,
            self.rec_loglik,
            self.kl_theta,
            self.kl_eta,
            self.kl_alpha,
            val,
            self.grad_norm
        )
    }
}

/// A model the loop can optimize.
pub trait Trainable: TopicModel {
    fn model_type(&self) -> &'static str;
    fn vocab_hash(&self) -> &str;
    fn hyperparams_json(&self) -> Result<serde_json::Value>;
    fn loop_config(&self) -> LoopConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Builds the single-sample ELBO of a minibatch drawn from a training set
    /// of `corpus_size` documents. Returns the ELBO node and its breakdown.
    fn elbo(
        &self,
        g: &Graph,
        p: &Bound,
        docs: &[&TimedDocument],
        corpus_size: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, ElboBreakdown)>;

    /// Called before each epoch; may rewrite parameters and optimizer state.
    fn on_epoch_start(&mut self, _epoch: usize, _opt: &mut Optimizer) -> Result<()> {
        Ok(())
    }

    /// Model-specific counters stored in the checkpoint.
    fn progress_extra(&self) -> BTreeMap<String, f64> {
        BTreeMap::new()
    }
}

fn mean_breakdown(parts: &[ElboBreakdown]) -> ElboBreakdown {
    let n = parts.len().max(1) as f64;
    let s = |f: fn(&ElboBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    ElboBreakdown::new(s(|b| b.rec_loglik), s(|b| b.kl_theta), s(|b| b.kl_eta), s(|b| b.kl_alpha))
}

pub struct Trainer<M: Trainable> {
    pub model: M,
    pub optimizer: Optimizer,
    pub progress: TrainingProgress,
    pub log: Vec<EpochLog>,
}

impl<M: Trainable> Trainer<M> {
    pub fn new(model: M, optimizer: Optimizer) -> Self {
        Trainer {
            model,
            optimizer,
            progress: TrainingProgress::default(),
            log: Vec::new(),
        }
    }

    pub fn finished(&self) -> bool {
        self.progress.stopped_early || self.progress.epochs_done >= self.model.loop_config().epochs
    }

    /// One pass over the training documents in a seeded random order.
    pub fn run_epoch(&mut self, corpus: &CorpusSplit) -> Result<EpochLog> {
        let cfg = self.model.loop_config();
        let epoch = self.progress.epochs_done;
        if corpus.train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.model.on_epoch_start(epoch, &mut self.optimizer)?;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        let mut norm_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let docs: Vec<&TimedDocument> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            let g = Graph::new();
            let bound = self.model.params().bind(&g);
            let (elbo, br) =
                self.model
                    .elbo(&g, &bound, &docs, corpus.train.len(), true, &mut rng)?;
            if !br.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite ELBO at epoch {epoch}: {br:?}"
                )));
            }
            let loss = g.scale(elbo, -1.0);
            let grads = g.backward(loss)?;
            let mut gm = bound.collect(self.model.params(), &grads);
            drop(grads);
            drop(g);
            norm_sum += match cfg.clip_norm {
                Some(c) => clip_grad_norm(&mut gm, c)?,
                None => gm.values().map(|t| t.sq_norm()).sum::<f64>().sqrt(),
            };
            self.optimizer.step(self.model.params_mut(), &gm)?;
            parts.push(br);
        }
        let br = mean_breakdown(&parts);
        let val_score = reconstruction_score(&self.model, &corpus.validation)?;
        let p = &mut self.progress;
        if let Some(v) = val_score {
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite validation score at epoch {epoch}"
                )));
            }
            if p.best_val.is_none_or(|b| v > b) {
                p.best_val = Some(v);
                p.best_epoch = Some(epoch);
                p.bad_epochs = 0;
            } else {
                p.bad_epochs += 1;
                if p.bad_epochs >= cfg.patience {
                    p.stopped_early = true;
                    log::info!("early stop after epoch {epoch}: no improvement for {} epochs", cfg.patience);
                }
            }
        }
        p.epochs_done += 1;
        p.extra = self.model.progress_extra();
        let entry = EpochLog {
            epoch,
            elbo: br.elbo,
            rec_loglik: br.rec_loglik,
            kl_theta: br.kl_theta,
            kl_eta: br.kl_eta,
            kl_alpha: br.kl_alpha,
            val_score,
            grad_norm: norm_sum / parts.len() as f64,
        };
        log::info!(
            "epoch {epoch}: elbo {:.4} rec {:.4} val {:?}",
            entry.elbo,
            entry.rec_loglik,
            entry.val_score
        );
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Runs epochs until the cap or early stopping, calling `after_epoch`
    /// after each one (e.g. to write a checkpoint).
    pub fn run(
        &mut self,
        corpus: &CorpusSplit,
        mut after_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while !self.finished() {
            let entry = self.run_epoch(corpus)?;
            after_epoch(self, &entry)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, metrics: BTreeMap<String, f64>) -> Result<Checkpoint> {
        let (state, tensors) = self.optimizer.state();
        let params = self.model.params().clone();
        Ok(Checkpoint {
            manifest: Manifest {
                model_type: self.model.model_type().into(),
                version: crate::VERSION.into(),
                vocab_hash: self.model.vocab_hash().into(),
                vocab_size: self.model.vocab_size(),
                num_times: self.model.num_times(),
                epoch: self.progress.epochs_done,
                hyperparams: self.model.hyperparams_json()?,
                metrics,
                progress: self.progress.clone(),
                params: param_entries(&params),
                optimizer: Some(state),
            },
            params,
            optimizer_tensors: tensors,
        })
    }

    /// Continues from a checkpoint whose parameters were loaded into `model`.
    pub fn resume(model: M, mut optimizer: Optimizer, ckpt: &Checkpoint) -> Result<Self> {
        optimizer.restore(ckpt)?;
        Ok(Trainer {
            model,
            optimizer,
            progress: ckpt.manifest.progress.clone(),
            log: Vec::new(),
        })
    }
}
