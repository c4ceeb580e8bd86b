//! DLDA-rep: dynamic LDA (topics random-walking directly in word space) fitted
//! with the same reparameterized, amortized machinery as the embedded model.
//!
//! `q(beta~)` is mean-field over `K x T x V`; each latent-mean dimension `k`
//! has a full-covariance Gaussian over time with Cholesky factor
//! `L_k = strictly_lower(off_k) + diag(exp(logdiag_k))`; topic proportions use
//! the shared [`ThetaEncoder`]. The first `init_epochs` epochs tie every time
//! step to `t = 0` (a static warm start), after which the chain is untied.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{normalized_bow, CorpusSplit, TimedDocument, Vocabulary};
use crate::detm::{check_linears, check_shape, ElboBreakdown, ThetaEncoder, TopicMatrix};
use crate::eval::{ThetaQuery, TopicModel};
use crate::numcore::{
    kl_diag_normal, reparam_sample, Bound, Graph, Linear, MixtureBatch, ParamKind, ParamStore,
    RmsProp, RmsPropConfig, Tensor, Var, LOGVAR_MAX,
};
use crate::training::{LoopConfig, Optimizer, Trainable, Trainer};
use crate::{Error, Result};

pub const MODEL_TYPE: &str = "dlda_rep";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DldaHyperparams {
    pub num_topics: usize,
    /// Random-walk variance of the transformed topics.
    pub sigma2: f64,
    /// Random-walk variance of the latent means.
    pub delta2: f64,
    pub a2: f64,
    pub batch_size: usize,
    pub lr_mean: f64,
    pub lr_scale: f64,
    /// Learning rate of the amortized encoder.
    pub lr_network: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    /// Total epochs, including the tied warm-up.
    pub epochs: usize,
    pub init_epochs: usize,
    /// Gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub dropout: f64,
    pub encoder_hidden: usize,
    pub encoder_layers: usize,
    pub weight_decay: f64,
    pub patience: usize,
    /// Standard deviation of the initial transformed-topic means.
    pub beta_init_std: f64,
    pub seed: u64,
}

impl Default for DldaHyperparams {
    fn default() -> Self {
        DldaHyperparams {
            num_topics: 50,
            sigma2: 0.005,
            delta2: 0.005,
            a2: 1.0,
            batch_size: 1000,
            lr_mean: 0.05,
            lr_scale: 0.005,
            lr_network: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-8,
            epochs: 125,
            init_epochs: 5,
            clip_norm: 0.0,
            dropout: 0.1,
            encoder_hidden: 800,
            encoder_layers: 2,
            weight_decay: 1.2e-6,
            patience: 20,
            beta_init_std: 0.02,
            seed: 1,
        }
    }
}

impl DldaHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("sigma2", self.sigma2), ("delta2", self.delta2), ("a2", self.a2)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a positive variance, got {v}"));
            }
        }
        for (name, v) in [
            ("lr_mean", self.lr_mean),
            ("lr_scale", self.lr_scale),
            ("lr_network", self.lr_network),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.num_topics == 0 || self.batch_size == 0 {
            return bad("num_topics and batch_size must be >= 1".into());
        }
        if self.encoder_layers == 0 || self.encoder_hidden == 0 {
            return bad("encoder must have at least one non-empty layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.rmsprop_decay) {
            return bad("dropout and rmsprop_decay must be in [0, 1)".into());
        }
        if self.clip_norm < 0.0 || self.weight_decay < 0.0 {
            return bad("clip_norm and weight_decay must be >= 0".into());
        }
        if !(self.beta_init_std >= 0.0 && self.beta_init_std.is_finite()) {
            return bad("beta_init_std must be finite and >= 0".into());
        }
        Ok(())
    }
}

/// Precision matrix and log-determinant of the covariance of the random walk
/// `x_0 ~ N(0, 1)`, `x_t ~ N(x_(t-1), delta2)` over `t` steps.
pub fn random_walk_precision(t: usize, delta2: f64) -> (Tensor, f64) {
    let mut p = Tensor::zeros(&[t, t]);
    let inv = 1.0 / delta2;
    for i in 0..t {
        let mut d = if i == 0 { 1.0 } else { inv };
        if i + 1 < t {
            d += inv;
            p.set(i, i + 1, -inv);
            p.set(i + 1, i, -inv);
        }
        p.set(i, i, d);
    }
    (p, (t as f64 - 1.0) * delta2.ln())
}

/// `KL(N(m, L L^T) || N(0, P^-1))` with `ln|P^-1| = logdet_prior`. `m` is
/// `T x 1`, `l` a lower-triangular `T x T` node whose diagonal logarithms are
/// `logdiag` (`1 x T`).
pub fn kl_full_cov_node(
    g: &Graph,
    m: Var,
    l: Var,
    logdiag: Var,
    precision: Var,
    logdet_prior: f64,
) -> Result<Var> {
    let t = g.shape(m)[0] as f64;
    let pl = g.matmul(precision, l)?;
    let trace = g.sum(g.mul(pl, l)?);
    let pm = g.matmul(precision, m)?;
    let quad = g.sum(g.mul(m, pm)?);
    let logdet_q = g.scale(g.sum(logdiag), 2.0);
    let inner = g.sub(g.add(trace, quad)?, logdet_q)?;
    Ok(g.add_scalar(g.scale(inner, 0.5), 0.5 * (logdet_prior - t)))
}

/// Plain-value version of [`kl_full_cov_node`] taking the Cholesky factor.
pub fn kl_full_cov(m: &[f64], chol: &Tensor, precision: &Tensor, logdet_prior: f64) -> Result<f64> {
    let t = m.len();
    if chol.shape() != [t, t] || precision.shape() != [t, t] {
        return Err(Error::shape("kl_full_cov", "mean, factor and precision disagree"));
    }
    let s = chol.matmul(&chol.transpose())?;
    let mut trace = 0.0;
    let mut quad = 0.0;
    let mut logdet = 0.0;
    for i in 0..t {
        logdet += 2.0 * chol.get(i, i).ln();
        for j in 0..t {
            trace += precision.get(i, j) * s.get(j, i);
            quad += m[i] * precision.get(i, j) * m[j];
        }
    }
    Ok(0.5 * (trace + quad - t as f64 + logdet_prior - logdet))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DldaRep {
    pub hyper: DldaHyperparams,
    vocab_hash: String,
    vocab_size: usize,
    num_times: usize,
    params: ParamStore,
    encoder: ThetaEncoder,
    tied: bool,
}

const LOGDIAG_BOUND: f64 = 0.5 * LOGVAR_MAX;

impl DldaRep {
    pub fn new(hyper: DldaHyperparams, vocab: &Vocabulary, num_times: usize) -> Result<Self> {
        hyper.validate()?;
        let (k, t, v) = (hyper.num_topics, num_times, vocab.len());
        if t == 0 || v == 0 {
            return Err(Error::Config("need at least one time step and a vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut params = ParamStore::new();
        params.insert(
            "beta_q_mu",
            Tensor::randn(&[k, t, v], hyper.beta_init_std, &mut rng),
            ParamKind::Mean,
        );
        params.insert("beta_q_logvar", Tensor::full(&[k, t, v], -4.0), ParamKind::Scale);
        params.insert("eta_mean", Tensor::zeros(&[k, t]), ParamKind::Mean);
        params.insert("eta_chol_off", Tensor::zeros(&[k, t, t]), ParamKind::Scale);
        params.insert("eta_chol_logdiag", Tensor::full(&[k, t], -2.0), ParamKind::Scale);
        let encoder = ThetaEncoder::layout(v, k, hyper.encoder_hidden, hyper.encoder_layers, hyper.dropout);
        for l in encoder.linears() {
            Linear::init(&mut params, &l.prefix, l.input, l.output, &mut rng);
        }
        Ok(DldaRep {
            tied: hyper.init_epochs > 0,
            hyper,
            vocab_hash: vocab.hash(),
            vocab_size: v,
            num_times: t,
            params,
            encoder,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.manifest;
        if m.model_type != MODEL_TYPE {
            return Err(Error::Data(format!(
                "checkpoint holds a {:?} model, expected {MODEL_TYPE:?}",
                m.model_type
            )));
        }
        let hyper: DldaHyperparams = serde_json::from_value(m.hyperparams.clone())
            .map_err(|e| Error::Data(format!("checkpoint hyperparameters: {e}")))?;
        hyper.validate()?;
        let (k, t, v) = (hyper.num_topics, m.num_times, m.vocab_size);
        let params = ckpt.params.clone();
        check_shape(&params, "beta_q_mu", &[k, t, v])?;
        check_shape(&params, "beta_q_logvar", &[k, t, v])?;
        check_shape(&params, "eta_mean", &[k, t])?;
        check_shape(&params, "eta_chol_off", &[k, t, t])?;
        check_shape(&params, "eta_chol_logdiag", &[k, t])?;
        let encoder = ThetaEncoder::layout(v, k, hyper.encoder_hidden, hyper.encoder_layers, hyper.dropout);
        check_linears(&params, encoder.linears())?;
        let epochs_done = m.progress.epochs_done;
        Ok(DldaRep {
            tied: hyper.init_epochs > 0 && epochs_done <= hyper.init_epochs,
            hyper,
            vocab_hash: m.vocab_hash.clone(),
            vocab_size: v,
            num_times: t,
            params,
            encoder,
        })
    }

    /// Whether every time step currently shares the `t = 0` topics.
    pub fn is_tied(&self) -> bool {
        self.tied
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn optimizer(&self) -> Optimizer {
        let h = &self.hyper;
        Optimizer::RmsProp(RmsProp::new(RmsPropConfig {
            lr_mean: h.lr_mean,
            lr_scale: h.lr_scale,
            lr_network: h.lr_network,
            decay: h.rmsprop_decay,
            eps: h.rmsprop_eps,
            weight_decay: h.weight_decay,
        }))
    }

    /// Rows of the `(K*T) x V` topic parameters that are in use: row `k*T`
    /// for every `t` while tied.
    fn active_rows(&self) -> Vec<usize> {
        let (k, t) = (self.hyper.num_topics, self.num_times);
        (0..k)
            .flat_map(|kk| (0..t).map(move |tt| if self.tied { kk * t } else { kk * t + tt }))
            .collect()
    }

    /// Copies the `t = 0` slice of the topic parameters (and their optimizer
    /// accumulators) into every time step.
    pub fn untie(&mut self, opt: &mut Optimizer) {
        let (k, t, v) = (self.hyper.num_topics, self.num_times, self.vocab_size);
        let spread = |x: &mut Tensor| {
            let d = x.data_mut();
            for kk in 0..k {
                let (head, tail) = d[kk * t * v..(kk + 1) * t * v].split_at_mut(v);
                for chunk in tail.chunks_mut(v) {
                    chunk.copy_from_slice(head);
                }
            }
        };
        for name in ["beta_q_mu", "beta_q_logvar"] {
            if let Some(x) = self.params.get_mut(name) {
                spread(x);
            }
            let acc = match opt {
                Optimizer::RmsProp(o) => o.sq.get_mut(name),
                Optimizer::Adam(o) => o.m.get_mut(name),
            };
            if let Some(x) = acc {
                spread(x);
            }
            if let Optimizer::Adam(o) = opt {
                if let Some(x) = o.v.get_mut(name) {
                    spread(x);
                }
            }
        }
        self.tied = false;
    }

    /// Sample (or mean) of the `T x K` latent means and the per-dimension KL.
    pub fn eta_draw(
        &self,
        g: &Graph,
        p: &Bound,
        sample: bool,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var)> {
        let (k, t) = (self.hyper.num_topics, self.num_times);
        let mean = p.var("eta_mean")?;
        let off = p.var("eta_chol_off")?;
        let logdiag = g.clamp(p.var("eta_chol_logdiag")?, -LOGDIAG_BOUND, LOGDIAG_BOUND);
        let mut mask = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in 0..i {
                mask.set(i, j, 1.0);
            }
        }
        let mask = g.constant(mask);
        let (prec, logdet) = random_walk_precision(t, self.hyper.delta2);
        let prec = g.constant(prec);
        let mut cols = Vec::with_capacity(k);
        let mut kl: Option<Var> = None;
        for kk in 0..k {
            let m = g.transpose(g.gather_rows(mean, &[kk])?);
            let ld = g.gather_rows(logdiag, &[kk])?;
            let rows: Vec<usize> = (kk * t..(kk + 1) * t).collect();
            let lower = g.mul(g.gather_rows(off, &rows)?, mask)?;
            let l = g.add(lower, g.diag_embed(g.exp(ld)))?;
            let kl_k = kl_full_cov_node(g, m, l, ld, prec, logdet)?;
            kl = Some(match kl {
                Some(acc) => g.add(acc, kl_k)?,
                None => kl_k,
            });
            let col = if sample {
                let eps = g.constant(Tensor::randn(&[t, 1], 1.0, rng));
                g.add(m, g.matmul(l, eps)?)?
            } else {
                m
            };
            cols.push(col);
        }
        let kl = kl.expect("K >= 1");
        Ok((g.concat(&cols, 1)?, kl))
    }

    /// Draws `beta~`, returns the `(K*T) x V` topics node and the KL against
    /// the random walk (only the `t = 0` rows while tied).
    pub fn topics_draw(
        &self,
        g: &Graph,
        p: &Bound,
        sample: bool,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var)> {
        let (k, t) = (self.hyper.num_topics, self.num_times);
        let mu = p.var("beta_q_mu")?;
        let lv = p.var("beta_q_logvar")?;
        let first: Vec<usize> = (0..k).map(|kk| kk * t).collect();
        let (values, mut kl) = if self.tied {
            let (mu0, lv0) = (g.gather_rows(mu, &first)?, g.gather_rows(lv, &first)?);
            let v0 = if sample { reparam_sample(g, mu0, lv0, rng)? } else { mu0 };
            let kl = kl_diag_normal(g, mu0, lv0, None, 1.0)?;
            let idx: Vec<usize> = (0..k).flat_map(|kk| std::iter::repeat_n(kk, t)).collect();
            (g.gather_rows(v0, &idx)?, kl)
        } else {
            let v = if sample { reparam_sample(g, mu, lv, rng)? } else { mu };
            let kl = kl_diag_normal(
                g,
                g.gather_rows(mu, &first)?,
                g.gather_rows(lv, &first)?,
                None,
                1.0,
            )?;
            (v, kl)
        };
        if !self.tied && t > 1 {
            let rest: Vec<usize> = (0..k).flat_map(|kk| (1..t).map(move |tt| kk * t + tt)).collect();
            let prev: Vec<usize> = rest.iter().map(|r| r - 1).collect();
            let kl_rest = kl_diag_normal(
                g,
                g.gather_rows(mu, &rest)?,
                g.gather_rows(lv, &rest)?,
                Some(g.gather_rows(values, &prev)?),
                self.hyper.sigma2,
            )?;
            kl = g.add(kl, kl_rest)?;
        }
        Ok((g.softmax(values, 1)?, kl))
    }

    /// ELBO of a minibatch; same structure and scaling as the embedded
    /// model, with `kl_alpha` holding the KL of the transformed topics.
    pub fn elbo_graph(
        &self,
        g: &Graph,
        p: &Bound,
        docs: &[&TimedDocument],
        corpus_size: usize,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<(Var, ElboBreakdown)> {
        if docs.is_empty() {
            return Err(Error::Data("empty minibatch".into()));
        }
        let v = self.vocab_size;
        let (eta, kl_eta) = self.eta_draw(g, p, training, rng)?;
        let (beta, kl_beta) = self.topics_draw(g, p, training, rng)?;
        let times: Vec<usize> = docs.iter().map(|d| d.time_bin).collect();
        let mut bow = Vec::with_capacity(docs.len() * v);
        let mut entries = Vec::new();
        for (b, d) in docs.iter().enumerate() {
            if d.is_empty() || d.time_bin >= self.num_times {
                return Err(Error::Data(format!(
                    "document {} is empty or outside T={}",
                    d.source_id, self.num_times
                )));
            }
            if let Some(c) = d.counts.iter().find(|c| c.0 as usize >= v) {
                return Err(Error::Data(format!("term id {} >= V={v}", c.0)));
            }
            bow.extend(normalized_bow(&d.counts, v));
            entries.extend(d.counts.iter().map(|&(w, c)| (b, w as usize, c as f64)));
        }
        let bow = g.constant(Tensor::new(&[docs.len(), v], bow)?);
        let eta_d = g.gather_rows(eta, &times)?;
        let (mu, lv) = self.encoder.forward(g, p, bow, eta_d, training, rng)?;
        let z = if training { reparam_sample(g, mu, lv, rng)? } else { mu };
        let theta = g.softmax(z, 1)?;
        let batch = Rc::new(MixtureBatch {
            doc_time: times,
            entries,
        });
        let rec = g.mixture_loglik(theta, beta, self.num_times, batch)?;
        let kt = kl_diag_normal(g, mu, lv, Some(eta_d), self.hyper.a2)?;
        let scale = corpus_size as f64 / docs.len() as f64;
        let rec = g.scale(rec, scale);
        let kt = g.scale(kt, scale);
        let elbo = g.sub(g.sub(g.sub(rec, kt)?, kl_eta)?, kl_beta)?;
        let br = ElboBreakdown::new(g.scalar(rec), g.scalar(kt), g.scalar(kl_eta), g.scalar(kl_beta));
        Ok((elbo, br))
    }

    pub fn elbo_minibatch(
        &self,
        docs: &[&TimedDocument],
        corpus_size: usize,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<ElboBreakdown> {
        let g = Graph::new();
        let p = self.params.bind(&g);
        let (_, br) = self.elbo_graph(&g, &p, docs, corpus_size, training, rng)?;
        if !br.is_finite() {
            return Err(Error::Numerical(format!("non-finite ELBO: {br:?}")));
        }
        Ok(br)
    }

    /// `T x K` latent means at their variational means.
    pub fn eta_means(&self) -> Result<Tensor> {
        Ok(self.params.tensor("eta_mean")?.clone().as_matrix().transpose())
    }

    /// Full posterior covariance `L_k L_k^T` of latent-mean dimension `k`.
    pub fn eta_covariance(&self, k: usize) -> Result<Tensor> {
        let t = self.num_times;
        let off = self.params.tensor("eta_chol_off")?;
        let ld = self.params.tensor("eta_chol_logdiag")?;
        let mut l = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in 0..i {
                l.set(i, j, off.data()[(k * t + i) * t + j]);
            }
            l.set(i, i, ld.data()[k * t + i].clamp(-LOGDIAG_BOUND, LOGDIAG_BOUND).exp());
        }
        l.matmul(&l.transpose())
    }
}

impl TopicModel for DldaRep {
    fn num_topics(&self) -> usize {
        self.hyper.num_topics
    }

    fn num_times(&self) -> usize {
        self.num_times
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn topic_matrix(&self) -> Result<TopicMatrix> {
        let mu = self.params.tensor("beta_q_mu")?.clone().as_matrix();
        let rows = self.active_rows();
        let v = self.vocab_size;
        let mut data = Vec::with_capacity(rows.len() * v);
        for r in rows {
            data.extend_from_slice(mu.row_slice(r));
        }
        let mut beta = Tensor::new(&[data.len() / v, v], data)?;
        dlda_softmax(&mut beta);
        TopicMatrix::new(beta, self.hyper.num_topics, self.num_times)
    }

    fn infer_thetas(&self, queries: &[ThetaQuery]) -> Result<Vec<Vec<f64>>> {
        self.encoder.infer(&self.params, queries, &self.eta_means()?)
    }
}

/// Row-wise max-shifted softmax: `beta = softmax(beta~)`.
pub fn dlda_softmax(x: &mut Tensor) {
    for r in 0..x.rows() {
        let row = x.row_slice_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - max).exp() / z;
        }
    }
}

/// Topics from a `K x T x V` sample of the transformed topics.
pub fn dlda_topics(beta_tilde: &Tensor) -> Result<TopicMatrix> {
    let s = beta_tilde.shape();
    if s.len() != 3 {
        return Err(Error::shape("dlda_topics", format!("expected K x T x V, got {s:?}")));
    }
    if !beta_tilde.all_finite() {
        return Err(Error::Numerical("non-finite transformed topic".into()));
    }
    let mut b = beta_tilde.clone().as_matrix();
    dlda_softmax(&mut b);
    TopicMatrix::new(b, s[0], s[1])
}

impl Trainable for DldaRep {
    fn model_type(&self) -> &'static str {
        MODEL_TYPE
    }

    fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    fn hyperparams_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.hyper)?)
    }

    fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            epochs: self.hyper.epochs,
            batch_size: self.hyper.batch_size,
            clip_norm: (self.hyper.clip_norm > 0.0).then_some(self.hyper.clip_norm),
            patience: self.hyper.patience,
            seed: self.hyper.seed,
        }
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn elbo(
        &self,
        g: &Graph,
        p: &Bound,
        docs: &[&TimedDocument],
        corpus_size: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, ElboBreakdown)> {
        self.elbo_graph(g, p, docs, corpus_size, training, rng)
    }

    fn on_epoch_start(&mut self, epoch: usize, opt: &mut Optimizer) -> Result<()> {
        if self.tied && epoch >= self.hyper.init_epochs {
            log::info!("untying time steps at epoch {epoch}");
            self.untie(opt);
        }
        Ok(())
    }

    fn progress_extra(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("tied".to_string(), if self.tied { 1.0 } else { 0.0 })])
    }
}

/// Builds a baseline for `corpus` and trains it to completion.
pub fn train_dlda(
    corpus: &CorpusSplit,
    vocab: &Vocabulary,
    hyper: &DldaHyperparams,
) -> Result<Trainer<DldaRep>> {
    let model = DldaRep::new(hyper.clone(), vocab, corpus.num_times)?;
    let opt = model.optimizer();
    let mut trainer = Trainer::new(model, opt);
    trainer.run(corpus, |_, _| Ok(()))?;
    Ok(trainer)
}
