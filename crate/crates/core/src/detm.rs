//! The dynamic embedded topic model.
//!
//! Generative process: topic embeddings `alpha_k^(t)` and the latent means
//! `eta_t` follow Gaussian random walks; a document at time `t` draws
//! `theta ~ LN(eta_t, a2 I)`, each word picks a topic `z ~ Cat(theta)` and then
//! a term from `softmax(rho^T alpha_z^(t))`.
//!
//! Inference is structured and amortized: `q(alpha)` is mean-field,
//! `q(eta_t | eta_(t-1), w~)` comes from an LSTM over per-time aggregated
//! bag-of-words, and `q(theta_d | eta_(t_d), w_d)` from a feed-forward
//! encoder. Topic assignments are marginalized out of the likelihood.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{
    aggregate_by_time, normalized_bow, split_and_bin, CorpusBundle, CorpusSplit, StampedDocument,
    TimeAggregatedBow, TimedDocument, Vocabulary,
};
use crate::embeddings::EmbeddingMatrix;
use crate::eval::{ThetaQuery, TopicModel};
use crate::numcore::gaussian::normal;
use crate::numcore::serialize;
use crate::numcore::{
    kl_diag_normal, reparam_sample, Adam, AdamConfig, Bound, Graph, Linear, Lstm, MixtureBatch,
    ParamKind, ParamStore, Tensor, Var,
};
use crate::training::{LoopConfig, Optimizer, Trainable, Trainer};
use crate::{Error, Result};

/// Topics `beta[k][t]` stored as a `(K*T) x V` matrix, row `k*T + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicMatrix {
    beta: Tensor,
    num_topics: usize,
    num_times: usize,
}

impl TopicMatrix {
    pub fn new(beta: Tensor, num_topics: usize, num_times: usize) -> Result<Self> {
        if beta.shape().len() != 2 || beta.rows() != num_topics * num_times {
            return Err(Error::shape(
                "topic_matrix",
                format!(
                    "{:?} is not ({num_topics}*{num_times}) x V",
                    beta.shape()
                ),
            ));
        }
        Ok(TopicMatrix {
            beta,
            num_topics,
            num_times,
        })
    }

    pub fn num_topics(&self) -> usize {
        self.num_topics
    }

    pub fn num_times(&self) -> usize {
        self.num_times
    }

    pub fn vocab_size(&self) -> usize {
        self.beta.cols()
    }

    pub fn row(&self, k: usize, t: usize) -> &[f64] {
        self.beta.row_slice(k * self.num_times + t)
    }

    pub fn get(&self, k: usize, t: usize, v: usize) -> f64 {
        self.row(k, t)[v]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.beta
    }
}

/// Row-wise softmax with max shift.
fn softmax_rows(x: &mut Tensor) {
    for r in 0..x.rows() {
        let row = x.row_slice_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// `beta[k][t] = softmax(rho^T alpha_k^(t))` for `alpha: K x T x L`,
/// `rho: L x V`.
pub fn compute_topics(alpha: &Tensor, rho: &Tensor) -> Result<TopicMatrix> {
    let s = alpha.shape();
    if s.len() != 3 || s[2] != rho.rows() {
        return Err(Error::shape(
            "compute_topics",
            format!("alpha {s:?} vs rho {:?}", rho.shape()),
        ));
    }
    let mut logits = alpha.clone().as_matrix().matmul(rho)?;
    softmax_rows(&mut logits);
    TopicMatrix::new(logits, s[0], s[1])
}

/// `sum_v count_v * ln(sum_k theta_k beta[k][t][v] + eps)` over observed terms.
pub fn doc_log_likelihood(doc: &TimedDocument, theta: &[f64], beta: &TopicMatrix) -> f64 {
    doc.counts
        .iter()
        .map(|&(v, c)| {
            let p: f64 = theta
                .iter()
                .enumerate()
                .map(|(k, th)| th * beta.get(k, doc.time_bin, v as usize))
                .sum();
            c as f64 * (p + crate::numcore::MIXTURE_EPS).ln()
        })
        .sum()
}

/// ELBO terms. Document-level terms are rescaled to the full training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub rec_loglik: f64,
    pub kl_theta: f64,
    pub kl_eta: f64,
    pub kl_alpha: f64,
    pub elbo: f64,
}

impl ElboBreakdown {
    pub fn new(rec_loglik: f64, kl_theta: f64, kl_eta: f64, kl_alpha: f64) -> Self {
        ElboBreakdown {
            rec_loglik,
            kl_theta,
            kl_eta,
            kl_alpha,
            elbo: rec_loglik - kl_theta - kl_eta - kl_alpha,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.rec_loglik, self.kl_theta, self.kl_eta, self.kl_alpha, self.elbo]
            .iter()
            .all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetmHyperparams {
    /// K.
    pub num_topics: usize,
    /// Random-walk variance of the latent means.
    pub delta2: f64,
    /// Random-walk variance of the topic embeddings.
    pub gamma2: f64,
    /// Variance of the logistic-normal topic proportions around `eta_t`.
    pub a2: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    pub dropout: f64,
    pub encoder_hidden: usize,
    pub encoder_layers: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub lstm_input_dim: usize,
    pub weight_decay: f64,
    pub patience: usize,
    /// Monte Carlo samples per iteration.
    pub samples: usize,
    /// Train `rho` jointly instead of keeping it fixed.
    pub finetune_rho: bool,
    /// Standard deviation of the initial topic-embedding means.
    pub alpha_init_std: f64,
    /// Draw one initial embedding per topic and repeat it over time.
    pub alpha_init_shared: bool,
    pub seed: u64,
}

impl Default for DetmHyperparams {
    fn default() -> Self {
        DetmHyperparams {
            num_topics: 50,
            delta2: 0.005,
            gamma2: 0.005,
            a2: 1.0,
            batch_size: 200,
            lr: 0.001,
            epochs: 400,
            clip_norm: 2.0,
            dropout: 0.1,
            encoder_hidden: 800,
            encoder_layers: 2,
            lstm_hidden: 400,
            lstm_layers: 4,
            lstm_input_dim: 400,
            weight_decay: 1.2e-6,
            patience: 20,
            samples: 1,
            finetune_rho: false,
            alpha_init_std: 0.02,
            alpha_init_shared: false,
            seed: 1,
        }
    }
}

impl DetmHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        for (name, v) in [("delta2", self.delta2), ("gamma2", self.gamma2), ("a2", self.a2)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be a positive variance, got {v}"));
            }
        }
        if self.num_topics == 0 {
            return bad("num_topics must be >= 1");
        }
        if self.batch_size == 0 || self.samples == 0 {
            return bad("batch_size and samples must be >= 1");
        }
        if self.encoder_layers == 0 || self.lstm_layers == 0 {
            return bad("encoder_layers and lstm_layers must be >= 1");
        }
        if self.encoder_hidden == 0 || self.lstm_hidden == 0 || self.lstm_input_dim == 0 {
            return bad("layer widths must be >= 1");
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return bad("lr and clip_norm must be > 0 and weight_decay >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(&format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.alpha_init_std >= 0.0 && self.alpha_init_std.is_finite()) {
            return bad("alpha_init_std must be finite and >= 0");
        }
        Ok(())
    }
}

/// Feed-forward map from `[normalized bow, eta_(t_d)]` to the Gaussian
/// parameters of the topic-proportion logits, with dropout on the last hidden
/// layer. Shared by both models.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaEncoder {
    pub hidden: Vec<Linear>,
    pub mu: Linear,
    pub logvar: Linear,
    pub dropout: f64,
}

impl ThetaEncoder {
    pub fn layout(vocab_size: usize, k: usize, width: usize, layers: usize, dropout: f64) -> Self {
        let hidden = (0..layers)
            .map(|i| {
                let input = if i == 0 { vocab_size + k } else { width };
                lin(&format!("encoder/h{i}"), input, width)
            })
            .collect();
        ThetaEncoder {
            hidden,
            mu: lin("encoder/mu", width, k),
            logvar: lin("encoder/logvar", width, k),
            dropout,
        }
    }

    pub fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.hidden.iter().chain([&self.mu, &self.logvar])
    }

    /// `(mu, logvar)` nodes for a `B x V` bag-of-words batch and the matching
    /// `B x K` latent means.
    pub fn forward(
        &self,
        g: &Graph,
        p: &Bound,
        bow: Var,
        eta_d: Var,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var)> {
        let mut h = g.concat(&[bow, eta_d], 1)?;
        for l in &self.hidden {
            h = g.relu(l.forward(g, p, h)?);
        }
        let h = g.dropout(h, self.dropout, training, rng)?;
        Ok((self.mu.forward(g, p, h)?, self.logvar.forward(g, p, h)?))
    }

    /// `softmax(mu)` per query without sampling or dropout; `eta` is `T x K`.
    pub fn infer(
        &self,
        params: &ParamStore,
        queries: &[ThetaQuery],
        eta: &Tensor,
    ) -> Result<Vec<Vec<f64>>> {
        let (t, k) = (eta.rows(), eta.cols());
        let v = self.hidden[0].input - k;
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(EVAL_CHUNK) {
            let mut x = Vec::with_capacity(chunk.len() * (v + k));
            for q in chunk {
                if q.time >= t {
                    return Err(Error::Data(format!("time bin {} >= T={t}", q.time)));
                }
                if q.counts.iter().all(|c| c.1 == 0) {
                    return Err(Error::Data(
                        "cannot infer topic proportions of an empty document".into(),
                    ));
                }
                if let Some(c) = q.counts.iter().find(|c| c.0 as usize >= v) {
                    return Err(Error::Data(format!("term id {} >= V={v}", c.0)));
                }
                x.extend(normalized_bow(&q.counts, v));
                x.extend_from_slice(eta.row_slice(q.time));
            }
            let mut h = Tensor::new(&[chunk.len(), v + k], x)?;
            for l in &self.hidden {
                h = linear_eval(params, l, &h)?.map(|a| a.max(0.0));
            }
            let mut mu = linear_eval(params, &self.mu, &h)?;
            softmax_rows(&mut mu);
            out.extend((0..mu.rows()).map(|r| mu.row_slice(r).to_vec()));
        }
        Ok(out)
    }
}

fn linear_eval(params: &ParamStore, l: &Linear, x: &Tensor) -> Result<Tensor> {
    let w = params.tensor(&format!("{}/w", l.prefix))?;
    let b = params.tensor(&format!("{}/b", l.prefix))?;
    let mut y = x.matmul(w)?;
    for r in 0..y.rows() {
        for (yi, bi) in y.row_slice_mut(r).iter_mut().zip(b.data()) {
            *yi += bi;
        }
    }
    Ok(y)
}

/// Checks every parameter of `layers` exists with the shape the layout implies.
pub(crate) fn check_linears<'a>(
    params: &ParamStore,
    layers: impl IntoIterator<Item = &'a Linear>,
) -> Result<()> {
    for l in layers {
        check_shape(params, &format!("{}/w", l.prefix), &[l.input, l.output])?;
        check_shape(params, &format!("{}/b", l.prefix), &[1, l.output])?;
    }
    Ok(())
}

pub(crate) fn check_shape(params: &ParamStore, name: &str, shape: &[usize]) -> Result<()> {
    let got = params.tensor(name)?.shape();
    if got != shape {
        return Err(Error::Data(format!(
            "parameter {name} has shape {got:?}, expected {shape:?}"
        )));
    }
    Ok(())
}

/// Layer layout, derived from the hyperparameters and data dimensions.
#[derive(Clone, Debug, PartialEq)]
struct Networks {
    encoder: ThetaEncoder,
    eta_proj: Linear,
    lstm: Lstm,
    eta_mu: Linear,
    eta_logvar: Linear,
}

fn lin(prefix: &str, input: usize, output: usize) -> Linear {
    Linear {
        prefix: prefix.into(),
        input,
        output,
    }
}

impl Networks {
    fn layout(h: &DetmHyperparams, v: usize) -> Self {
        let k = h.num_topics;
        Networks {
            encoder: ThetaEncoder::layout(v, k, h.encoder_hidden, h.encoder_layers, h.dropout),
            eta_proj: lin("eta/proj", v, h.lstm_input_dim),
            lstm: Lstm {
                prefix: "lstm".into(),
                input: h.lstm_input_dim,
                hidden: h.lstm_hidden,
                layers: h.lstm_layers,
            },
            eta_mu: lin("eta/mu", h.lstm_hidden + k, k),
            eta_logvar: lin("eta/logvar", h.lstm_hidden + k, k),
        }
    }

    fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.encoder
            .linears()
            .chain([&self.eta_proj, &self.eta_mu, &self.eta_logvar])
    }

    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in self.linears() {
            Linear::init(store, &l.prefix, l.input, l.output, rng);
        }
        let s = &self.lstm;
        Lstm::init(store, &s.prefix, s.input, s.hidden, s.layers, rng);
    }
}

/// Graph nodes of one pass through the latent-mean chain.
pub struct EtaChain {
    /// `T x K`: samples when training, means otherwise.
    pub values: Var,
    pub mus: Vec<Var>,
    pub logvars: Vec<Var>,
    pub kl: Var,
}

/// Graph nodes of the topic embeddings.
pub struct AlphaDraw {
    /// `(K*T) x L`.
    pub values: Var,
    pub kl: Var,
}

/// A fitted (or freshly initialized) model.
#[derive(Clone, Debug, PartialEq)]
pub struct Detm {
    pub hyper: DetmHyperparams,
    vocab_hash: String,
    vocab_size: usize,
    num_times: usize,
    dim: usize,
    params: ParamStore,
    net: Networks,
}

pub const MODEL_TYPE: &str = "detm";
const EVAL_CHUNK: usize = 512;

fn init_alpha(hyper: &DetmHyperparams, t: usize, l: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let k = hyper.num_topics;
    if !hyper.alpha_init_shared {
        return Tensor::randn(&[k, t, l], hyper.alpha_init_std, rng);
    }
    let first = Tensor::randn(&[k, l], hyper.alpha_init_std, rng);
    let mut data = Vec::with_capacity(k * t * l);
    for kk in 0..k {
        for _ in 0..t {
            data.extend_from_slice(first.row_slice(kk));
        }
    }
    Tensor::new(&[k, t, l], data).expect("k * t * l entries")
}

impl Detm {
    /// Initializes parameters from `hyper.seed`. `wtilde` supplies the LSTM
    /// inputs and is kept with the model for inference.
    pub fn new(
        hyper: DetmHyperparams,
        rho: &EmbeddingMatrix,
        wtilde: &TimeAggregatedBow,
    ) -> Result<Self> {
        hyper.validate()?;
        let (l, v) = (rho.dim(), rho.vocab_size());
        let t = wtilde.rows.rows();
        if wtilde.rows.cols() != v {
            return Err(Error::shape(
                "detm",
                format!("rho has {v} columns but w~ has {}", wtilde.rows.cols()),
            ));
        }
        if t == 0 || l == 0 {
            return Err(Error::Config("need at least one time step and L >= 1".into()));
        }
        let k = hyper.num_topics;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut params = ParamStore::new();
        let rho_kind = if hyper.finetune_rho {
            ParamKind::Mean
        } else {
            ParamKind::Frozen
        };
        params.insert("rho", rho.rho.clone(), rho_kind);
        params.insert("wtilde", wtilde.rows.clone(), ParamKind::Frozen);
        params.insert("alpha_q_mu", init_alpha(&hyper, t, l, &mut rng), ParamKind::Mean);
        params.insert(
            "alpha_q_logvar",
            Tensor::full(&[k, t, l], -4.0),
            ParamKind::Scale,
        );
        let net = Networks::layout(&hyper, v);
        net.init(&mut params, &mut rng);
        Ok(Detm {
            hyper,
            vocab_hash: rho.vocab_hash.clone(),
            vocab_size: v,
            num_times: t,
            dim: l,
            params,
            net,
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
        let hyper: DetmHyperparams = serde_json::from_value(m.hyperparams.clone())
            .map_err(|e| Error::Data(format!("checkpoint hyperparameters: {e}")))?;
        hyper.validate()?;
        let rho = ckpt.params.tensor("rho")?;
        let (dim, vocab_size) = (rho.rows(), rho.cols());
        let num_times = ckpt.params.tensor("wtilde")?.rows();
        let net = Networks::layout(&hyper, vocab_size);
        let model = Detm {
            hyper,
            vocab_hash: m.vocab_hash.clone(),
            vocab_size,
            num_times,
            dim,
            params: ckpt.params.clone(),
            net,
        };
        model.check_params()?;
        Ok(model)
    }

    fn check_params(&self) -> Result<()> {
        let (k, t, l) = (self.hyper.num_topics, self.num_times, self.dim);
        check_shape(&self.params, "alpha_q_mu", &[k, t, l])?;
        check_shape(&self.params, "alpha_q_logvar", &[k, t, l])?;
        check_shape(&self.params, "wtilde", &[t, self.vocab_size])?;
        check_linears(&self.params, self.net.linears())?;
        let s = &self.net.lstm;
        for layer in 0..s.layers {
            let inp = if layer == 0 { s.input } else { s.hidden };
            let p = format!("{}/l{layer}", s.prefix);
            check_shape(&self.params, &format!("{p}/w_ih"), &[inp, 4 * s.hidden])?;
            check_shape(&self.params, &format!("{p}/w_hh"), &[s.hidden, 4 * s.hidden])?;
            check_shape(&self.params, &format!("{p}/b"), &[1, 4 * s.hidden])?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Adam configured from the hyperparameters.
    pub fn optimizer(&self) -> Optimizer {
        Optimizer::Adam(Adam::new(AdamConfig {
            lr: self.hyper.lr,
            weight_decay: self.hyper.weight_decay,
            ..AdamConfig::default()
        }))
    }

    /// Runs the LSTM over the projected `w~` rows and unrolls the chain:
    /// each step maps `[lstm_out_t, eta_(t-1)]` to `(mu_t, logvar_t)`. When
    /// `sample` is false, means are propagated instead of draws.
    pub fn eta_chain(&self, g: &Graph, p: &Bound, sample: bool, rng: &mut impl Rng) -> Result<EtaChain> {
        let k = self.hyper.num_topics;
        let proj = self.net.eta_proj.forward(g, p, p.var("wtilde")?)?;
        let inputs = (0..self.num_times)
            .map(|t| g.gather_rows(proj, &[t]))
            .collect::<Result<Vec<_>>>()?;
        let outs = self.net.lstm.forward(g, p, &inputs)?;
        let zero = g.constant(Tensor::zeros(&[1, k]));
        let mut prev: Option<Var> = None;
        let (mut mus, mut logvars, mut values, mut kls) = (vec![], vec![], vec![], vec![]);
        for (t, &out) in outs.iter().enumerate() {
            let inp = g.concat(&[out, prev.unwrap_or(zero)], 1)?;
            let mu = self.net.eta_mu.forward(g, p, inp)?;
            let lv = self.net.eta_logvar.forward(g, p, inp)?;
            let eta = if sample {
                reparam_sample(g, mu, lv, rng)?
            } else {
                mu
            };
            let var_p = if t == 0 { 1.0 } else { self.hyper.delta2 };
            kls.push(kl_diag_normal(g, mu, lv, prev, var_p)?);
            mus.push(mu);
            logvars.push(lv);
            values.push(eta);
            prev = Some(eta);
        }
        let mut kl = kls[0];
        for &x in &kls[1..] {
            kl = g.add(kl, x)?;
        }
        Ok(EtaChain {
            values: g.concat(&values, 0)?,
            mus,
            logvars,
            kl,
        })
    }

    /// Draws the topic embeddings (or takes their means) and their KL
    /// against the random-walk prior.
    pub fn alpha_draw(&self, g: &Graph, p: &Bound, sample: bool, rng: &mut impl Rng) -> Result<AlphaDraw> {
        let (k, t) = (self.hyper.num_topics, self.num_times);
        let mu = p.var("alpha_q_mu")?;
        let lv = p.var("alpha_q_logvar")?;
        let values = if sample {
            reparam_sample(g, mu, lv, rng)?
        } else {
            mu
        };
        let first: Vec<usize> = (0..k).map(|kk| kk * t).collect();
        let mut kl = kl_diag_normal(
            g,
            g.gather_rows(mu, &first)?,
            g.gather_rows(lv, &first)?,
            None,
            1.0,
        )?;
        if t > 1 {
            let rest: Vec<usize> = (0..k).flat_map(|kk| (1..t).map(move |tt| kk * t + tt)).collect();
            let prev: Vec<usize> = rest.iter().map(|r| r - 1).collect();
            let kl_rest = kl_diag_normal(
                g,
                g.gather_rows(mu, &rest)?,
                g.gather_rows(lv, &rest)?,
                Some(g.gather_rows(values, &prev)?),
                self.hyper.gamma2,
            )?;
            kl = g.add(kl, kl_rest)?;
        }
        Ok(AlphaDraw { values, kl })
    }

    /// `softmax(alpha rho)` on the graph, `(K*T) x V`.
    pub fn topics_node(&self, g: &Graph, p: &Bound, alpha: Var) -> Result<Var> {
        let logits = g.matmul(alpha, p.var("rho")?)?;
        g.softmax(logits, 1)
    }

    /// Encoder heads `(mu, logvar)` for a `B x V` normalized bag-of-words
    /// batch and the matching `B x K` latent means.
    pub fn encode_node(
        &self,
        g: &Graph,
        p: &Bound,
        bow: Var,
        eta_d: Var,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var)> {
        self.net.encoder.forward(g, p, bow, eta_d, training, rng)
    }

    /// Encodes one document and draws `theta = softmax(mu + sigma * eps)`.
    /// Returns `(mu, logvar, theta)` values.
    pub fn encode_theta(
        &self,
        bow: &[f64],
        eta: &[f64],
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if bow.iter().all(|&x| x == 0.0) {
            return Err(Error::Data("cannot encode an empty document".into()));
        }
        let g = Graph::new();
        let p = self.params.bind(&g);
        let b = g.constant(Tensor::row(bow.to_vec()));
        let e = g.constant(Tensor::row(eta.to_vec()));
        let (mu, lv) = self.encode_node(&g, &p, b, e, training, rng)?;
        let z = reparam_sample(&g, mu, lv, rng)?;
        let theta = g.softmax(z, 1)?;
        let out = |v: Var| g.value(v).data().to_vec();
        Ok((out(mu), out(lv), out(theta)))
    }

    fn elbo_once(
        &self,
        g: &Graph,
        p: &Bound,
        docs: &[&TimedDocument],
        corpus_size: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, ElboBreakdown)> {
        if docs.is_empty() {
            return Err(Error::Data("empty minibatch".into()));
        }
        let v = self.vocab_size;
        if let Some(bad) = docs
            .iter()
            .find(|d| d.time_bin >= self.num_times || d.counts.iter().any(|c| c.0 as usize >= v))
        {
            return Err(Error::Data(format!(
                "document {} does not fit the model (T={}, V={v})",
                bad.source_id, self.num_times
            )));
        }
        let eta = self.eta_chain(g, p, training, rng)?;
        let alpha = self.alpha_draw(g, p, training, rng)?;
        let beta = self.topics_node(g, p, alpha.values)?;

        let times: Vec<usize> = docs.iter().map(|d| d.time_bin).collect();
        let mut bow = Vec::with_capacity(docs.len() * v);
        let mut entries = Vec::new();
        for (b, d) in docs.iter().enumerate() {
            if d.is_empty() {
                return Err(Error::Data(format!("document {} is empty", d.source_id)));
            }
            bow.extend(normalized_bow(&d.counts, v));
            entries.extend(d.counts.iter().map(|&(w, c)| (b, w as usize, c as f64)));
        }
        let bow = g.constant(Tensor::new(&[docs.len(), v], bow)?);
        let eta_d = g.gather_rows(eta.values, &times)?;
        let (mu, lv) = self.encode_node(g, p, bow, eta_d, training, rng)?;
        let z = if training {
            reparam_sample(g, mu, lv, rng)?
        } else {
            mu
        };
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
        let elbo = g.sub(g.sub(g.sub(rec, kt)?, eta.kl)?, alpha.kl)?;
        let br = ElboBreakdown::new(g.scalar(rec), g.scalar(kt), g.scalar(eta.kl), g.scalar(alpha.kl));
        Ok((elbo, br))
    }

    /// Single-sample (or `hyper.samples`-sample) ELBO estimate of a minibatch,
    /// with document terms rescaled by `corpus_size / |docs|`.
    pub fn elbo_minibatch(
        &self,
        docs: &[&TimedDocument],
        corpus_size: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ElboBreakdown> {
        let g = Graph::new();
        let p = self.params.bind(&g);
        let (_, br) = self.elbo_graph(&g, &p, docs, corpus_size, training, rng)?;
        if !br.is_finite() {
            return Err(Error::Numerical(format!("non-finite ELBO: {br:?}")));
        }
        Ok(br)
    }

    fn elbo_graph(
        &self,
        g: &Graph,
        p: &Bound,
        docs: &[&TimedDocument],
        corpus_size: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, ElboBreakdown)> {
        let s = if training { self.hyper.samples } else { 1 };
        let (mut total, first) = self.elbo_once(g, p, docs, corpus_size, training, rng)?;
        if s == 1 {
            return Ok((total, first));
        }
        let mut parts = vec![first];
        for _ in 1..s {
            let (e, br) = self.elbo_once(g, p, docs, corpus_size, training, rng)?;
            total = g.add(total, e)?;
            parts.push(br);
        }
        let n = s as f64;
        let avg = |f: fn(&ElboBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        Ok((
            g.scale(total, 1.0 / n),
            ElboBreakdown::new(
                avg(|b| b.rec_loglik),
                avg(|b| b.kl_theta),
                avg(|b| b.kl_eta),
                avg(|b| b.kl_alpha),
            ),
        ))
    }

    /// `T x K` chain of latent means propagated at their variational means.
    pub fn eta_means(&self) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g);
        // no draws happen when sample is false
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let chain = self.eta_chain(&g, &p, false, &mut rng)?;
        Ok((*g.value(chain.values)).clone())
    }

    /// `softmax(mu)` from the encoder, with the latent mean of the document's
    /// time step at its variational mean.
    pub fn infer_theta_heldout(&self, counts: &[(u32, u32)], time: usize) -> Result<Vec<f64>> {
        let q = ThetaQuery {
            counts: counts.to_vec(),
            time,
        };
        Ok(self.net.encoder.infer(&self.params, &[q], &self.eta_means()?)?.remove(0))
    }

    /// Inner products `rho_new^T alpha_k^(t)` at the variational means, a
    /// `K x T` matrix, for a term outside the vocabulary.
    pub fn word_topic_scores(&self, embedding: &[f64]) -> Result<Tensor> {
        if embedding.len() != self.dim {
            return Err(Error::shape(
                "word_topic_scores",
                format!("embedding has {} entries, L={}", embedding.len(), self.dim),
            ));
        }
        let (k, t) = (self.hyper.num_topics, self.num_times);
        let alpha = self.params.tensor("alpha_q_mu")?.clone().as_matrix();
        let col = Tensor::new(&[self.dim, 1], embedding.to_vec())?;
        alpha.matmul(&col)?.reshape(&[k, t])
    }
}

impl TopicModel for Detm {
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
        compute_topics(self.params.tensor("alpha_q_mu")?, self.params.tensor("rho")?)
    }

    fn infer_thetas(&self, queries: &[ThetaQuery]) -> Result<Vec<Vec<f64>>> {
        self.net.encoder.infer(&self.params, queries, &self.eta_means()?)
    }
}

impl Trainable for Detm {
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
            clip_norm: Some(self.hyper.clip_norm),
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
}

/// Builds a model for `corpus` and trains it to completion.
pub fn train(
    corpus: &CorpusSplit,
    vocab: &Vocabulary,
    rho: &EmbeddingMatrix,
    hyper: &DetmHyperparams,
) -> Result<Trainer<Detm>> {
    rho.check_vocab(vocab)?;
    let wtilde = aggregate_by_time(corpus, vocab);
    let model = Detm::new(hyper.clone(), rho, &wtilde)?;
    let opt = model.optimizer();
    let mut trainer = Trainer::new(model, opt);
    trainer.run(corpus, |_, _| Ok(()))?;
    Ok(trainer)
}

/// Settings of the synthetic generator. Variances may be zero here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_topics: usize,
    pub num_times: usize,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub delta2: f64,
    pub gamma2: f64,
    pub a2: f64,
    pub num_docs: usize,
    pub tokens_per_doc: usize,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_topics: 3,
            num_times: 5,
            vocab_size: 100,
            embedding_dim: 10,
            delta2: 0.005,
            gamma2: 0.005,
            a2: 1.0,
            num_docs: 2000,
            tokens_per_doc: 40,
            ratios: [0.85, 0.05, 0.10],
            seed: 1,
        }
    }
}

/// Latent variables behind a synthetic corpus. `theta`, `z` and
/// `doc_times` are indexed by generation order, which is also each
/// document's `source_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `K x T x L`.
    pub alpha: Tensor,
    /// `T x K`.
    pub eta: Tensor,
    pub beta: TopicMatrix,
    pub theta: Vec<Vec<f64>>,
    pub z: Vec<Vec<u32>>,
    pub doc_times: Vec<usize>,
}

impl GroundTruth {
    /// True topic proportions of a generated document.
    pub fn theta_of(&self, doc: &TimedDocument) -> Option<&[f64]> {
        let i: usize = doc.source_id.parse().ok()?;
        self.theta.get(i).map(Vec::as_slice)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let theta = Tensor::from_rows(&self.theta)?;
        let mut tensors = BTreeMap::new();
        tensors.insert("alpha".to_string(), self.alpha.clone());
        tensors.insert("eta".to_string(), self.eta.clone());
        tensors.insert("beta".to_string(), self.beta.tensor().clone());
        tensors.insert("theta".to_string(), theta);
        let shapes = serialize::save_tensors(dir, &tensors)?;
        let meta = TruthMeta {
            shapes,
            num_topics: self.beta.num_topics(),
            num_times: self.beta.num_times(),
            doc_times: self.doc_times.clone(),
            z: self.z.clone(),
        };
        let p = dir.join("truth.json");
        fs::write(&p, serde_json::to_string(&meta)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("truth.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: TruthMeta = serde_json::from_str(&text)?;
        let mut t = serialize::load_tensors(dir, &meta.shapes)?;
        let mut take = |n: &str| {
            t.remove(n)
                .ok_or_else(|| Error::Data(format!("ground truth is missing {n}")))
        };
        let theta = take("theta")?;
        Ok(GroundTruth {
            alpha: take("alpha")?,
            eta: take("eta")?,
            beta: TopicMatrix::new(take("beta")?, meta.num_topics, meta.num_times)?,
            theta: (0..theta.rows()).map(|r| theta.row_slice(r).to_vec()).collect(),
            z: meta.z,
            doc_times: meta.doc_times,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TruthMeta {
    shapes: serialize::ShapeManifest,
    num_topics: usize,
    num_times: usize,
    doc_times: Vec<usize>,
    z: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub bundle: CorpusBundle,
    pub rho: EmbeddingMatrix,
    pub truth: GroundTruth,
}

/// `L x V` matrix of independent standard normals.
pub fn random_embeddings(dim: usize, vocab_size: usize, seed: u64) -> Tensor {
    Tensor::randn(&[dim, vocab_size], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let mut t = Tensor::row(x.to_vec());
    softmax_rows(&mut t);
    t.into_data()
}

/// Runs the generative process with `rho` as the true embeddings. Document
/// `i` is stamped with time `i mod T`, so every time step is populated.
pub fn sample_corpus(cfg: &SynthConfig, rho: &Tensor) -> Result<SyntheticCorpus> {
    let (k, t, l, v) = (cfg.num_topics, cfg.num_times, cfg.embedding_dim, cfg.vocab_size);
    if k == 0 || t == 0 || l == 0 || v == 0 {
        return Err(Error::Config("synthetic K, T, L and V must be >= 1".into()));
    }
    if rho.shape() != [l, v] {
        return Err(Error::shape(
            "sample_corpus",
            format!("rho {:?}, expected [{l}, {v}]", rho.shape()),
        ));
    }
    for (name, x) in [("delta2", cfg.delta2), ("gamma2", cfg.gamma2), ("a2", cfg.a2)] {
        if !(x >= 0.0 && x.is_finite()) {
            return Err(Error::Config(format!("{name} must be >= 0, got {x}")));
        }
    }
    if cfg.num_docs < t {
        return Err(Error::Config(format!(
            "need at least one document per time step ({} < {t})",
            cfg.num_docs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (gs, ds, a) = (cfg.gamma2.sqrt(), cfg.delta2.sqrt(), cfg.a2.sqrt());

    let mut alpha = Tensor::zeros(&[k, t, l]);
    for kk in 0..k {
        for tt in 0..t {
            for ll in 0..l {
                let base = if tt == 0 {
                    0.0
                } else {
                    alpha.data()[(kk * t + tt - 1) * l + ll]
                };
                let sd = if tt == 0 { 1.0 } else { gs };
                alpha.data_mut()[(kk * t + tt) * l + ll] = base + sd * normal(&mut rng);
            }
        }
    }
    let mut eta = Tensor::zeros(&[t, k]);
    for tt in 0..t {
        for kk in 0..k {
            let (base, sd) = if tt == 0 { (0.0, 1.0) } else { (eta.get(tt - 1, kk), ds) };
            eta.set(tt, kk, base + sd * normal(&mut rng));
        }
    }
    let beta = compute_topics(&alpha, rho)?;

    let vocab = Vocabulary::from_terms((0..v).map(|i| format!("w{i:05}")).collect())?;
    let mut theta = Vec::with_capacity(cfg.num_docs);
    let mut z = Vec::with_capacity(cfg.num_docs);
    let mut doc_times = Vec::with_capacity(cfg.num_docs);
    let mut stamped = Vec::with_capacity(cfg.num_docs);
    for d in 0..cfg.num_docs {
        let td = d % t;
        let logits: Vec<f64> = eta
            .row_slice(td)
            .iter()
            .map(|&m| m + a * normal(&mut rng))
            .collect();
        let th = softmax_vec(&logits);
        let mut zs = Vec::with_capacity(cfg.tokens_per_doc);
        let mut ws = Vec::with_capacity(cfg.tokens_per_doc);
        for _ in 0..cfg.tokens_per_doc {
            let zk = sample_categorical(&th, &mut rng);
            ws.push(sample_categorical(beta.row(zk, td), &mut rng) as u32);
            zs.push(zk as u32);
        }
        stamped.push(StampedDocument {
            tokens: ws,
            year: td as i64,
            source_id: d.to_string(),
        });
        theta.push(th);
        z.push(zs);
        doc_times.push(td);
    }
    let split = split_and_bin(stamped, cfg.ratios, cfg.seed, 1)?;
    let rho = EmbeddingMatrix::new(rho.clone(), vocab.hash())?;
    Ok(SyntheticCorpus {
        bundle: CorpusBundle { vocab, split },
        rho,
        truth: GroundTruth {
            alpha,
            eta,
            beta,
            theta,
            z,
            doc_times,
        },
    })
}

/// Greedy one-to-one matching of learned to true topics at every time step
/// by total-variation distance. Returns the mean matched distance.
pub fn matched_tv_distance(learned: &TopicMatrix, truth: &TopicMatrix) -> Result<f64> {
    if learned.num_times() != truth.num_times() || learned.vocab_size() != truth.vocab_size() {
        return Err(Error::shape("matched_tv_distance", "topic matrices disagree on T or V"));
    }
    let tv = |a: &[f64], b: &[f64]| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let (kl, kt) = (learned.num_topics(), truth.num_topics());
    let mut total = 0.0;
    let mut n = 0;
    for t in 0..truth.num_times() {
        let mut pairs: Vec<(f64, usize, usize)> = (0..kl)
            .flat_map(|i| (0..kt).map(move |j| (i, j)))
            .map(|(i, j)| (tv(learned.row(i, t), truth.row(j, t)), i, j))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let (mut used_l, mut used_t) = (vec![false; kl], vec![false; kt]);
        for (d, i, j) in pairs {
            if !used_l[i] && !used_t[j] {
                used_l[i] = true;
                used_t[j] = true;
                total += d;
                n += 1;
            }
        }
    }
    Ok(total / n as f64)
}

/// Mean L2 distance between consecutive topic-embedding means.
pub fn alpha_step_distance(model: &Detm) -> Result<f64> {
    let a = model.params().tensor("alpha_q_mu")?;
    let (k, t, l) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if t < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for kk in 0..k {
        for tt in 1..t {
            let cur = &a.data()[(kk * t + tt) * l..(kk * t + tt + 1) * l];
            let prev = &a.data()[(kk * t + tt - 1) * l..(kk * t + tt) * l];
            total += cur.iter().zip(prev).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        }
    }
    Ok(total / (k * (t - 1)) as f64)
}
