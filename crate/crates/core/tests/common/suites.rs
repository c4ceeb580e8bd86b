//! Oracle suites shared by the focused integration tests and the acceptance
//! run.

use std::rc::Rc;

use dynamic_etm::corpus::TimedDocument;
use dynamic_etm::detm::{
    doc_log_likelihood, random_embeddings, sample_corpus, Detm, DetmHyperparams, SynthConfig,
    SyntheticCorpus, TopicMatrix,
};
use dynamic_etm::dlda_rep::{kl_full_cov, kl_full_cov_node, random_walk_precision, DldaHyperparams, DldaRep};
use dynamic_etm::corpus::aggregate_by_time;
use dynamic_etm::numcore::{
    kl_diag_normal, kl_diag_normal_values, reparam_with_noise, Graph, MixtureBatch, ParamKind, Tensor,
};
use dynamic_etm::training::Trainable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gradcheck::{check_op, numeric, rel_err, weighted_sum};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    randn(shape, rng).map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng).map(|x| 0.2 + x.abs())
}

/// Relative gradient error of every graph op, and of the Gaussian helpers
/// built on them.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let w = |shape: &[usize], r: &mut ChaCha8Rng| randn(shape, r);
    let mut out = Vec::new();
    let mut push = |name, e| out.push((name, e));

    let (a, b, wt) = (randn(&[3, 4], r), randn(&[3, 4], r), w(&[3, 4], r));
    push("add", check_op(&[a.clone(), b.clone()], |g, v| weighted_sum(g, g.add(v[0], v[1]).unwrap(), &wt)));
    push("sub", check_op(&[a.clone(), b.clone()], |g, v| weighted_sum(g, g.sub(v[0], v[1]).unwrap(), &wt)));
    push("mul", check_op(&[a.clone(), b.clone()], |g, v| weighted_sum(g, g.mul(v[0], v[1]).unwrap(), &wt)));
    push("mul_self", check_op(&[a.clone()], |g, v| weighted_sum(g, g.mul(v[0], v[0]).unwrap(), &wt)));
    push("scale", check_op(&[a.clone()], |g, v| weighted_sum(g, g.scale(v[0], -1.7), &wt)));
    push("add_scalar", check_op(&[a.clone()], |g, v| weighted_sum(g, g.add_scalar(v[0], 0.3), &wt)));
    push("sum", check_op(&[a.clone()], |g, v| g.sum(v[0])));

    let (m, n, wm) = (randn(&[3, 5], r), randn(&[5, 2], r), w(&[3, 2], r));
    push("matmul", check_op(&[m.clone(), n.clone()], |g, v| weighted_sum(g, g.matmul(v[0], v[1]).unwrap(), &wm)));
    push("matmul_shared", check_op(&[m.clone()], |g, v| {
        let t = g.transpose(v[0]);
        g.sum(g.matmul(v[0], t).unwrap())
    }));
    let wt53 = w(&[5, 3], r);
    push("transpose", check_op(&[m.clone()], |g, v| weighted_sum(g, g.transpose(v[0]), &wt53)));
    let bias = randn(&[1, 4], r);
    push("bias_add", check_op(&[a.clone(), bias], |g, v| weighted_sum(g, g.bias_add(v[0], v[1]).unwrap(), &wt)));

    let kinked = away_from_zero(&[3, 4], r);
    push("relu", check_op(&[kinked.clone()], |g, v| weighted_sum(g, g.relu(v[0]), &wt)));
    push("tanh", check_op(&[a.clone()], |g, v| weighted_sum(g, g.tanh(v[0]), &wt)));
    push("sigmoid", check_op(&[a.clone()], |g, v| weighted_sum(g, g.sigmoid(v[0]), &wt)));
    push("exp", check_op(&[a.clone()], |g, v| weighted_sum(g, g.exp(v[0]), &wt)));
    push("log", check_op(&[positive(&[3, 4], r)], |g, v| weighted_sum(g, g.log(v[0]), &wt)));
    // entries kept clear of the bounds so the kink is not straddled
    let clamped = kinked.map(|x| if (x.abs() - 0.5).abs() < 0.05 { x * 1.3 } else { x });
    push("clamp", check_op(&[clamped], |g, v| weighted_sum(g, g.clamp(v[0], -0.5, 0.5), &wt)));

    let (c1, c2) = (randn(&[2, 4], r), randn(&[3, 4], r));
    let w54 = w(&[5, 4], r);
    push("concat_rows", check_op(&[c1.clone(), c2], |g, v| weighted_sum(g, g.concat(&[v[0], v[1]], 0).unwrap(), &w54)));
    let c3 = randn(&[2, 3], r);
    let w27 = w(&[2, 7], r);
    push("concat_cols", check_op(&[c1, c3], |g, v| weighted_sum(g, g.concat(&[v[0], v[1]], 1).unwrap(), &w27)));
    for axis in [0, 1] {
        push(
            if axis == 0 { "softmax_axis0" } else { "softmax_axis1" },
            check_op(&[a.clone()], |g, v| weighted_sum(g, g.softmax(v[0], axis).unwrap(), &wt)),
        );
        push(
            if axis == 0 { "log_softmax_axis0" } else { "log_softmax_axis1" },
            check_op(&[a.clone()], |g, v| weighted_sum(g, g.log_softmax(v[0], axis).unwrap(), &wt)),
        );
    }
    push("dropout", check_op(&[a.clone()], |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        weighted_sum(g, g.dropout(v[0], 0.3, true, &mut rng).unwrap(), &wt)
    }));
    let w32 = w(&[3, 2], r);
    push("slice_cols", check_op(&[a.clone()], |g, v| weighted_sum(g, g.slice_cols(v[0], 1, 3).unwrap(), &w32)));
    let w44 = w(&[4, 4], r);
    push("gather_rows", check_op(&[a.clone()], |g, v| weighted_sum(g, g.gather_rows(v[0], &[2, 0, 2, 1]).unwrap(), &w44)));
    let wd = w(&[4, 4], r);
    push("diag_embed", check_op(&[randn(&[1, 4], r)], |g, v| weighted_sum(g, g.diag_embed(v[0]), &wd)));
    let w62 = w(&[6, 2], r);
    push("reshape", check_op(&[randn(&[3, 4], r)], |g, v| weighted_sum(g, g.reshape(v[0], &[6, 2]).unwrap(), &w62)));

    // theta 3 x 2 documents over K=2, beta (K*T) x V with T=2, V=4
    let batch = Rc::new(MixtureBatch {
        doc_time: vec![0, 1, 1],
        entries: vec![(0, 0, 2.0), (0, 3, 1.0), (1, 1, 1.0), (2, 2, 3.0), (2, 0, 1.0)],
    });
    push("mixture_loglik", check_op(&[positive(&[3, 2], r), positive(&[4, 4], r)], |g, v| {
        g.mixture_loglik(v[0], v[1], 2, batch.clone()).unwrap()
    }));

    let eps = randn(&[2, 3], r);
    let w23 = w(&[2, 3], r);
    push("reparam", check_op(&[randn(&[2, 3], r), randn(&[2, 3], r)], |g, v| {
        let e = g.constant(eps.clone());
        weighted_sum(g, reparam_with_noise(g, v[0], v[1], e).unwrap(), &w23)
    }));
    push("kl_diag_normal", check_op(&[randn(&[2, 3], r), randn(&[2, 3], r), randn(&[2, 3], r)], |g, v| {
        kl_diag_normal(g, v[0], v[1], Some(v[2]), 0.7).unwrap()
    }));
    push("kl_diag_standard", check_op(&[randn(&[2, 3], r), randn(&[2, 3], r)], |g, v| {
        kl_diag_normal(g, v[0], v[1], None, 1.0).unwrap()
    }));
    let (prec, logdet) = random_walk_precision(3, 0.4);
    let mask = Tensor::new(&[3, 3], vec![0., 0., 0., 1., 0., 0., 1., 1., 0.]).unwrap();
    push("kl_full_cov", check_op(&[randn(&[3, 1], r), randn(&[3, 3], r), randn(&[1, 3], r)], |g, v| {
        let off = g.mul(v[1], g.constant(mask.clone())).unwrap();
        let diag = g.diag_embed(g.exp(v[2]));
        let l = g.add(off, diag).unwrap();
        kl_full_cov_node(g, v[0], l, v[2], g.constant(prec.clone()), logdet).unwrap()
    }));
    out
}

/// The micro-instance: V=20, K=2, L=5, T=3 and a 10-document minibatch.
pub fn micro_corpus() -> SyntheticCorpus {
    let cfg = SynthConfig {
        num_topics: 2,
        num_times: 3,
        vocab_size: 20,
        embedding_dim: 5,
        num_docs: 40,
        tokens_per_doc: 12,
        ratios: [0.8, 0.1, 0.1],
        seed: 3,
        ..SynthConfig::default()
    };
    sample_corpus(&cfg, &random_embeddings(5, 20, 3)).expect("micro corpus")
}

/// Relative error between the reverse-mode gradient of the single-sample
/// training ELBO and central differences, with the noise stream reseeded
/// for every evaluation. Returns `(error, number of scalars checked)`.
pub fn model_elbo_gradient_error<M: Trainable>(model: &mut M, docs: &[&TimedDocument]) -> (f64, usize) {
    const NOISE_SEED: u64 = 99;
    let elbo_at = |m: &M| {
        let g = Graph::new();
        let p = m.params().bind(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(NOISE_SEED);
        let (e, _) = m.elbo(&g, &p, docs, 40, true, &mut rng).expect("elbo");
        (g, p, e)
    };
    let (g, p, e) = elbo_at(model);
    let grads = g.backward(e).expect("backward");
    let analytic = p.collect(model.params(), &grads);
    drop(grads);
    drop(g);

    let names: Vec<String> = model
        .params()
        .iter()
        .filter(|(_, prm)| prm.kind != ParamKind::Frozen)
        .map(|(n, _)| n.clone())
        .collect();
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for name in &names {
        let x0 = model.params().tensor(name).unwrap().clone();
        let num = numeric(x0.data(), |x| {
            model.params_mut().get_mut(name).unwrap().data_mut().copy_from_slice(x);
            let (g, _, e) = elbo_at(model);
            g.scalar(e)
        });
        model.params_mut().get_mut(name).unwrap().data_mut().copy_from_slice(x0.data());
        let a = analytic
            .get(name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x0.len()]);
        all_a.extend(a);
        all_n.extend(num);
    }
    // per-parameter errors are folded into one vector norm over all scalars
    (rel_err(&all_a, &all_n), all_a.len())
}

pub fn micro_detm(corpus: &SyntheticCorpus) -> Detm {
    let hyper = DetmHyperparams {
        num_topics: 2,
        encoder_hidden: 6,
        encoder_layers: 2,
        lstm_hidden: 4,
        lstm_layers: 2,
        lstm_input_dim: 4,
        seed: 4,
        ..DetmHyperparams::default()
    };
    let w = aggregate_by_time(&corpus.bundle.split, &corpus.bundle.vocab);
    let mut m = Detm::new(hyper, &corpus.rho, &w).expect("micro model");
    // move away from the near-zero initialization so every term is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mu = m.params_mut().get_mut("alpha_q_mu").unwrap();
    for x in mu.data_mut() {
        *x = StandardNormal.sample(&mut rng);
    }
    m
}

pub fn micro_dlda(corpus: &SyntheticCorpus) -> DldaRep {
    let hyper = DldaHyperparams {
        num_topics: 2,
        encoder_hidden: 6,
        encoder_layers: 2,
        init_epochs: 0,
        seed: 4,
        ..DldaHyperparams::default()
    };
    let mut m = DldaRep::new(hyper, &corpus.bundle.vocab, corpus.bundle.split.num_times).expect("micro dlda");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for name in ["beta_q_mu", "eta_mean", "eta_chol_off"] {
        for x in m.params_mut().get_mut(name).unwrap().data_mut() {
            *x = 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

pub fn micro_batch(corpus: &SyntheticCorpus) -> Vec<&TimedDocument> {
    corpus.bundle.split.train.iter().take(10).collect()
}

/// Worst relative gap between an analytic KL and a Monte Carlo estimate of
/// `E_q[log q - log p]` from `samples` draws, over `instances` random cases.
pub fn diag_kl_oracle(instances: usize, samples: usize) -> f64 {
    diag_kl_worst(instances, samples, 1..=4, 21)
}

/// [`diag_kl_oracle`] with every instance in `dim` dimensions.
pub fn diag_kl_oracle_dim(dim: usize, instances: usize, samples: usize) -> f64 {
    diag_kl_worst(instances, samples, dim..=dim, 23)
}

fn diag_kl_worst(instances: usize, samples: usize, dims: std::ops::RangeInclusive<usize>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(dims.clone());
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..0.5)).collect();
        let mp: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let vp: f64 = rng.random_range(0.5..2.0);
        let exact = kl_diag_normal_values(&mu, &lv, &mp, vp).unwrap();
        let mut acc = 0.0;
        for _ in 0..samples {
            let mut s = 0.0;
            for i in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                let sd = (0.5 * lv[i]).exp();
                let x = mu[i] + sd * z;
                let log_q = -0.5 * z * z - sd.ln();
                let log_p = -0.5 * (x - mp[i]).powi(2) / vp - 0.5 * vp.ln();
                s += log_q - log_p;
            }
            acc += s;
        }
        let mc = acc / samples as f64;
        worst = worst.max((mc - exact).abs() / exact.abs());
    }
    worst
}

/// As [`diag_kl_oracle`] for a full-covariance posterior against the
/// random-walk prior, with both the value and graph versions checked.
pub fn full_cov_kl_oracle(instances: usize, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let t = rng.random_range(1..=4);
        let delta2: f64 = rng.random_range(0.3..1.5);
        let (prec, logdet_prior) = random_walk_precision(t, delta2);
        let m: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut l = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in 0..i {
                l.set(i, j, rng.random_range(-0.4..0.4));
            }
            l.set(i, i, rng.random_range(0.4..1.2));
        }
        let exact = kl_full_cov(&m, &l, &prec, logdet_prior).unwrap();
        let g = Graph::new();
        let logdiag: Vec<f64> = (0..t).map(|i| l.get(i, i).ln()).collect();
        let node = kl_full_cov_node(
            &g,
            g.constant(Tensor::new(&[t, 1], m.clone()).unwrap()),
            g.constant(l.clone()),
            g.constant(Tensor::row(logdiag)),
            g.constant(prec.clone()),
            logdet_prior,
        )
        .unwrap();
        worst = worst.max((g.scalar(node) - exact).abs() / exact.abs());

        let log_det_q: f64 = (0..t).map(|i| l.get(i, i).ln()).sum();
        let mut acc = 0.0;
        let mut z = vec![0.0; t];
        let mut x = vec![0.0; t];
        for _ in 0..samples {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            for i in 0..t {
                x[i] = m[i] + (0..=i).map(|j| l.get(i, j) * z[j]).sum::<f64>();
            }
            let log_q = -0.5 * z.iter().map(|v| v * v).sum::<f64>() - log_det_q;
            let mut quad = 0.0;
            for i in 0..t {
                for j in 0..t {
                    quad += x[i] * prec.get(i, j) * x[j];
                }
            }
            let log_p = -0.5 * quad - 0.5 * logdet_prior;
            acc += log_q - log_p;
        }
        let mc = acc / samples as f64;
        worst = worst.max((mc - exact).abs() / exact.abs());
    }
    worst
}

fn random_simplex(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).map(|x: f64| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `log sum_z prod_n theta[z_n] beta[z_n][w_n]` by enumerating all `K^N`
/// topic assignments.
pub fn brute_force_loglik(tokens: &[u32], theta: &[f64], beta_t: &[Vec<f64>]) -> f64 {
    let k = theta.len();
    let n = tokens.len();
    let mut total = 0.0;
    let mut z = vec![0usize; n];
    loop {
        total += z
            .iter()
            .zip(tokens)
            .map(|(&zi, &w)| theta[zi] * beta_t[zi][w as usize])
            .product::<f64>();
        let mut i = 0;
        while i < n {
            z[i] += 1;
            if z[i] < k {
                break;
            }
            z[i] = 0;
            i += 1;
        }
        if i == n {
            break;
        }
    }
    total.ln()
}

/// Worst relative gap between `doc_log_likelihood` and enumeration over
/// `instances` random cases with K <= 4, V <= 8.
pub fn marginalization_error(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(1..=4);
        let v = rng.random_range(2..=8);
        let t = rng.random_range(1..=3);
        let n = rng.random_range(1..=6);
        let mut beta = Vec::with_capacity(k * t * v);
        let mut rows = vec![vec![Vec::new(); t]; k];
        for row in rows.iter_mut() {
            for r in row.iter_mut() {
                *r = random_simplex(v, &mut rng);
                beta.extend_from_slice(r);
            }
        }
        let beta = TopicMatrix::new(Tensor::new(&[k * t, v], beta).unwrap(), k, t).unwrap();
        let theta = random_simplex(k, &mut rng);
        let time = rng.random_range(0..t);
        let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..v as u32)).collect();
        let doc = super::doc(&tokens, time);
        let fast = doc_log_likelihood(&doc, &theta, &beta);
        let beta_t: Vec<Vec<f64>> = (0..k).map(|kk| rows[kk][time].clone()).collect();
        let slow = brute_force_loglik(&tokens, &theta, &beta_t);
        worst = worst.max((fast - slow).abs() / slow.abs().max(1.0));
    }
    worst
}
