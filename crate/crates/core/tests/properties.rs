mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use dynamic_etm::corpus::{aggregate_by_time, build_vocabulary, split_and_bin, StampedDocument, Vocabulary};
use dynamic_etm::detm::{compute_topics, ElboBreakdown, TopicMatrix};
use dynamic_etm::dlda_rep::{kl_full_cov, random_walk_precision, DldaHyperparams, DldaRep};
use dynamic_etm::eval::{topic_coherence, topic_diversity};
use dynamic_etm::numcore::{clip_grad_norm, kl_diag_normal_values, Graph, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, scale: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-scale..scale, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn topics_strategy() -> impl Strategy<Value = TopicMatrix> {
    (1usize..5, 1usize..4, 2usize..30).prop_flat_map(|(k, t, v)| {
        tensor(vec![k * t, v], 6.0).prop_map(move |x| {
            let mut x = x.map(f64::exp);
            for r in 0..k * t {
                let row = x.row_slice_mut(r);
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= s);
            }
            TopicMatrix::new(x, k, t).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topic_rows_are_distributions(
        (alpha, rho) in (1usize..4, 1usize..4, 1usize..6, 1usize..40)
            .prop_flat_map(|(k, t, l, v)| (tensor(vec![k, t, l], 20.0), tensor(vec![l, v], 5.0)))
    ) {
        let beta = compute_topics(&alpha, &rho).unwrap();
        for k in 0..beta.num_topics() {
            for t in 0..beta.num_times() {
                let row = beta.row(k, t);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elbo_is_reconstruction_minus_kls(r in -1e6..0.0f64, a in 0.0..1e5f64, b in 0.0..1e5f64, c in 0.0..1e5f64) {
        let e = ElboBreakdown::new(r, a, b, c);
        prop_assert_eq!(e.elbo, r - a - b - c);
        prop_assert!(e.elbo <= e.rec_loglik);
    }

    #[test]
    fn log_softmax_plus_logsumexp_recovers_input(x in prop::collection::vec(-700.0..700.0f64, 1..20)) {
        let g = Graph::new();
        let v = g.constant(Tensor::row(x.clone()));
        let ls = g.value(g.log_softmax(v, 1).unwrap());
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|xi| (xi - m).exp()).sum::<f64>().ln();
        for (i, xi) in x.iter().enumerate() {
            prop_assert!((ls.data()[i] + lse - xi).abs() <= 1e-9 * (1.0 + xi.abs()));
        }
    }

    #[test]
    fn aggregated_rows_sum_to_one(
        docs in prop::collection::vec((prop::collection::vec(0u32..12, 1..15), 0i64..4), 4..30)
    ) {
        let mut stamped: Vec<StampedDocument> = docs
            .iter()
            .enumerate()
            .map(|(i, (toks, y))| StampedDocument { tokens: toks.clone(), year: *y, source_id: i.to_string() })
            .collect();
        // one document per year up front so every bin has training data
        for y in 0..4 {
            stamped.push(StampedDocument { tokens: vec![0], year: y, source_id: format!("pad{y}") });
        }
        let split = split_and_bin(stamped, [1.0, 0.0, 0.0], 1, 1).unwrap();
        let vocab = Vocabulary::from_terms((0..12).map(|i| format!("w{i}")).collect()).unwrap();
        let agg = aggregate_by_time(&split, &vocab);
        for t in 0..split.num_times {
            prop_assert!(agg.docs_per_bin[t] > 0);
            prop_assert!((agg.rows.row_slice(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_kl_is_non_negative(
        p in prop::collection::vec((-3.0..3.0f64, -4.0..3.0f64, -3.0..3.0f64), 1..10),
        var in 0.01..10.0f64,
    ) {
        let (mu, lv, mp): (Vec<f64>, Vec<f64>, Vec<f64>) = (
            p.iter().map(|x| x.0).collect(),
            p.iter().map(|x| x.1).collect(),
            p.iter().map(|x| x.2).collect(),
        );
        prop_assert!(kl_diag_normal_values(&mu, &lv, &mp, var).unwrap() >= -1e-12);
        let lv_match: Vec<f64> = mu.iter().map(|_| var.ln()).collect();
        prop_assert!(kl_diag_normal_values(&mp, &lv_match, &mp, var).unwrap().abs() < 1e-12);
    }

    #[test]
    fn full_covariance_kl_is_non_negative(
        (m, off, diag, delta2) in (1usize..6).prop_flat_map(|t| (
            prop::collection::vec(-2.0..2.0f64, t),
            prop::collection::vec(-1.0..1.0f64, t * t),
            prop::collection::vec(0.05..2.0f64, t),
            0.01..2.0f64,
        ))
    ) {
        let t = m.len();
        let mut l = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in 0..i {
                l.set(i, j, off[i * t + j]);
            }
            l.set(i, i, diag[i]);
        }
        let (prec, logdet) = random_walk_precision(t, delta2);
        prop_assert!(kl_full_cov(&m, &l, &prec, logdet).unwrap() >= -1e-9);
    }

    #[test]
    fn diversity_and_coherence_stay_in_range(beta in topics_strategy(), seed in 0u64..1000) {
        let top = beta.vocab_size().min(25);
        let td = topic_diversity(&beta, top).unwrap();
        let k = beta.num_topics() as f64;
        for x in td.per_time.iter().chain([&td.mean]) {
            prop_assert!(*x >= 1.0 / k - 1e-12 && *x <= 1.0 + 1e-12);
        }
        let docs: Vec<_> = (0..15u64)
            .map(|d| {
                let toks: Vec<u32> = (0..6).map(|i| ((d * 7 + i * 13 + seed) % beta.vocab_size() as u64) as u32).collect();
                common::doc(&toks, (d as usize) % beta.num_times())
            })
            .collect();
        let tc = topic_coherence(&beta, &docs, beta.vocab_size().min(10)).unwrap();
        for x in tc.per_time.iter().chain([&tc.mean]) {
            prop_assert!((-1.0..=1.0).contains(x));
        }
    }

    #[test]
    fn posterior_covariance_is_spd(
        (t, off, diag) in (1usize..6).prop_flat_map(|t| (
            Just(t),
            prop::collection::vec(-2.0..2.0f64, 2 * t * t),
            prop::collection::vec(-3.0..1.0f64, 2 * t),
        ))
    ) {
        let vocab = Vocabulary::from_terms(vec!["a".into(), "b".into()]).unwrap();
        let h = DldaHyperparams { num_topics: 2, encoder_hidden: 4, ..DldaHyperparams::default() };
        let mut m = DldaRep::new(h, &vocab, t).unwrap();
        m.params_mut().get_mut("eta_chol_off").unwrap().data_mut().copy_from_slice(&off);
        m.params_mut().get_mut("eta_chol_logdiag").unwrap().data_mut().copy_from_slice(&diag);
        for k in 0..2 {
            let s = m.eta_covariance(k).unwrap();
            // Cholesky without pivoting succeeds exactly when s is SPD
            let mut c = vec![0.0; t * t];
            for i in 0..t {
                for j in 0..=i {
                    prop_assert!((s.get(i, j) - s.get(j, i)).abs() <= 1e-12 * (1.0 + s.get(i, j).abs()));
                    let dot: f64 = (0..j).map(|r| c[i * t + r] * c[j * t + r]).sum();
                    if i == j {
                        let d = s.get(i, i) - dot;
                        prop_assert!(d > 0.0);
                        c[i * t + i] = d.sqrt();
                    } else {
                        c[i * t + j] = (s.get(i, j) - dot) / c[j * t + j];
                    }
                }
            }
        }
    }

    #[test]
    fn vocabulary_respects_frequency_bounds_and_is_stable(
        docs in prop::collection::vec(prop::collection::vec(0u8..20, 0..12), 1..25),
        min_df in 1usize..4,
        max_df in 0.2..1.0f64,
    ) {
        let docs: Vec<Vec<String>> = docs.iter().map(|d| d.iter().map(|i| format!("t{i}")).collect()).collect();
        let stop: HashSet<String> = ["t0".to_string()].into();
        let Ok(vocab) = build_vocabulary(&docs, min_df, max_df, &stop) else {
            return Ok(());
        };
        let again = build_vocabulary(&docs, min_df, max_df, &stop).unwrap();
        prop_assert_eq!(vocab.terms(), again.terms());
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for d in &docs {
            for t in d.iter().map(String::as_str).collect::<BTreeSet<_>>() {
                *df.entry(t).or_default() += 1;
            }
        }
        for t in vocab.terms() {
            prop_assert!(t != "t0");
            prop_assert!(df[t.as_str()] >= min_df);
            prop_assert!(df[t.as_str()] as f64 / docs.len() as f64 <= max_df);
        }
    }

    #[test]
    fn held_out_documents_have_two_tokens(
        lens in prop::collection::vec(1usize..5, 10..60), seed in 0u64..100
    ) {
        let docs: Vec<StampedDocument> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| StampedDocument { tokens: vec![1; n], year: 0, source_id: i.to_string() })
            .collect();
        let split = split_and_bin(docs, [0.6, 0.2, 0.2], seed, 1).unwrap();
        prop_assert!(split.validation.iter().chain(&split.test).all(|d| d.len() >= 2));
    }

    #[test]
    fn softmax_rows_are_positive_and_normalized(x in (1usize..5, 1usize..30).prop_flat_map(|(r, c)| tensor(vec![r, c], 300.0))) {
        let g = Graph::new();
        let s = g.value(g.softmax(g.constant(x.clone()), 1).unwrap());
        let ls = g.value(g.log_softmax(g.constant(x.clone()), 1).unwrap());
        for r in 0..x.rows() {
            prop_assert!((s.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.row_slice(r).iter().all(|&p| p >= 0.0));
            prop_assert!(ls.row_slice(r).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn clipping_never_increases_the_norm(
        parts in prop::collection::vec(prop::collection::vec(-50.0..50.0f64, 1..10), 1..5),
        max in 0.01..100.0f64,
    ) {
        let mut grads: BTreeMap<String, Tensor> =
            parts.iter().enumerate().map(|(i, p)| (i.to_string(), Tensor::row(p.clone()))).collect();
        let before = clip_grad_norm(&mut grads, max).unwrap();
        let after = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
        prop_assert!(after <= before * (1.0 + 1e-12));
        prop_assert!(after <= max * (1.0 + 1e-12) || after == before);
    }
}
