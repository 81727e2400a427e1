//! Randomized invariant checks for the numerical and data-handling
//! primitives the classifiers are built on.

use gdtc_core::baselines::{kn_fit, nb_fit};
use gdtc_core::data::{build_vocab, encode, subsample_per_class, Dataset, Document, EOS, UNK};
use gdtc_core::experiments::{metrics_from, normal_cdf, rank_sum_test};
use gdtc_core::models::ClassConditionalScorer;
use gdtc_core::tensor::{log_softmax, logsumexp};
use proptest::prelude::*;

fn finite_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..=max_len)
}

fn small_dataset() -> impl Strategy<Value = Dataset> {
    // 2..4 classes, each document 1..8 word ids in 3..12, EOS-terminated;
    // every class gets at least one document (labels cycle through 0..k)
    (2usize..=4).prop_flat_map(|k| {
        prop::collection::vec(prop::collection::vec(3u32..12, 1..8), k..40).prop_map(
            move |rows| Dataset {
                examples: rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut ids)| {
                        ids.push(EOS);
                        (Document { ids }, i % k)
                    })
                    .collect(),
                num_classes: k,
                name: "prop".into(),
            },
        )
    })
}

proptest! {
    #[test]
    fn log_softmax_normalizes_and_preserves_order(z in finite_vec(12)) {
        let ls = log_softmax(&z);
        let total: f64 = ls.iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for i in 0..z.len() {
            for j in 0..z.len() {
                prop_assert_eq!(z[i] > z[j], ls[i] > ls[j]);
            }
        }
    }

    #[test]
    fn logsumexp_is_bounded_by_max_plus_log_n(z in finite_vec(12)) {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logsumexp(&z).unwrap();
        prop_assert!(lse >= m - 1e-12);
        prop_assert!(lse <= m + (z.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn encode_terminates_with_eos_and_maps_unknowns_to_unk(
        words in prop::collection::vec("[a-z]{1,6}", 1..10)
    ) {
        let corpus: Vec<Vec<String>> = vec![vec!["known".to_string()]];
        let vocab = build_vocab(&corpus, 10, 1).unwrap();
        let doc = encode(&words.join(" "), &vocab);
        prop_assert_eq!(*doc.ids.last().unwrap(), EOS);
        for (w, &id) in words.iter().zip(&doc.ids) {
            if w == "known" {
                prop_assert_eq!(id, vocab.id("known"));
            } else {
                prop_assert_eq!(id, UNK);
            }
        }
    }

    #[test]
    fn subsample_returns_exactly_n_per_class_when_available(
        ds in small_dataset(), n in 1usize..4, seed in 0u64..8
    ) {
        let mut per_class = vec![0usize; ds.num_classes];
        for (_, y) in &ds.examples {
            per_class[*y] += 1;
        }
        match subsample_per_class(&ds, n, seed) {
            Ok(sub) => {
                let mut got = vec![0usize; ds.num_classes];
                for (_, y) in &sub.examples {
                    got[*y] += 1;
                }
                prop_assert!(got.iter().all(|&c| c == n));
            }
            Err(_) => {
                // only permitted when some class has fewer than n examples
                prop_assert!(per_class.iter().any(|&c| c < n));
            }
        }
    }

    #[test]
    fn metrics_recall_times_support_counts_the_diagonal(
        rows in prop::collection::vec((0usize..3, 0usize..3), 1..50)
    ) {
        let preds: Vec<usize> = rows.iter().map(|(p, _)| *p).collect();
        let golds: Vec<usize> = rows.iter().map(|(_, g)| *g).collect();
        let m = metrics_from(&preds, &golds, 3).unwrap();
        let correct: usize = (0..3).map(|y| m.confusion[y][y]).sum();
        prop_assert!((m.accuracy - 100.0 * correct as f64 / rows.len() as f64).abs() < 1e-9);
        for y in 0..3 {
            let diag = m.recall[y] / 100.0 * m.support[y] as f64;
            prop_assert!((diag - m.confusion[y][y] as f64).abs() < 1e-9);
            prop_assert_eq!(m.support[y], m.confusion[y].iter().sum::<usize>());
        }
    }

    #[test]
    fn nb_doc_loglik_is_nonpositive_and_additive(ds in small_dataset()) {
        let nb = nb_fit(&ds, 12, 1.0).unwrap();
        let (doc, _) = &ds.examples[0];
        for y in 0..ds.num_classes {
            let ll = nb.doc_loglik(doc, y).unwrap();
            prop_assert!(ll <= 1e-12);
            let by_token: f64 = doc.ids.iter().map(|&w| nb.log_prob(w, y)).sum();
            prop_assert!((ll - by_token).abs() < 1e-9);
        }
    }

    #[test]
    fn kn_probabilities_are_a_distribution_over_the_vocabulary(
        ds in small_dataset(), u in 0u32..12, v in 0u32..12
    ) {
        let kn = kn_fit(&ds, 12, 0.75).unwrap();
        for y in 0..ds.num_classes {
            let mut total = 0.0;
            for w in 0..12u32 {
                let p = kn.prob(w, (u, v), y);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
                total += p;
            }
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normal_cdf_is_monotone_and_symmetric(x in -6.0f64..6.0, dx in 0.0f64..2.0) {
        prop_assert!(normal_cdf(x + dx) >= normal_cdf(x) - 1e-7);
        prop_assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rank_sum_is_antisymmetric(
        a in prop::collection::vec(-10.0f64..10.0, 3..12),
        b in prop::collection::vec(-10.0f64..10.0, 3..12)
    ) {
        let (_, z_ab, _) = rank_sum_test(&a, &b);
        let (_, z_ba, _) = rank_sum_test(&b, &a);
        prop_assert!((z_ab + z_ba).abs() < 1e-9);
    }
}
