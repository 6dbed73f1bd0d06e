// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use bpdg::corpus::Vocabulary;
use bpdg::eval::{bleu2, corpus_bleu2, distinct, f1, perplexity_from_scores, TokenScore};
use proptest::prelude::*;

fn sentence() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 0..8)
}

fn relabel(s: &[u8], perm: &[u8]) -> Vec<u8> {
    s.iter().map(|&t| perm[t as usize]).collect()
}

proptest! {
    #[test]
    fn overlap_metrics_ignore_token_identity(h in sentence(), r in sentence(), perm in Just((0u8..6).collect::<Vec<_>>()).prop_shuffle()) {
        let (h2, r2) = (relabel(&h, &perm), relabel(&r, &perm));
        prop_assert_eq!(bleu2(&h, &r), bleu2(&h2, &r2));
        prop_assert_eq!(f1(&h, &r), f1(&h2, &r2));
        prop_assert_eq!(corpus_bleu2(&[(h.clone(), r.clone())]), corpus_bleu2(&[(h2, r2)]));
    }

    #[test]
    fn overlap_metrics_stay_in_range(h in sentence(), r in sentence()) {
        for v in [bleu2(&h, &r), f1(&h, &r), corpus_bleu2(&[(h.clone(), r.clone())])] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(f1(&h, &r), f1(&r, &h));
        if h.len() >= 2 {
            prop_assert!((bleu2(&h, &h) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distinct_ignores_response_order(rs in prop::collection::vec(prop::collection::vec(0u8..6, 1..6), 1..6), shift in 0usize..6) {
        let mut other = rs.clone();
        let n = other.len();
        other.rotate_left(shift % n);
        other.reverse();
        let d = distinct(&rs).unwrap();
        prop_assert_eq!(d, distinct(&other).unwrap());
        prop_assert!(d > 0.0 && d <= 1.0);
    }

    #[test]
    fn perplexity_falls_toward_the_oracle(probs in prop::collection::vec(0.01f64..0.99, 1..12)) {
        let counts: BTreeMap<String, u64> = ["a", "b", "c"].iter().map(|t| (t.to_string(), 5)).collect();
        let vocab = Vocabulary::from_counts(&counts, [], 1, 2);
        let ppl = |t: f64| {
            let scores: Vec<TokenScore> = probs
                .iter()
                .enumerate()
                .map(|(i, p)| TokenScore { token: 5 + i % 3, log_p: ((1.0 - t) * p + t).ln(), log_p_unk: -3.0 })
                .collect();
            perplexity_from_scores(&scores, &vocab).unwrap()
        };
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let v = ppl(k as f64 / 10.0);
            prop_assert!(v < last);
            last = v;
        }
        prop_assert!((last - 1.0).abs() < 1e-6);
    }
}

#[test]
fn hand_computed_values() {
    let t = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    assert!((bleu2(&t("a b c"), &t("a b d")) - (1.0f64 / 3.0).sqrt()).abs() < 1e-6);
    assert!((f1(&t("a b c"), &t("b c d")) - 2.0 / 3.0).abs() < 1e-6);
    assert!((distinct(&[t("a b a b")]).unwrap() - 0.5).abs() < 1e-6);
    let counts: BTreeMap<String, u64> = (0..5).map(|i| (format!("w{i}"), 9)).collect();
    let vocab = Vocabulary::from_counts(&counts, [], 1, 2);
    // Uniform over ten scored outcomes.
    let scores: Vec<TokenScore> = (5..10)
        .map(|token| TokenScore { token, log_p: (0.1f64).ln(), log_p_unk: (0.1f64).ln() })
        .collect();
    assert!((perplexity_from_scores(&scores, &vocab).unwrap() - 10.0).abs() < 1e-6);
}
