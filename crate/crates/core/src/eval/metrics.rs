// SPDX-License-Identifier: Apache-2.0

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use crate::corpus::{Vocabulary, UNK};
use crate::error::{BpdgError, Result};

/// Added to every per-token log term of the perplexity.
pub const PPL_EPS: f64 = 1e-8;
/// Smoothing for corpus-level BLEU when a precision is zero.
pub const BLEU_EPS: f64 = 1e-9;
pub const BLEU_ORDER: usize = 2;

fn ngram_counts<T: Eq + Hash + Clone>(toks: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and hypothesis n-gram total.
fn clipped<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Sentence BLEU with orders 1..=2 and uniform weights; zero if any
/// precision is zero.
pub fn bleu2<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_ORDER {
        let (m, t) = clipped(hyp, reference, n);
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln() / BLEU_ORDER as f64;
    }
    brevity_penalty(hyp.len(), reference.len()) * log_sum.exp()
}

/// Corpus BLEU: matches and totals pooled over all pairs before combining,
/// with `BLEU_EPS` added to each precision.
pub fn corpus_bleu2<T: Eq + Hash + Clone>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    let mut matched = [0usize; BLEU_ORDER];
    let mut total = [0usize; BLEU_ORDER];
    let (mut hl, mut rl) = (0usize, 0usize);
    for (h, r) in pairs {
        hl += h.len();
        rl += r.len();
        for n in 1..=BLEU_ORDER {
            let (m, t) = clipped(h, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if hl == 0 {
        return 0.0;
    }
    let log_sum: f64 = (0..BLEU_ORDER)
        .map(|i| {
            let p = if total[i] == 0 { 0.0 } else { matched[i] as f64 / total[i] as f64 };
            (p + BLEU_EPS).ln() / BLEU_ORDER as f64
        })
        .sum();
    (brevity_penalty(hl, rl) * log_sum.exp()).min(1.0)
}

/// Unigram F1 over multiset overlap.
pub fn f1<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (common, _) = clipped(hyp, reference, 1);
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / hyp.len() as f64;
    let r = common as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Half of (distinct unigrams + distinct bigrams) over total tokens, with
/// uniqueness over the whole set of responses.
pub fn distinct<T: Eq + Hash + Clone>(responses: &[Vec<T>]) -> Result<f64> {
    let mut uni: HashSet<&T> = HashSet::new();
    let mut bi: HashSet<(&T, &T)> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        total += r.len();
        uni.extend(r.iter());
        bi.extend(r.windows(2).map(|w| (&w[0], &w[1])));
    }
    if total == 0 {
        return Err(BpdgError::Contract("distinct over zero generated tokens".into()));
    }
    Ok((uni.len() + bi.len()) as f64 / (2.0 * total as f64))
}

/// One reference token with the model's log-probabilities of it and of UNK.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenScore {
    pub token: usize,
    pub log_p: f64,
    pub log_p_unk: f64,
}

/// Anything that can score reference tokens under teacher forcing.
pub trait SequenceScorer {
    type Item;
    fn score(&self, item: &Self::Item) -> Result<Vec<TokenScore>>;
}

/// Per-token log terms of the rare-aware perplexity.
pub fn token_log_term(s: &TokenScore, vocab: &Vocabulary) -> Result<f64> {
    let rare = s.token == UNK || vocab.is_rare(s.token);
    if rare {
        if vocab.num_rare() == 0 {
            return Err(BpdgError::Config(
                "a rare token occurred but the rare vocabulary is empty".into(),
            ));
        }
        Ok(s.log_p_unk - (vocab.num_rare() as f64).ln() + PPL_EPS)
    } else {
        Ok(s.log_p + PPL_EPS)
    }
}

pub fn perplexity_from_scores<'a>(
    scores: impl IntoIterator<Item = &'a TokenScore>,
    vocab: &Vocabulary,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in scores {
        sum += token_log_term(s, vocab)?;
        n += 1;
    }
    if n == 0 {
        return Err(BpdgError::Contract("perplexity over zero tokens".into()));
    }
    Ok((-sum / n as f64).exp())
}

pub fn perplexity<S: SequenceScorer>(scorer: &S, refs: &[S::Item], vocab: &Vocabulary) -> Result<f64> {
    let mut all = Vec::new();
    for r in refs {
        all.extend(scorer.score(r)?);
    }
    perplexity_from_scores(&all, vocab)
}

/// Mean of `p0 + p1` over responses.
pub fn bpacc_soft(probs: &[[f64; 3]]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs.iter().map(|p| p[0] + p[1]).sum::<f64>() / probs.len() as f64
}

/// Share of responses whose most probable class is 0 or 1.
pub fn bpacc_hard(probs: &[[f64; 3]]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter()
        .filter(|p| p[2] < p[0].max(p[1]))
        .count();
    hits as f64 / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab_from_texts;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_fixtures() {
        assert_eq!(bleu2(&t("a b c"), &t("a b c")), 1.0);
        assert!((bleu2(&t("a b c"), &t("a b d")) - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(bleu2(&t("a"), &t("a b c d")), 0.0);
        assert_eq!(bleu2::<&str>(&[], &t("a")), 0.0);
    }

    #[test]
    fn corpus_bleu_matches_sentence_on_one_pair() {
        let pairs = vec![(t("a b c"), t("a b d"))];
        assert!((corpus_bleu2(&pairs) - (1.0f64 / 3.0).sqrt()).abs() < 1e-8);
        let pairs = vec![(t("a"), t("a b c d"))];
        assert!(corpus_bleu2(&pairs) < 1e-3);
    }

    #[test]
    fn f1_fixtures() {
        assert_eq!(f1(&t("a b"), &t("a b")), 1.0);
        assert!((f1(&t("a b c"), &t("b c d")) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1(&t("a"), &t("b")), 0.0);
    }

    #[test]
    fn distinct_fixtures() {
        assert_eq!(distinct(&[t("a b a b")]).unwrap(), 0.5);
        let k = 5;
        let r: Vec<Vec<&str>> = (0..k).map(|_| t("a")).collect();
        assert!((distinct(&r).unwrap() - 1.0 / (2.0 * k as f64)).abs() < 1e-15);
        assert!((distinct(&[t("a b c d")]).unwrap() - 7.0 / 8.0).abs() < 1e-15);
        assert!(distinct::<&str>(&[vec![]]).is_err());
    }

    #[test]
    fn perplexity_fixtures() {
        let words: Vec<String> = (0..10).map(|i| format!("w{i} w{i}")).collect();
        let v = build_vocab_from_texts(words.iter().map(String::as_str), 1, 2);
        assert_eq!(v.num_frequent(), 10);
        let scores: Vec<TokenScore> = (0..10)
            .map(|i| TokenScore {
                token: v.id(&format!("w{i}")).unwrap(),
                log_p: 0.1f64.ln(),
                log_p_unk: f64::NEG_INFINITY,
            })
            .collect();
        assert!((perplexity_from_scores(&scores, &v).unwrap() - 10.0).abs() < 1e-6);

        let v = build_vocab_from_texts(["f f r1 r2 r3 r4 r5"], 1, 2);
        assert_eq!(v.num_rare(), 5);
        let s = TokenScore {
            token: v.id("r1").unwrap(),
            log_p: -100.0,
            log_p_unk: 0.1f64.ln(),
        };
        let term = token_log_term(&s, &v).unwrap();
        assert!((term - (0.02f64.ln() + PPL_EPS)).abs() < 1e-12);

        let none = build_vocab_from_texts(["f f"], 1, 2);
        let s = TokenScore { token: UNK, log_p: 0.0, log_p_unk: 0.0 };
        assert!(matches!(token_log_term(&s, &none), Err(BpdgError::Config(_))));
    }

    #[test]
    fn bpacc_fixtures() {
        assert_eq!(bpacc_soft(&[[0.0, 0.0, 1.0]]), 0.0);
        let u = 1.0 / 3.0;
        assert!((bpacc_soft(&[[u, u, u]]) - 2.0 / 3.0).abs() < 1e-15);
        let p = [[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]];
        assert!((bpacc_soft(&p) - 0.5).abs() < 1e-15);
        assert_eq!(bpacc_hard(&p), 0.5);
    }
}
