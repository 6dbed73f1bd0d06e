// SPDX-License-Identifier: Apache-2.0

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD, SEP, UNK};
use crate::error::{BpdgError, Result};

/// Next-token log-probabilities for a batch of response prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam: usize,
    /// Tokens per hypothesis, EOS included.
    pub max_len: usize,
    /// EOS is not allowed before this many tokens.
    pub min_len: usize,
    pub banned: Vec<usize>,
    /// Hypotheses scored per batched decoder pass.
    pub chunk: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 20,
            max_len: 16,
            min_len: 1,
            banned: vec![PAD, SEP, BOS, UNK],
            chunk: 32,
        }
    }
}

/// A finished hypothesis. `tokens` excludes the closing EOS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<usize>,
    /// Closed by EOS rather than by the length limit.
    pub ended: bool,
    pub gen_score: f64,
    pub rel_score: Option<f64>,
}

impl Candidate {
    /// Scored tokens, EOS included.
    pub fn len(&self) -> usize {
        self.tokens.len() + usize::from(self.ended)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The scored token sequence, EOS included.
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.tokens.clone();
        if self.ended {
            s.push(EOS);
        }
        s
    }
}

/// Higher score first, then shorter, then lexicographically smaller.
pub fn rank_order(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then(a.len().cmp(&b.len()))
        .then_with(|| a.cmp(b))
}

fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| rank_order(a.gen_score, &a.sequence(), b.gen_score, &b.sequence()));
}

fn batched<S: StepScorer>(scorer: &S, prefixes: &[Vec<usize>], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(prefixes.len());
    for part in prefixes.chunks(chunk.max(1)) {
        let refs: Vec<&[usize]> = part.iter().map(Vec::as_slice).collect();
        out.extend(scorer.next_log_probs(&refs)?);
    }
    Ok(out)
}

/// Length-wise beam search without length normalisation. Every step keeps
/// the `beam` best expansions of all live hypotheses; those ending in EOS
/// or reaching `max_len` are retired.
pub fn beam_search<S: StepScorer>(scorer: &S, cfg: &BeamConfig) -> Result<Vec<Candidate>> {
    if cfg.beam < 1 {
        return Err(BpdgError::Config("beam must be at least 1".into()));
    }
    if cfg.max_len < 1 {
        return Err(BpdgError::Config("max_len must be at least 1".into()));
    }
    let v = scorer.vocab_size();
    let banned: HashSet<usize> = cfg.banned.iter().copied().collect();
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Candidate> = Vec::new();
    for step in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(p, _)| p.clone()).collect();
        let lps = batched(scorer, &prefixes, cfg.chunk)?;
        let mut exp: Vec<(usize, usize, f64)> = Vec::with_capacity(live.len() * v);
        for (h, lp) in lps.iter().enumerate() {
            if lp.len() != v {
                return Err(BpdgError::Contract(format!("scorer returned {} log-probs for {v} tokens", lp.len())));
            }
            for (t, &x) in lp.iter().enumerate() {
                if banned.contains(&t) || (t == EOS && step < cfg.min_len) || x == f64::NEG_INFINITY {
                    continue;
                }
                exp.push((h, t, live[h].1 + x));
            }
        }
        let key = |&(h, t, _): &(usize, usize, f64)| {
            let mut s = live[h].0.clone();
            s.push(t);
            s
        };
        exp.sort_by(|a, b| rank_order(a.2, &key(a), b.2, &key(b)));
        exp.truncate(cfg.beam);
        let mut next = Vec::with_capacity(exp.len());
        for &(h, t, s) in &exp {
            let mut p = live[h].0.clone();
            if t == EOS {
                finished.push(Candidate {
                    tokens: p,
                    ended: true,
                    gen_score: s,
                    rel_score: None,
                });
                continue;
            }
            p.push(t);
            if p.len() == cfg.max_len {
                finished.push(Candidate {
                    tokens: p,
                    ended: false,
                    gen_score: s,
                    rel_score: None,
                });
            } else {
                next.push((p, s));
            }
        }
        live = next;
        // Scores only fall as hypotheses grow, so once `beam` finished
        // ones beat every live one the result is fixed.
        if finished.len() >= cfg.beam && !live.is_empty() {
            let mut f: Vec<f64> = finished.iter().map(|c| c.gen_score).collect();
            f.sort_by(|a, b| b.total_cmp(a));
            let best_live = live.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            if f[cfg.beam - 1] > best_live {
                break;
            }
        }
    }
    sort_candidates(&mut finished);
    let mut seen = HashSet::new();
    finished.retain(|c| seen.insert(c.sequence()));
    finished.truncate(cfg.beam);
    Ok(finished)
}

/// Sum of per-step log-probabilities of `seq` (EOS included if present),
/// one prefix at a time.
pub fn score_sequence<S: StepScorer>(scorer: &S, seq: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..seq.len() {
        let lp = scorer.next_log_probs(&[&seq[..i]])?;
        total += lp[0][seq[i]];
    }
    Ok(total)
}

/// Greedy argmax decoding under the same bans and limits.
pub fn greedy<S: StepScorer>(scorer: &S, cfg: &BeamConfig) -> Result<Candidate> {
    let banned: HashSet<usize> = cfg.banned.iter().copied().collect();
    let mut p = Vec::new();
    let mut score = 0.0;
    loop {
        let lp = scorer.next_log_probs(&[&p])?.remove(0);
        let mut best: Option<(usize, f64)> = None;
        for (t, &x) in lp.iter().enumerate() {
            if banned.contains(&t) || (t == EOS && p.len() < cfg.min_len) {
                continue;
            }
            if best.is_none_or(|(_, b)| x > b) {
                best = Some((t, x));
            }
        }
        let (t, x) = best.ok_or_else(|| BpdgError::Contract("every token is banned".into()))?;
        score += x;
        if t == EOS {
            return Ok(Candidate {
                tokens: p,
                ended: true,
                gen_score: score,
                rel_score: None,
            });
        }
        p.push(t);
        if p.len() == cfg.max_len {
            return Ok(Candidate {
                tokens: p,
                ended: false,
                gen_score: score,
                rel_score: None,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Log-probabilities from a fixed table keyed by prefix length.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }
        fn next_log_probs(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes.iter().map(|p| self.0[p.len().min(self.0.len() - 1)].clone()).collect())
        }
    }

    fn ln(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn beam_one_is_greedy_and_sorted() {
        let t = Table(vec![
            ln(&[0.0, 0.0, 0.0, 0.1, 0.5, 0.4]),
            ln(&[0.0, 0.0, 0.0, 0.6, 0.2, 0.2]),
        ]);
        let cfg = BeamConfig {
            beam: 1,
            max_len: 4,
            min_len: 0,
            banned: vec![],
            chunk: 2,
        };
        let b = beam_search(&t, &cfg).unwrap();
        let g = greedy(&t, &cfg).unwrap();
        assert_eq!(b[0].tokens, g.tokens);
        assert_eq!(b[0].tokens, vec![4]);
        assert!((b[0].gen_score - (0.5f64 * 0.6).ln()).abs() < 1e-12);
        let wide = beam_search(&t, &BeamConfig { beam: 5, ..cfg }).unwrap();
        assert!(wide.windows(2).all(|w| w[0].gen_score >= w[1].gen_score));
        assert!(wide.iter().all(|c| c.gen_score <= 0.0));
        assert!(matches!(beam_search(&t, &BeamConfig { beam: 0, ..BeamConfig::default() }), Err(BpdgError::Config(_))));
    }

    #[test]
    fn ties_prefer_shorter() {
        // EOS now, or token 4 then EOS with certainty: equal scores.
        let t = Table(vec![ln(&[0.0, 0.0, 0.0, 0.5, 0.5]), ln(&[0.0, 0.0, 0.0, 1.0, 0.0])]);
        let cfg = BeamConfig {
            beam: 2,
            max_len: 3,
            min_len: 0,
            banned: vec![],
            chunk: 8,
        };
        let b = beam_search(&t, &cfg).unwrap();
        assert!(b[0].tokens.is_empty() && b[0].ended);
        assert_eq!(b[1].tokens, vec![4]);
    }

    #[test]
    fn min_len_blocks_early_eos() {
        let t = Table(vec![ln(&[0.0, 0.0, 0.0, 0.9, 0.1]), ln(&[0.0, 0.0, 0.0, 0.9, 0.1])]);
        let cfg = BeamConfig {
            beam: 3,
            max_len: 3,
            min_len: 1,
            banned: vec![],
            chunk: 8,
        };
        let b = beam_search(&t, &cfg).unwrap();
        assert!(b.iter().all(|c| !c.tokens.is_empty()));
    }
}
