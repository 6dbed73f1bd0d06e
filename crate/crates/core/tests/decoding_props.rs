// SPDX-License-Identifier: Apache-2.0

mod common;

use std::cmp::Ordering;

use bpdg::corpus::EOS;
use bpdg::decoding::{beam_search, cmim_select, greedy, rank_order, score_sequence, select_index, BeamConfig, Candidate, StepScorer};
use proptest::prelude::*;

use common::*;

fn exhaustive_config() -> BeamConfig {
    BeamConfig { beam: 4096, max_len: 4, min_len: 0, banned: vec![], chunk: 64 }
}

#[test]
fn wide_beam_finds_the_enumerated_optimum() {
    for seed in 0..20 {
        let model = tiny_model(seed, 8);
        let stepper = tiny_stepper(&model);
        let all = enumerate(&stepper, 4, EOS);
        assert_eq!(all.len(), 1 + 7 + 49 + 343 * 8);
        let best = all.iter().min_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0)).unwrap();
        let found = beam_search(&stepper, &exhaustive_config()).unwrap();
        assert_eq!(found.len(), all.len());
        assert_eq!(found[0].sequence(), best.0, "seed {seed}");
        assert!((found[0].gen_score - best.1).abs() < 1e-9);
    }
}

#[test]
fn best_score_never_falls_as_the_beam_widens() {
    for seed in 0..20 {
        let model = tiny_model(100 + seed, 8);
        let stepper = tiny_stepper(&model);
        let mut last = f64::NEG_INFINITY;
        for beam in [1, 2, 4, 8] {
            let cfg = BeamConfig { beam, max_len: 6, ..BeamConfig::default() };
            let top = beam_search(&stepper, &cfg).unwrap()[0].gen_score;
            assert!(top >= last, "seed {seed}: beam {beam} gave {top} after {last}");
            last = top;
        }
    }
}

#[test]
fn candidate_scores_match_rescoring() {
    for seed in 0..5 {
        let model = tiny_model(200 + seed, 8);
        let stepper = tiny_stepper(&model);
        let cfg = BeamConfig { beam: 6, max_len: 5, ..BeamConfig::default() };
        let found = beam_search(&stepper, &cfg).unwrap();
        assert!(found.windows(2).all(|w| w[0].gen_score >= w[1].gen_score));
        for c in &found {
            assert!(c.len() <= cfg.max_len);
            assert!(c.tokens.iter().all(|t| !cfg.banned.contains(t) && *t != EOS));
            let s = score_sequence(&stepper, &c.sequence()).unwrap();
            assert!((s - c.gen_score).abs() < 1e-9);
        }
        let g = greedy(&stepper, &cfg).unwrap();
        let b1 = beam_search(&stepper, &BeamConfig { beam: 1, ..cfg.clone() }).unwrap();
        assert_eq!(g.sequence(), b1[0].sequence());
    }
}

#[test]
fn batched_steps_match_single_steps() {
    let model = tiny_model(7, 8);
    let stepper = tiny_stepper(&model);
    let prefixes: Vec<Vec<usize>> = vec![vec![], vec![5], vec![5, 6, 7], vec![7, 7], vec![6, 5, 5, 6]];
    let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
    let batch = stepper.next_log_probs(&refs).unwrap();
    for (p, row) in refs.iter().zip(&batch) {
        let single = stepper.next_log_probs(&[p]).unwrap().remove(0);
        for (a, b) in row.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((row.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_lambda_selects_the_top_beam() {
    for seed in 0..10 {
        let model = tiny_model(300 + seed, 8);
        let stepper = tiny_stepper(&model);
        let cfg = BeamConfig { beam: 8, max_len: 5, ..BeamConfig::default() };
        let mut found = beam_search(&stepper, &cfg).unwrap();
        let top = found[0].clone();
        let mut k = 0.0;
        let chosen = cmim_select(&mut found, 0.0, |_| {
            k += 1.7;
            Ok(-(k % 3.0))
        })
        .unwrap();
        assert_eq!(chosen.sequence(), top.sequence());
    }
}

fn arb_candidates() -> impl Strategy<Value = Vec<Candidate>> {
    prop::collection::btree_set(prop::collection::vec(5usize..9, 0..4), 1..10).prop_flat_map(|seqs| {
        let n = seqs.len();
        (
            Just(seqs.into_iter().collect::<Vec<_>>()),
            prop::collection::vec(prop::sample::select(vec![-3.0, -2.0, -1.5, -1.0, -0.25]), n),
            prop::collection::vec(prop::sample::select(vec![-4.0, -2.0, -1.0, 0.0]), n),
        )
            .prop_map(|(seqs, g, r)| {
                seqs.into_iter()
                    .zip(g.into_iter().zip(r))
                    .map(|(tokens, (gen_score, rel))| Candidate { tokens, ended: true, gen_score, rel_score: Some(rel) })
                    .collect()
            })
    })
}

proptest! {
    #[test]
    fn selection_ignores_list_order(cands in arb_candidates(), lambda3 in prop::sample::select(vec![0.0, 0.3, 0.5, 1.0]), shift in 0usize..10) {
        let a = cands[select_index(&cands, lambda3).unwrap()].clone();
        let mut rotated = cands.clone();
        let n = rotated.len();
        rotated.rotate_left(shift % n);
        rotated.reverse();
        let b = rotated[select_index(&rotated, lambda3).unwrap()].clone();
        prop_assert_eq!(&a, &b);
        for c in &cands {
            let obj = |x: &Candidate| x.gen_score - lambda3 * x.rel_score.unwrap();
            prop_assert!(obj(c) <= obj(&a));
        }
    }

    #[test]
    fn zero_lambda_is_the_generation_argmax(cands in arb_candidates()) {
        let best = cands
            .iter()
            .min_by(|a, b| rank_order(a.gen_score, &a.sequence(), b.gen_score, &b.sequence()))
            .unwrap();
        prop_assert_eq!(&cands[select_index(&cands, 0.0).unwrap()], best);
        prop_assert_eq!(rank_order(best.gen_score, &best.sequence(), best.gen_score, &best.sequence()), Ordering::Equal);
    }
}
