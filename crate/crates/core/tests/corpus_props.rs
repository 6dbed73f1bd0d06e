// SPDX-License-Identifier: Apache-2.0

use bpdg::corpus::{
    build_vocab, format_corpus, generate_splits, label_dialogue, load_corpus, parse_corpus, save_corpus, AttributeTables,
    Dialogue, PersonaLabel, Profile, Speaker, SynthConfig, TieBreak, Utterance,
};
use proptest::prelude::*;

fn tables() -> AttributeTables {
    AttributeTables {
        areas: vec!["paris".into(), "new york".into(), "lima".into()],
        interests: vec!["music".into(), "board games".into(), "tea".into()],
    }
}

fn profile() -> impl Strategy<Value = Profile> {
    (0u8..2, 0usize..3, prop::sample::subsequence(vec![0usize, 1, 2], 1..=2))
        .prop_map(|(gender, area, interests)| Profile { gender, area, interests })
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-z]{1,6}", 1..7).prop_map(|w| w.join(" "))
}

fn label() -> impl Strategy<Value = Option<PersonaLabel>> {
    prop::option::of(prop::sample::select(vec![PersonaLabel::User, PersonaLabel::Robot, PersonaLabel::NoPersona]))
}

fn dialogue() -> impl Strategy<Value = Dialogue> {
    (profile(), profile(), 1usize..4)
        .prop_flat_map(|(u, r, pairs)| {
            (Just(u), Just(r), prop::collection::vec((text(), label()), pairs * 2))
        })
        .prop_map(|(user_profile, robot_profile, turns)| Dialogue {
            id: String::new(),
            user_profile,
            robot_profile,
            turns: turns
                .into_iter()
                .enumerate()
                .map(|(i, (text, label))| Utterance {
                    speaker: if i % 2 == 0 { Speaker::User } else { Speaker::Robot },
                    text,
                    label,
                })
                .collect(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_text_round_trips(mut ds in prop::collection::vec(dialogue(), 0..6)) {
        for (i, d) in ds.iter_mut().enumerate() {
            d.id = format!("d{i}");
        }
        let t = tables();
        prop_assert_eq!(parse_corpus(&format_corpus(&ds, &t), &t).unwrap(), ds);
    }

    #[test]
    fn labelling_is_idempotent(mut d in dialogue(), tie in prop::sample::select(vec![TieBreak::User, TieBreak::Robot])) {
        let t = tables();
        label_dialogue(&mut d, &t, tie);
        let once = d.clone();
        label_dialogue(&mut d, &t, tie);
        prop_assert_eq!(d, once);
    }
}

#[test]
fn synthetic_splits_survive_the_file_format() {
    let cfg = SynthConfig { train: 60, valid: 8, test: 8, ..SynthConfig::default() };
    let s = generate_splits(&cfg, 17).unwrap();
    assert_eq!(s, generate_splits(&cfg, 17).unwrap());
    let dir = tempfile::tempdir().unwrap();
    for (name, split) in [("train", &s.train), ("valid", &s.valid), ("random", &s.random_test), ("biased", &s.biased_test)] {
        let path = dir.path().join(format!("{name}.jsonl"));
        save_corpus(&path, split, &s.tables).unwrap();
        assert_eq!(&load_corpus(&path, &s.tables).unwrap(), split);
    }
}

#[test]
fn in_vocabulary_text_round_trips() {
    let cfg = SynthConfig { train: 60, valid: 4, test: 4, ..SynthConfig::default() };
    let s = generate_splits(&cfg, 3).unwrap();
    let vocab = build_vocab(&s.train, &s.tables, 1, 2);
    for id in 0..vocab.len() {
        assert_eq!(vocab.id(vocab.token(id).unwrap()), Some(id));
    }
    for d in &s.train {
        for t in &d.turns {
            let ids = vocab.tokenize(&t.text);
            assert_eq!(vocab.detokenize(&ids), t.text);
        }
    }
    assert_eq!(vocab.tokenize("qqzx zzyq"), vec![bpdg::corpus::UNK; 2]);
}
