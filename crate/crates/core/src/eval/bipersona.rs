// SPDX-License-Identifier: Apache-2.0

//! Three-way classifier deciding whether a response expresses the user's
//! persona, the robot's persona, or neither.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{split_811, ClassifierConfig, ClassifierInput, Labeled, SequenceClassifier};
use crate::corpus::{heuristic_persona_label, AttributeTables, Dialogue, PersonaLabel, Profile, Speaker, TieBreak, Vocabulary};
use crate::error::{BpdgError, Result};

pub const BIPERSONA_SEGMENTS: usize = 3;
/// Class proportions user : robot : none.
pub const CLASS_RATIO: [usize; 3] = [1, 1, 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BipersonaConfig {
    pub classifier: ClassifierConfig,
    /// Upper bound on the balanced example count before the 8:1:1 split.
    pub max_examples: usize,
    /// Extra copies of persona-bearing turns paired with other profiles.
    pub counterfactual_rate: f64,
    pub tie_break: TieBreak,
}

impl Default for BipersonaConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierConfig::default(),
            max_examples: 5000,
            counterfactual_rate: 1.0,
            tie_break: TieBreak::Robot,
        }
    }
}

pub fn bipersona_input(
    response: &[usize],
    user: &Profile,
    robot: &Profile,
    tables: &AttributeTables,
    vocab: &Vocabulary,
    window: usize,
) -> Result<ClassifierInput> {
    let mut x = ClassifierInput {
        segments: vec![
            response.to_vec(),
            vocab.tokenize(&user.to_text(tables)),
            vocab.tokenize(&robot.to_text(tables)),
        ],
    };
    x.fit(window, 0)?;
    Ok(x)
}

struct Item<'a> {
    text: &'a str,
    user: &'a Profile,
    robot: &'a Profile,
    label: PersonaLabel,
}

/// Robot utterances with their profiles and labels, plus copies of the
/// persona-bearing ones under swapped or foreign profiles relabeled by
/// the heuristic, sampled to the 1:1:3 class ratio.
pub fn bipersona_examples(
    dialogues: &[Dialogue],
    tables: &AttributeTables,
    vocab: &Vocabulary,
    cfg: &BipersonaConfig,
    seed: u64,
) -> Result<Vec<Labeled>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<Item<'_>> = Vec::new();
    for d in dialogues {
        for t in d.turns.iter().filter(|t| t.speaker == Speaker::Robot) {
            let label = t.label.unwrap_or_else(|| {
                heuristic_persona_label(&t.text, &d.user_profile, &d.robot_profile, tables, cfg.tie_break)
            });
            items.push(Item {
                text: &t.text,
                user: &d.user_profile,
                robot: &d.robot_profile,
                label,
            });
            if label == PersonaLabel::NoPersona || !rng.random_bool(cfg.counterfactual_rate.clamp(0.0, 1.0)) {
                continue;
            }
            let (user, robot) = if rng.random_bool(0.5) {
                (&d.robot_profile, &d.user_profile)
            } else {
                let other = dialogues.choose(&mut rng).expect("non-empty");
                (&other.user_profile, &other.robot_profile)
            };
            items.push(Item {
                text: &t.text,
                user,
                robot,
                label: heuristic_persona_label(&t.text, user, robot, tables, cfg.tie_break),
            });
        }
    }
    let mut by_class: [Vec<usize>; 3] = Default::default();
    for (i, it) in items.iter().enumerate() {
        by_class[it.label.index()].push(i);
    }
    if let Some(c) = (0..3).find(|&c| by_class[c].is_empty()) {
        return Err(BpdgError::Data(format!("no robot utterances with persona label {c}")));
    }
    let unit = (0..3)
        .map(|c| by_class[c].len() / CLASS_RATIO[c])
        .min()
        .unwrap()
        .min(cfg.max_examples / CLASS_RATIO.iter().sum::<usize>())
        .max(1);
    let mut chosen = Vec::new();
    for c in 0..3 {
        by_class[c].shuffle(&mut rng);
        chosen.extend(by_class[c].iter().take(unit * CLASS_RATIO[c]).copied());
    }
    chosen.shuffle(&mut rng);
    chosen
        .into_iter()
        .map(|i| {
            let it = &items[i];
            Ok(Labeled {
                input: bipersona_input(
                    &vocab.tokenize(it.text),
                    it.user,
                    it.robot,
                    tables,
                    vocab,
                    cfg.classifier.window,
                )?,
                label: it.label.index(),
            })
        })
        .collect()
}

pub struct BipersonaReport {
    pub train_losses: Vec<f64>,
    pub valid_accuracy: f64,
    pub test_accuracy: f64,
    pub sizes: [usize; 3],
}

pub fn train_bipersona_classifier(
    dialogues: &[Dialogue],
    tables: &AttributeTables,
    vocab: &Vocabulary,
    cfg: &BipersonaConfig,
) -> Result<(SequenceClassifier, BipersonaReport)> {
    let data = bipersona_examples(dialogues, tables, vocab, cfg, cfg.classifier.seed)?;
    let (train, valid, test) = split_811(&data, cfg.classifier.seed.wrapping_add(1));
    let mut clf = SequenceClassifier::new(cfg.classifier.clone(), vocab.len(), BIPERSONA_SEGMENTS, 3)?;
    let train_losses = clf.fit(&train)?;
    let valid_accuracy = if valid.is_empty() { f64::NAN } else { clf.accuracy(&valid)? };
    let test_accuracy = if test.is_empty() { f64::NAN } else { clf.accuracy(&test)? };
    Ok((
        clf,
        BipersonaReport {
            train_losses,
            valid_accuracy,
            test_accuracy,
            sizes: [train.len(), valid.len(), test.len()],
        },
    ))
}

/// `[p_user, p_robot, p_none]` for one response.
pub fn persona_probabilities(
    clf: &SequenceClassifier,
    response: &[usize],
    user: &Profile,
    robot: &Profile,
    tables: &AttributeTables,
    vocab: &Vocabulary,
) -> Result<[f64; 3]> {
    let x = bipersona_input(response, user, robot, tables, vocab, clf.config.window)?;
    let p = clf.probabilities(&x)?;
    Ok([p[0], p[1], p[2]])
}
