// SPDX-License-Identifier: Apache-2.0

//! Binary classifier of whether a response belongs with a history and a
//! pair of profiles; its positive-class log-probability is the relevance
//! score used in candidate selection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, ClassifierInput, Labeled, SequenceClassifier};
use crate::corpus::{AttributeTables, Dialogue, Profile, Speaker, Vocabulary, SEP};
use crate::error::{BpdgError, Result};

/// Response, history, user profile, robot profile.
pub const RELEVANCE_SEGMENTS: usize = 4;
pub const POSITIVE: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceConfig {
    pub classifier: ClassifierConfig,
    /// Cap on positive examples; each has one negative.
    pub max_pairs: usize,
    /// Share of dialogues held out for accuracy.
    pub heldout_fraction: f64,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierConfig::default(),
            max_pairs: 4000,
            heldout_fraction: 0.1,
        }
    }
}

/// History utterances joined by SEP, oldest first.
pub fn join_history(history: &[Vec<usize>]) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, h) in history.iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend_from_slice(h);
    }
    out
}

/// `Y SEP H SEP U SEP R SEP`, with the history cut oldest-first to fit.
pub fn relevance_input(
    response: &[usize],
    history: &[Vec<usize>],
    user: &Profile,
    robot: &Profile,
    tables: &AttributeTables,
    vocab: &Vocabulary,
    window: usize,
) -> Result<ClassifierInput> {
    let mut x = ClassifierInput {
        segments: vec![
            response.to_vec(),
            join_history(history),
            vocab.tokenize(&user.to_text(tables)),
            vocab.tokenize(&robot.to_text(tables)),
        ],
    };
    x.fit(window, 1)?;
    Ok(x)
}

/// Robot turns of each dialogue with the history before the prompting
/// user turn; turns with nothing before that prompt are skipped.
fn robot_turns(d: &Dialogue, vocab: &Vocabulary) -> Vec<(Vec<usize>, Vec<Vec<usize>>)> {
    let toks: Vec<Vec<usize>> = d.turns.iter().map(|t| vocab.tokenize(&t.text)).collect();
    d.turns
        .iter()
        .enumerate()
        .filter(|(i, t)| t.speaker == Speaker::Robot && *i >= 3)
        .map(|(i, _)| (toks[i].clone(), toks[..i - 1].to_vec()))
        .collect()
}

/// Positives are robot turns in place; each negative keeps the history
/// and profiles but takes a robot turn from another dialogue.
pub fn relevance_examples(
    dialogues: &[Dialogue],
    tables: &AttributeTables,
    vocab: &Vocabulary,
    cfg: &RelevanceConfig,
    seed: u64,
) -> Result<Vec<Labeled>> {
    if dialogues.len() < 2 {
        return Err(BpdgError::Data("relevance negatives need at least two dialogues".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: Vec<_> = dialogues.iter().map(|d| robot_turns(d, vocab)).collect();
    let mut slots: Vec<(usize, usize)> = per
        .iter()
        .enumerate()
        .flat_map(|(d, ts)| (0..ts.len()).map(move |t| (d, t)))
        .collect();
    slots.shuffle(&mut rng);
    slots.truncate(cfg.max_pairs);
    let w = cfg.classifier.window;
    let mut out = Vec::with_capacity(2 * slots.len());
    for (di, ti) in slots {
        let d = &dialogues[di];
        let (y, h) = &per[di][ti];
        out.push(Labeled {
            input: relevance_input(y, h, &d.user_profile, &d.robot_profile, tables, vocab, w)?,
            label: POSITIVE,
        });
        let mut other = rng.random_range(0..dialogues.len() - 1);
        if other >= di {
            other += 1;
        }
        let ts = &per[other];
        if ts.is_empty() {
            continue;
        }
        let (y2, _) = &ts[rng.random_range(0..ts.len())];
        out.push(Labeled {
            input: relevance_input(y2, h, &d.user_profile, &d.robot_profile, tables, vocab, w)?,
            label: 1 - POSITIVE,
        });
    }
    out.shuffle(&mut rng);
    Ok(out)
}

pub struct RelevanceReport {
    pub train_losses: Vec<f64>,
    pub heldout_accuracy: f64,
    pub sizes: [usize; 2],
}

/// Trains on all but a seeded held-out share of the dialogues.
pub fn train_relevance(
    dialogues: &[Dialogue],
    tables: &AttributeTables,
    vocab: &Vocabulary,
    cfg: &RelevanceConfig,
) -> Result<(SequenceClassifier, RelevanceReport)> {
    if dialogues.len() < 2 {
        return Err(BpdgError::Data("relevance negatives need at least two dialogues".into()));
    }
    let seed = cfg.classifier.seed;
    let mut idx: Vec<usize> = (0..dialogues.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x4E1E_7A4C));
    let nh = ((dialogues.len() as f64 * cfg.heldout_fraction).round() as usize).min(dialogues.len() - 2);
    let pick = |r: &[usize]| -> Vec<Dialogue> { r.iter().map(|&i| dialogues[i].clone()).collect() };
    let (held, train) = (pick(&idx[..nh]), pick(&idx[nh..]));
    let train_set = relevance_examples(&train, tables, vocab, cfg, seed.wrapping_add(1))?;
    let mut clf = SequenceClassifier::new(cfg.classifier.clone(), vocab.len(), RELEVANCE_SEGMENTS, 2)?;
    let train_losses = clf.fit(&train_set)?;
    let (heldout_accuracy, nh_ex) = if held.len() >= 2 {
        let h = relevance_examples(&held, tables, vocab, cfg, seed.wrapping_add(2))?;
        (clf.accuracy(&h)?, h.len())
    } else {
        (f64::NAN, 0)
    };
    Ok((
        clf,
        RelevanceReport {
            train_losses,
            heldout_accuracy,
            sizes: [train_set.len(), nh_ex],
        },
    ))
}

/// `log P(relevant | Y, H, U, R)`.
pub fn relevance_score(
    clf: &SequenceClassifier,
    response: &[usize],
    history: &[Vec<usize>],
    user: &Profile,
    robot: &Profile,
    tables: &AttributeTables,
    vocab: &Vocabulary,
) -> Result<f64> {
    let x = relevance_input(response, history, user, robot, tables, vocab, clf.config.window)?;
    Ok(clf.log_probabilities(&x)?[POSITIVE])
}
