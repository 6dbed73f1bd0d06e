// SPDX-License-Identifier: Apache-2.0

use bpdg_tensor::Graph;
use serde::{Deserialize, Serialize};

use super::beam::{beam_search, BeamConfig, Candidate, StepScorer};
use super::cmim::{cmim_select, select_index, DEFAULT_LAMBDA3};
use super::relevance::relevance_score;
use crate::classifier::SequenceClassifier;
use crate::corpus::{AttributeTables, Profile, Speaker, Vocabulary};
use crate::error::{BpdgError, Result};
use crate::fusion::{FusionWeights, WeightMode, WeightSource};
use crate::model::{prepare_context, BpdgModel, DecodeContext, Prepared, WeightPolicy};

/// Decoder steps over a fixed context under one weight policy.
pub struct ModelStepper<'a> {
    pub model: &'a BpdgModel,
    pub ctx: DecodeContext,
    pub policy: WeightPolicy,
}

impl<'a> ModelStepper<'a> {
    pub fn new(model: &'a BpdgModel, ex: &Prepared, mode: WeightMode) -> Result<Self> {
        Ok(Self {
            model,
            ctx: model.decode_context(ex)?,
            policy: decode_policy(model, mode),
        })
    }

    /// Mean fusion weights over the decoder rows that produced `tokens`.
    pub fn mean_weights(&self, tokens: &[usize]) -> Result<FusionWeights> {
        let mut g = Graph::new(&self.model.store, false);
        let inputs = self.ctx.insert(&mut g);
        let out = self.model.decoder_forward(&mut g, &inputs, &[tokens], self.policy)?;
        let w = g.value(out.weights);
        let mut m = [0.0; 3];
        for i in 0..w.rows() {
            for (k, x) in w.row(i).iter().enumerate() {
                m[k] += x / w.rows() as f64;
            }
        }
        Ok(FusionWeights {
            alpha: m[0],
            beta: m[1],
            gamma: m[2],
            source: match self.policy {
                WeightPolicy::Predicted => WeightSource::Predicted,
                WeightPolicy::Fixed(_) => WeightSource::Override,
            },
        })
    }
}

impl StepScorer for ModelStepper<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn next_log_probs(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .model
            .step_log_probs(&self.ctx, prefixes, self.policy)?
            .into_iter()
            .map(|(lp, _)| lp)
            .collect())
    }
}

/// Overrides win; otherwise the model's own training-time policy.
pub fn decode_policy(model: &BpdgModel, mode: WeightMode) -> WeightPolicy {
    match mode.fixed() {
        Some(w) => WeightPolicy::Fixed(w),
        None => model.training_policy(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateOptions {
    pub beam: BeamConfig,
    pub mode: WeightMode,
    pub use_cmim: bool,
    pub lambda3: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            mode: WeightMode::Auto,
            use_cmim: true,
            lambda3: DEFAULT_LAMBDA3,
        }
    }
}

/// Trained pieces the generation pipeline reads.
#[derive(Clone, Copy)]
pub struct Artifacts<'a> {
    pub model: &'a BpdgModel,
    pub relevance: Option<&'a SequenceClassifier>,
    pub vocab: &'a Vocabulary,
    pub tables: &'a AttributeTables,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<usize>,
    pub candidates: Vec<Candidate>,
    pub selected: usize,
    pub weights: FusionWeights,
}

/// One line of a candidate dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub rank: usize,
    pub tokens: Vec<String>,
    pub gen_score: f64,
    pub rel_score: Option<f64>,
    pub objective: f64,
    pub selected: bool,
}

impl Generation {
    pub fn candidate_records(&self, vocab: &Vocabulary, lambda3: f64) -> Vec<CandidateRecord> {
        self.candidates
            .iter()
            .enumerate()
            .map(|(i, c)| CandidateRecord {
                rank: i + 1,
                tokens: c
                    .sequence()
                    .iter()
                    .map(|&t| vocab.token(t).unwrap_or("<unk>").to_string())
                    .collect(),
                gen_score: c.gen_score,
                rel_score: c.rel_score,
                objective: super::cmim::objective(c, lambda3),
                selected: i == self.selected,
            })
            .collect()
    }
}

/// Beam search over the context, then CMIM selection or the top beam.
/// `context` ends with the user's current utterance.
pub fn generate(
    art: Artifacts<'_>,
    context: &[(Speaker, &str)],
    user: &Profile,
    robot: &Profile,
    opts: &GenerateOptions,
) -> Result<Generation> {
    let ex = prepare_context(context, user, robot, art.vocab, art.tables, &art.model.config)?;
    let stepper = ModelStepper::new(art.model, &ex, opts.mode)?;
    let mut candidates = beam_search(&stepper, &opts.beam)?;
    if candidates.is_empty() {
        return Err(BpdgError::Contract("beam search produced no candidates".into()));
    }
    let selected = if opts.use_cmim {
        let clf = art
            .relevance
            .ok_or_else(|| BpdgError::Config("candidate selection needs a relevance classifier".into()))?;
        let n = context.len();
        let history: Vec<Vec<usize>> = context[..n.saturating_sub(1)]
            .iter()
            .map(|(_, t)| art.vocab.tokenize(t))
            .collect();
        cmim_select(&mut candidates, opts.lambda3, |c| {
            relevance_score(clf, &c.tokens, &history, user, robot, art.tables, art.vocab)
        })?;
        select_index(&candidates, opts.lambda3)?
    } else {
        0
    };
    let tokens = candidates[selected].tokens.clone();
    Ok(Generation {
        text: art.vocab.detokenize(&tokens),
        weights: stepper.mean_weights(&tokens)?,
        tokens,
        candidates,
        selected,
    })
}
