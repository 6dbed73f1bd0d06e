// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::bipersona::persona_probabilities;
use super::metrics::{bleu2, bpacc_hard, bpacc_soft, corpus_bleu2, distinct, f1, perplexity_from_scores};
use crate::classifier::SequenceClassifier;
use crate::corpus::{Dialogue, TieBreak};
use crate::decoding::{decode_policy, generate, Artifacts, GenerateOptions};
use crate::error::{BpdgError, Result};
use crate::model::prepare;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean `p_user + p_robot` from the persona classifier.
    pub bpacc: f64,
    /// Share of responses classified as user or robot persona.
    pub bpacc_hard: f64,
    /// Corpus-level BLEU-2.
    pub bleu: f64,
    pub bleu_sentence_mean: f64,
    pub f1: f64,
    pub distinct: f64,
    pub ppl: f64,
    pub count: usize,
    pub mode: String,
    pub use_cmim: bool,
    pub lambda3: f64,
    pub beam: usize,
    pub checkpoint_digest: Option<String>,
    pub corpus_digest: Option<String>,
    pub run_config_digest: Option<String>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let unit = [self.bpacc, self.bpacc_hard, self.bleu, self.bleu_sentence_mean, self.f1, self.distinct];
        if unit.iter().any(|x| !(0.0..=1.0).contains(x)) || !(self.ppl.is_finite() && self.ppl > 0.0) {
            return Err(BpdgError::Numeric(format!("metric out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn from_text(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| BpdgError::Schema(format!("metric report: {e}")))
    }
}

/// Text metrics, persona metrics and perplexity for given hypotheses.
pub fn score_hypotheses(
    art: Artifacts<'_>,
    bipersona: &SequenceClassifier,
    dialogues: &[Dialogue],
    hyps: &[Vec<usize>],
    opts: &GenerateOptions,
) -> Result<MetricReport> {
    if dialogues.is_empty() {
        return Err(BpdgError::Data("evaluation corpus is empty".into()));
    }
    if hyps.len() != dialogues.len() {
        return Err(BpdgError::Contract("one hypothesis per dialogue required".into()));
    }
    let policy = decode_policy(art.model, opts.mode);
    let mut pairs = Vec::with_capacity(hyps.len());
    let mut probs = Vec::with_capacity(hyps.len());
    let mut scores = Vec::new();
    let (mut bs, mut fs) = (0.0, 0.0);
    for (d, h) in dialogues.iter().zip(hyps) {
        let ex = prepare(d, art.vocab, art.tables, &art.model.config, TieBreak::Robot)?;
        let r = ex.response.clone();
        bs += bleu2(h, &r);
        fs += f1(h, &r);
        probs.push(persona_probabilities(bipersona, h, &d.user_profile, &d.robot_profile, art.tables, art.vocab)?);
        let ctx = art.model.decode_context(&ex)?;
        scores.extend(art.model.reference_scores_with(&ctx, &ex, policy)?);
        pairs.push((h.clone(), r));
    }
    let n = dialogues.len() as f64;
    let report = MetricReport {
        bpacc: bpacc_soft(&probs),
        bpacc_hard: bpacc_hard(&probs),
        bleu: corpus_bleu2(&pairs),
        bleu_sentence_mean: bs / n,
        f1: fs / n,
        distinct: distinct(hyps)?,
        ppl: perplexity_from_scores(&scores, art.vocab)?,
        count: dialogues.len(),
        mode: opts.mode.name().into(),
        use_cmim: opts.use_cmim,
        lambda3: opts.lambda3,
        beam: opts.beam.beam,
        checkpoint_digest: None,
        corpus_digest: None,
        run_config_digest: None,
    };
    report.validate()?;
    Ok(report)
}

/// Generates one response per dialogue from its context and scores it.
pub fn evaluate(
    art: Artifacts<'_>,
    bipersona: &SequenceClassifier,
    dialogues: &[Dialogue],
    opts: &GenerateOptions,
) -> Result<(MetricReport, Vec<String>)> {
    let mut hyps = Vec::with_capacity(dialogues.len());
    let mut texts = Vec::with_capacity(dialogues.len());
    for d in dialogues {
        let ctx: Vec<_> = d.context().iter().map(|u| (u.speaker, u.text.as_str())).collect();
        let g = generate(art, &ctx, &d.user_profile, &d.robot_profile, opts)?;
        texts.push(g.text);
        hyps.push(g.tokens);
    }
    Ok((score_hypotheses(art, bipersona, dialogues, &hyps, opts)?, texts))
}
