// SPDX-License-Identifier: Apache-2.0

//! Automatic metrics, the persona classifier behind them, and the
//! evaluation driver.

pub mod bipersona;
pub mod metrics;
pub mod report;

pub use bipersona::{bipersona_examples, persona_probabilities, train_bipersona_classifier, BipersonaConfig};
pub use metrics::{
    bleu2, bpacc_hard, bpacc_soft, corpus_bleu2, distinct, f1, perplexity, perplexity_from_scores,
    SequenceScorer, TokenScore,
};
pub use report::{evaluate, score_hypotheses, MetricReport};
