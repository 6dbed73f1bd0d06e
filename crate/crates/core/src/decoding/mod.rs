// SPDX-License-Identifier: Apache-2.0

//! Candidate generation by beam search and final selection by relevance
//! penalised generation score.

pub mod beam;
pub mod cmim;
pub mod generate;
pub mod relevance;

pub use beam::{beam_search, greedy, rank_order, score_sequence, BeamConfig, Candidate, StepScorer};
pub use cmim::{cmim_select, objective, select_index, DEFAULT_LAMBDA3};
pub use generate::{decode_policy, generate, Artifacts, CandidateRecord, GenerateOptions, Generation, ModelStepper};
pub use relevance::{relevance_examples, relevance_input, relevance_score, train_relevance, RelevanceConfig};
