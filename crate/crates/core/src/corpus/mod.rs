// SPDX-License-Identifier: Apache-2.0

//! Dialogue schema, vocabulary, persona labelling and the synthetic corpus.

pub mod io;
pub mod label;
pub mod schema;
pub mod synth;
pub mod vocab;

pub use io::{
    format_corpus, format_tables, load_corpus, load_tables, parse_context, parse_corpus, save_corpus, save_tables,
    DialogueContext, CORPUS_HEADER,
};
pub use label::{heuristic_persona_label, label_dialogue, TieBreak};
pub use schema::{AttributeTables, Dialogue, PersonaLabel, Profile, Speaker, Utterance};
pub use synth::{generate_splits, generate_synthetic_corpus, PersonaRates, SynthConfig, SyntheticSplits};
pub use vocab::{build_vocab, build_vocab_from_texts, Vocabulary, BOS, EOS, PAD, SEP, UNK};
