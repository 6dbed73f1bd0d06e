// SPDX-License-Identifier: Apache-2.0

//! Bilateral personalized dialogue generation at desk scale.
//!
//! A shared-weight causal transformer encodes the dialogue context and both
//! speakers' profiles; a fusion stage weights the profile encodings by the
//! predicted persona type of the next response; beam search produces
//! candidates that a relevance classifier re-ranks.

pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod init;
pub mod model;
pub mod training;

pub use error::{BpdgError, Result};
