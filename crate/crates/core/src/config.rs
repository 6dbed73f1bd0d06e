// SPDX-License-Identifier: Apache-2.0

//! One record holding every tunable of a run. Files and flags are merged
//! into it by the CLI; `resolve` then derives the per-component seeds and
//! validates everything before any work starts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::corpus::vocab::{DEFAULT_MIN_FREQ, DEFAULT_RARE_THRESHOLD};
use crate::corpus::SynthConfig;
use crate::decoding::{BeamConfig, GenerateOptions, RelevanceConfig, DEFAULT_LAMBDA3};
use crate::error::{BpdgError, Result};
use crate::eval::BipersonaConfig;
use crate::fusion::WeightMode;
use crate::model::Ablation;
use crate::training::TrainingConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Large,
}

/// Fields left unset keep the preset's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub window: Option<usize>,
    pub n: Option<usize>,
    pub l_max: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: u64,
    pub rare_threshold: u64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_freq: DEFAULT_MIN_FREQ,
            rare_threshold: DEFAULT_RARE_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub beam: BeamConfig,
    pub mode: WeightMode,
    pub use_cmim: bool,
    pub lambda3: f64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            mode: WeightMode::Auto,
            use_cmim: true,
            lambda3: DEFAULT_LAMBDA3,
        }
    }
}

impl DecodingConfig {
    pub fn options(&self) -> GenerateOptions {
        GenerateOptions {
            beam: self.beam.clone(),
            mode: self.mode,
            use_cmim: self.use_cmim,
            lambda3: self.lambda3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; component seeds are derived from it by `resolve`.
    pub seed: u64,
    pub preset: Preset,
    pub model: ModelOverrides,
    pub ablation: Ablation,
    pub vocab: VocabConfig,
    pub corpus: SynthConfig,
    pub training: TrainingConfig,
    pub decoding: DecodingConfig,
    pub relevance: RelevanceConfig,
    pub bipersona: BipersonaConfig,
}

pub const RELEVANCE_SEED_OFFSET: u64 = 101;
pub const BIPERSONA_SEED_OFFSET: u64 = 202;

impl RunConfig {
    /// Training defaults follow the preset unless set explicitly later.
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            preset,
            training: match preset {
                Preset::Toy => TrainingConfig::default(),
                Preset::Large => TrainingConfig::large(),
            },
            ..Self::default()
        }
    }

    /// Copies the master seed into every component and validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.training.seed = self.seed;
        self.relevance.classifier.seed = self.seed.wrapping_add(RELEVANCE_SEED_OFFSET);
        self.bipersona.classifier.seed = self.seed.wrapping_add(BIPERSONA_SEED_OFFSET);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.training.validate()?;
        if self.vocab.min_freq < 1 {
            return Err(BpdgError::Config("vocab.min_freq must be at least 1".into()));
        }
        if self.decoding.beam.beam < 1 || self.decoding.beam.max_len < 1 {
            return Err(BpdgError::Config("decoding.beam needs beam >= 1 and max_len >= 1".into()));
        }
        if !self.decoding.lambda3.is_finite() {
            return Err(BpdgError::Config("decoding.lambda3 must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.relevance.heldout_fraction) {
            return Err(BpdgError::Config("relevance.heldout_fraction must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.bipersona.counterfactual_rate) {
            return Err(BpdgError::Config("bipersona.counterfactual_rate must be in [0,1]".into()));
        }
        Ok(())
    }

    /// The generator architecture for a given vocabulary and attribute
    /// inventory.
    pub fn model_config(&self, vocab_size: usize, num_areas: usize, num_interests: usize) -> Result<ModelConfig> {
        let mut c = match self.preset {
            Preset::Toy => ModelConfig::toy(vocab_size, num_areas, num_interests),
            Preset::Large => ModelConfig::large(vocab_size, num_areas, num_interests),
        };
        let o = &self.model;
        c.layers = o.layers.unwrap_or(c.layers);
        c.heads = o.heads.unwrap_or(c.heads);
        c.d_model = o.d_model.unwrap_or(c.d_model);
        c.d_ff = o.d_ff.unwrap_or(c.d_ff);
        c.window = o.window.unwrap_or(c.window);
        c.n = o.n.unwrap_or(c.n);
        c.l_max = o.l_max.unwrap_or(c.l_max);
        c.validate()?;
        Ok(c)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("run config always serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
