// SPDX-License-Identifier: Apache-2.0

//! Persona-aware fusion of the prefix, profile and context encodings.

use std::ops::Range;

use bpdg_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{attend, AttnIds, AttnMask, ModelConfig};
use crate::error::{BpdgError, Result};
use crate::init::normal_tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    Predicted,
    Override,
}

/// Coefficients for the user profile, robot profile and context encodings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub source: WeightSource,
}

impl FusionWeights {
    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    fn from_probs(p: &[f64], source: WeightSource) -> Self {
        Self {
            alpha: p[0],
            beta: p[1],
            gamma: p[2],
            source,
        }
    }
}

/// How fusion weights are chosen at decode time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    #[default]
    Auto,
    Alpha1,
    Beta1,
    Gamma1,
}

impl WeightMode {
    pub fn fixed(self) -> Option<[f64; 3]> {
        match self {
            Self::Auto => None,
            Self::Alpha1 => Some([1.0, 0.0, 0.0]),
            Self::Beta1 => Some([0.0, 1.0, 0.0]),
            Self::Gamma1 => Some([0.0, 0.0, 1.0]),
        }
    }

    pub fn override_weights(self) -> Option<FusionWeights> {
        self.fixed().map(|p| FusionWeights::from_probs(&p, WeightSource::Override))
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "alpha1" => Ok(Self::Alpha1),
            "beta1" => Ok(Self::Beta1),
            "gamma1" => Ok(Self::Gamma1),
            other => Err(BpdgError::Config(format!(
                "unknown weight mode {other:?} (expected auto, alpha1, beta1 or gamma1)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Auto => "auto",
            Self::Alpha1 => "alpha1",
            Self::Beta1 => "beta1",
            Self::Gamma1 => "gamma1",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionIds {
    /// Shared by the user and robot profile encodings.
    pub persona_attn: AttnIds,
    pub context_attn: AttnIds,
    pub prev_attn: AttnIds,
    pub head: HeadIds,
}

impl FusionIds {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let (d, std) = (cfg.d_model, cfg.init_std);
        let persona_attn = AttnIds::register(store, rng, "fusion.persona_attn", d, std);
        let context_attn = AttnIds::register(store, rng, "fusion.context_attn", d, std);
        let prev_attn = AttnIds::register(store, rng, "fusion.prev_attn", d, std);
        let head = HeadIds {
            w1: store.add("fusion.head.w1", normal_tensor(rng, &[d, d], std)),
            b1: store.add("fusion.head.b1", Tensor::zeros(&[d])),
            w2: store.add("fusion.head.w2", normal_tensor(rng, &[d, 3], std)),
            b2: store.add("fusion.head.b2", Tensor::zeros(&[3])),
        };
        Self {
            persona_attn,
            context_attn,
            prev_attn,
            head,
        }
    }

    pub fn head_params(&self) -> [ParamId; 4] {
        [self.head.w1, self.head.b1, self.head.w2, self.head.b2]
    }
}

/// Projected keys and values of one encoding.
#[derive(Clone, Copy, Debug)]
pub struct KeyValue {
    pub k: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Encodings {
    pub o_prev: Var,
    pub o_u: Var,
    pub o_r: Var,
    pub o_c: Var,
}

/// Cross-attention of the prefix encoding over the two profiles and the
/// context, and causal self-attention over the prefix itself.
pub fn compute_encodings(
    g: &mut Graph<'_>,
    ids: &FusionIds,
    heads: usize,
    e_prev: Var,
    prev_segments: Option<&[Range<usize>]>,
    u: KeyValue,
    r: KeyValue,
    c: KeyValue,
) -> Result<Encodings> {
    let d = g.shape(e_prev)[1];
    for kv in [u, r, c] {
        if g.shape(kv.k)[1] != d || g.shape(kv.v)[1] != d {
            return Err(BpdgError::Contract(format!(
                "encoding width {} does not match prefix width {d}",
                g.shape(kv.k)[1]
            )));
        }
    }
    let open = AttnMask::default();
    let o_u = attend(g, &ids.persona_attn, e_prev, u.k, u.v, heads, open)?;
    let o_r = attend(g, &ids.persona_attn, e_prev, r.k, r.v, heads, open)?;
    let o_c = attend(g, &ids.context_attn, e_prev, c.k, c.v, heads, open)?;
    let (pk, pv) = crate::backbone::project_kv(g, &ids.prev_attn, e_prev)?;
    let causal = AttnMask {
        causal: true,
        key_pad: None,
        segments: prev_segments,
    };
    let o_prev = attend(g, &ids.prev_attn, e_prev, pk, pv, heads, causal)?;
    Ok(Encodings { o_prev, o_u, o_r, o_c })
}

fn head_mlp(g: &mut Graph<'_>, head: &HeadIds, pooled: Var) -> Result<Var> {
    let w1 = g.param(head.w1);
    let b1 = g.param(head.b1);
    let w2 = g.param(head.w2);
    let b2 = g.param(head.b2);
    let h = g.matmul(pooled, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.tanh(h);
    let y = g.matmul(h, w2)?;
    Ok(g.add_row(y, b2)?)
}

/// Lower-triangular averaging matrix: row i is the mean of rows 0..=i.
pub fn prefix_mean_matrix(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let w = 1.0 / (i + 1) as f64;
        m.row_mut(i)[..=i].iter_mut().for_each(|x| *x = w);
    }
    m
}

/// Presence logits `[L,3]` where row t sees the mean of `O_C` rows up to
/// t within its segment, so every decoding step has its own weights.
pub fn presence_logits(
    g: &mut Graph<'_>,
    head: &HeadIds,
    o_c: Var,
    segments: &[Range<usize>],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(segments.len());
    for r in segments {
        let rows = g.slice_rows(o_c, r.start, r.len())?;
        let a = g.constant(prefix_mean_matrix(r.len()));
        parts.push(g.matmul(a, rows)?);
    }
    let pooled = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    head_mlp(g, head, pooled)
}

/// Masked mean-pool of `O_C`, perceptron, softmax.
pub fn predict_presence(
    g: &mut Graph<'_>,
    head: &HeadIds,
    o_c: Var,
    pad: Option<&[bool]>,
) -> Result<FusionWeights> {
    let rows: Vec<usize> = (0..g.shape(o_c)[0])
        .filter(|&i| pad.is_none_or(|p| !p[i]))
        .collect();
    if rows.is_empty() {
        return Err(BpdgError::Contract("presence prediction over an all-pad sequence".into()));
    }
    let kept = g.gather_rows(o_c, &rows)?;
    let pooled = g.mean_rows(kept)?;
    let logits = head_mlp(g, head, pooled)?;
    let p = g.softmax(logits, 1)?;
    Ok(FusionWeights::from_probs(g.value(p).data(), WeightSource::Predicted))
}

/// Per-row `α·O_U + β·O_R + (γ+1)·O_C + O_prev` with `weights` `[L,3]`.
pub fn fuse(g: &mut Graph<'_>, enc: &Encodings, weights: Var) -> Result<Var> {
    let shape = g.shape(enc.o_c).to_vec();
    for v in [enc.o_u, enc.o_r, enc.o_prev] {
        if g.shape(v) != shape.as_slice() {
            return Err(BpdgError::Contract(format!(
                "fuse shapes differ: {:?} vs {shape:?}",
                g.shape(v)
            )));
        }
    }
    if g.shape(weights) != [shape[0], 3] {
        return Err(BpdgError::Contract(format!(
            "fusion weights {:?} for {} rows",
            g.shape(weights),
            shape[0]
        )));
    }
    let a = g.slice_cols(weights, 0, 1)?;
    let b = g.slice_cols(weights, 1, 1)?;
    let c = g.slice_cols(weights, 2, 1)?;
    let au = g.scale_rows(enc.o_u, a)?;
    let br = g.scale_rows(enc.o_r, b)?;
    let cc = g.scale_rows(enc.o_c, c)?;
    let s = g.add(au, br)?;
    let s = g.add(s, cc)?;
    let s = g.add(s, enc.o_c)?;
    Ok(g.add(s, enc.o_prev)?)
}

/// A constant `[rows,3]` weight matrix repeating `w`.
pub fn constant_weights(g: &mut Graph<'_>, rows: usize, w: [f64; 3]) -> Var {
    let data = (0..rows).flat_map(|_| w).collect();
    g.constant(Tensor::new(vec![rows, 3], data).expect("rows x 3"))
}
