// SPDX-License-Identifier: Apache-2.0

//! Pre-norm causal transformer stack shared by every encoding role, and
//! the tied output projection.

use std::ops::Range;

use bpdg_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BpdgError, Result};
use crate::init::{normal_tensor, INIT_STD};

pub const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Longest sequence any stack pass accepts.
    pub window: usize,
    /// Rows per utterance in the context layout.
    pub n: usize,
    /// History utterances kept before the current input.
    pub l_max: usize,
    pub vocab_size: usize,
    pub num_areas: usize,
    pub num_interests: usize,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize, num_areas: usize, num_interests: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            window: 256,
            n: 64,
            l_max: 8,
            vocab_size,
            num_areas,
            num_interests,
            init_std: INIT_STD,
        }
    }

    /// Twelve 768-wide blocks; far too slow for this crate's CPU kernels
    /// but kept for completeness.
    pub fn large(vocab_size: usize, num_areas: usize, num_interests: usize) -> Self {
        Self {
            layers: 12,
            heads: 12,
            d_model: 768,
            d_ff: 3072,
            window: 512,
            n: 64,
            l_max: 8,
            vocab_size,
            num_areas,
            num_interests,
            init_std: INIT_STD,
        }
    }

    pub fn preset(name: &str, vocab_size: usize, num_areas: usize, num_interests: usize) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy(vocab_size, num_areas, num_interests)),
            "large" => Ok(Self::large(vocab_size, num_areas, num_interests)),
            other => Err(BpdgError::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(BpdgError::Config(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_model % 2 != 0 {
            return fail(format!("d_model {} must be even", self.d_model));
        }
        if self.window < self.n || self.n == 0 {
            return fail(format!("window {} must be >= n {} >= 1", self.window, self.n));
        }
        if self.vocab_size == 0 || self.num_areas == 0 || self.num_interests == 0 || self.d_ff == 0 {
            return fail("table sizes and d_ff must be positive".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail("init_std must be positive".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttnIds {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize, std: f64) -> Self {
        let mut w = |n: &str| store.add(format!("{prefix}.{n}"), normal_tensor(rng, &[d, d], std));
        let wq = w("wq");
        let wk = w("wk");
        let wv = w("wv");
        let wo = w("wo");
        let mut b = |n: &str| store.add(format!("{prefix}.{n}"), Tensor::zeros(&[d]));
        Self {
            wq,
            bq: b("bq"),
            wk,
            bk: b("bk"),
            wv,
            bv: b("bv"),
            wo,
            bo: b("bo"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormIds {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockIds {
    pub ln1: LayerNormIds,
    pub attn: AttnIds,
    pub ln2: LayerNormIds,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Transformer blocks plus a closing layer norm when there is at least one
/// block, so an empty stack is the identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackIds {
    pub blocks: Vec<BlockIds>,
    pub final_ln: Option<LayerNormIds>,
}

impl StackIds {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cfg: &ModelConfig) -> Self {
        let (d, f, std) = (cfg.d_model, cfg.d_ff, cfg.init_std);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("{prefix}.{i}");
                let ln1 = LayerNormIds::register(store, &format!("{p}.ln1"), d);
                let attn = AttnIds::register(store, rng, &format!("{p}.attn"), d, std);
                let ln2 = LayerNormIds::register(store, &format!("{p}.ln2"), d);
                BlockIds {
                    ln1,
                    attn,
                    ln2,
                    w1: store.add(format!("{p}.ff.w1"), normal_tensor(rng, &[d, f], std)),
                    b1: store.add(format!("{p}.ff.b1"), Tensor::zeros(&[f])),
                    w2: store.add(format!("{p}.ff.w2"), normal_tensor(rng, &[f, d], std)),
                    b2: store.add(format!("{p}.ff.b2"), Tensor::zeros(&[d])),
                }
            })
            .collect();
        let final_ln = (cfg.layers > 0).then(|| LayerNormIds::register(store, &format!("{prefix}.ln_f"), d));
        Self { blocks, final_ln }
    }
}

/// Which keys each query may see.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttnMask<'a> {
    /// Forbid keys after the query position.
    pub causal: bool,
    /// Keys flagged true are removed.
    pub key_pad: Option<&'a [bool]>,
    /// Self-attention over several independent sequences stacked by rows;
    /// queries only see keys of their own span.
    pub segments: Option<&'a [Range<usize>]>,
}

fn linear(g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

fn additive_mask(lq: usize, lk: usize, causal: bool, key_pad: Option<&[bool]>) -> Option<Tensor> {
    if !causal && !key_pad.is_some_and(|p| p.iter().any(|&x| x)) {
        return None;
    }
    let mut m = Tensor::zeros(&[lq, lk]);
    for i in 0..lq {
        let row = m.row_mut(i);
        for (j, r) in row.iter_mut().enumerate() {
            if (causal && j > i) || key_pad.is_some_and(|p| p[j]) {
                *r = MASKED;
            }
        }
    }
    Some(m)
}

/// Projects keys and values once so several query sets can reuse them.
pub fn project_kv(g: &mut Graph<'_>, a: &AttnIds, kv_in: Var) -> Result<(Var, Var)> {
    let k = linear(g, kv_in, a.wk, a.bk)?;
    let v = linear(g, kv_in, a.wv, a.bv)?;
    Ok((k, v))
}

fn heads_core(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Tensor>,
) -> Result<Var> {
    let d = g.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = mask.map(|m| g.constant(m));
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = g.matmul_nt(qh, kh)?;
        let mut s = g.scale(s, scale);
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let p = g.softmax(s, 1)?;
        outs.push(g.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        Ok(g.concat_cols(&outs)?)
    }
}

/// Scaled dot-product attention of `q_in` over projected keys and values,
/// heads concatenated and projected.
pub fn attend(
    g: &mut Graph<'_>,
    a: &AttnIds,
    q_in: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: AttnMask<'_>,
) -> Result<Var> {
    let (dq, dk) = (g.shape(q_in)[1], g.shape(k)[1]);
    if dq != dk || dq % heads != 0 {
        return Err(BpdgError::Contract(format!(
            "attention widths: query {dq}, key {dk}, heads {heads}"
        )));
    }
    let (lq, lk) = (g.shape(q_in)[0], g.shape(k)[0]);
    if let Some(p) = mask.key_pad {
        if p.len() != lk {
            return Err(BpdgError::Contract(format!(
                "key mask has {} entries for {lk} keys",
                p.len()
            )));
        }
    }
    let q = linear(g, q_in, a.wq, a.bq)?;
    let out = match mask.segments {
        Some(segs) if segs.len() > 1 || segs.first().is_some_and(|r| r.len() != lq) => {
            if lq != lk {
                return Err(BpdgError::Contract("segmented attention needs self-attention shapes".into()));
            }
            let mut expect = 0;
            let mut parts = Vec::with_capacity(segs.len());
            for r in segs {
                if r.start != expect || r.end > lq {
                    return Err(BpdgError::Contract("segments must tile the rows in order".into()));
                }
                expect = r.end;
                let n = r.len();
                let qs = g.slice_rows(q, r.start, n)?;
                let ks = g.slice_rows(k, r.start, n)?;
                let vs = g.slice_rows(v, r.start, n)?;
                let pad = mask.key_pad.map(|p| &p[r.clone()]);
                let m = additive_mask(n, n, mask.causal, pad);
                parts.push(heads_core(g, qs, ks, vs, heads, m)?);
            }
            if expect != lq {
                return Err(BpdgError::Contract("segments must tile the rows in order".into()));
            }
            g.concat_rows(&parts)?
        }
        _ => {
            let m = additive_mask(lq, lk, mask.causal, mask.key_pad);
            heads_core(g, q, k, v, heads, m)?
        }
    };
    linear(g, out, a.wo, a.bo)
}

pub fn multi_head_attention(
    g: &mut Graph<'_>,
    a: &AttnIds,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    mask: AttnMask<'_>,
) -> Result<Var> {
    let (k, v) = project_kv(g, a, kv_in)?;
    attend(g, a, q_in, k, v, heads, mask)
}

fn block(g: &mut Graph<'_>, b: &BlockIds, x: Var, heads: usize, mask: AttnMask<'_>) -> Result<Var> {
    let h = b.ln1.apply(g, x)?;
    let a = multi_head_attention(g, &b.attn, h, h, heads, mask)?;
    let x = g.add(x, a)?;
    let h = b.ln2.apply(g, x)?;
    let h = linear(g, h, b.w1, b.b1)?;
    let h = g.gelu(h);
    let h = linear(g, h, b.w2, b.b2)?;
    Ok(g.add(x, h)?)
}

/// Runs the causal stack over `x` (rows are positions).
pub fn encode(
    g: &mut Graph<'_>,
    stack: &StackIds,
    cfg: &ModelConfig,
    x: Var,
    key_pad: Option<&[bool]>,
    segments: Option<&[Range<usize>]>,
) -> Result<Var> {
    encode_masked(g, stack, cfg, x, true, key_pad, segments)
}

/// `encode` with a choice of causal or full self-attention.
pub fn encode_masked(
    g: &mut Graph<'_>,
    stack: &StackIds,
    cfg: &ModelConfig,
    x: Var,
    causal: bool,
    key_pad: Option<&[bool]>,
    segments: Option<&[Range<usize>]>,
) -> Result<Var> {
    let rows = g.shape(x)[0];
    let longest = segments.map_or(rows, |s| s.iter().map(|r| r.len()).max().unwrap_or(0));
    if longest > cfg.window {
        return Err(BpdgError::Capacity(format!(
            "sequence of {longest} rows exceeds the {}-row window",
            cfg.window
        )));
    }
    let mask = AttnMask {
        causal,
        key_pad,
        segments,
    };
    let mut h = x;
    for b in &stack.blocks {
        h = block(g, b, h, cfg.heads, mask)?;
    }
    match &stack.final_ln {
        Some(ln) => ln.apply(g, h),
        None => Ok(h),
    }
}

/// `decoded · tokenᵀ`: no bias, so the map is linear.
pub fn project_logits(g: &mut Graph<'_>, token_table: ParamId, decoded: Var) -> Result<Var> {
    let t = g.param(token_table);
    Ok(g.matmul_nt(decoded, t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(layers: usize) -> (ParamStore, StackIds, ModelConfig) {
        let mut cfg = ModelConfig::toy(11, 3, 3);
        cfg.layers = layers;
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.d_ff = 16;
        cfg.window = 16;
        cfg.n = 4;
        cfg.init_std = 0.5;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = StackIds::register(&mut store, &mut rng, "stack", &cfg);
        (store, stack, cfg)
    }

    fn input(rows: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal_tensor(&mut rng, &[rows, 8], 1.0)
    }

    #[test]
    fn empty_stack_is_identity() {
        let (store, stack, cfg) = setup(0);
        let mut g = Graph::new(&store, false);
        let xt = input(5, 1);
        let x = g.constant(xt.clone());
        let y = encode(&mut g, &stack, &cfg, x, None, None).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn over_length_is_capacity_error() {
        let (store, stack, cfg) = setup(1);
        let mut g = Graph::new(&store, false);
        let x = g.constant(input(17, 1));
        assert!(matches!(
            encode(&mut g, &stack, &cfg, x, None, None),
            Err(BpdgError::Capacity(_))
        ));
    }

    #[test]
    fn segments_equal_separate_runs() {
        let (store, stack, cfg) = setup(2);
        let a = input(3, 2);
        let b = input(4, 3);
        let run = |t: &Tensor| {
            let mut g = Graph::new(&store, false);
            let x = g.constant(t.clone());
            let y = encode(&mut g, &stack, &cfg, x, None, None).unwrap();
            g.value(y).clone()
        };
        let (ya, yb) = (run(&a), run(&b));
        let mut g = Graph::new(&store, false);
        let xa = g.constant(a);
        let xb = g.constant(b);
        let x = g.concat_rows(&[xa, xb]).unwrap();
        let segs = [0..3, 3..7];
        let y = encode(&mut g, &stack, &cfg, x, None, Some(&segs)).unwrap();
        let y = g.value(y);
        assert!(ya.max_abs_diff(&y.select_rows(&[0, 1, 2])) < 1e-12);
        assert!(yb.max_abs_diff(&y.select_rows(&[3, 4, 5, 6])) < 1e-12);
    }

    #[test]
    fn key_mask_length_is_checked() {
        let (store, stack, cfg) = setup(1);
        let mut g = Graph::new(&store, false);
        let x = g.constant(input(3, 1));
        let pad = [false, true];
        assert!(matches!(
            encode(&mut g, &stack, &cfg, x, Some(&pad), None),
            Err(BpdgError::Contract(_))
        ));
    }
}
