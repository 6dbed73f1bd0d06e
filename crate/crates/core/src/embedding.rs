// SPDX-License-Identifier: Apache-2.0

//! Row layouts for context, profile and response-prefix sequences, and
//! their composition from token, persona and position embeddings.

use std::ops::Range;

use bpdg_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::corpus::schema::{MAX_EMBEDDED_INTERESTS, Profile, Speaker};
use crate::corpus::{AttributeTables, Vocabulary, BOS, PAD, SEP};
use crate::error::{BpdgError, Result};
use crate::init::normal_tensor;

/// Sinusoidal position table: even columns `sin(i / 10000^(2k/d))`, odd
/// columns the matching cosine.
pub fn position_encoding(len: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(BpdgError::Config(format!("position encoding width {d} must be even")));
    }
    let mut data = vec![0.0; len * d];
    for i in 0..len {
        for k in 0..d / 2 {
            let angle = i as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            data[i * d + 2 * k] = angle.sin();
            data[i * d + 2 * k + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![len, d], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingIds {
    pub token: ParamId,
    pub gender: ParamId,
    pub area: ParamId,
    pub interest: ParamId,
}

impl EmbeddingIds {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        vocab: usize,
        areas: usize,
        interests: usize,
        d: usize,
        std: f64,
    ) -> Self {
        Self {
            token: store.add("emb.token", normal_tensor(rng, &[vocab, d], std)),
            gender: store.add("emb.gender", normal_tensor(rng, &[2, d], std)),
            area: store.add("emb.area", normal_tensor(rng, &[areas, d], std)),
            interest: store.add("emb.interest", normal_tensor(rng, &[interests, d], std)),
        }
    }
}

/// Token ids with their positions, pad flags, and whose persona (if any)
/// is added to each row.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SeqLayout {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub pad: Vec<bool>,
    pub owner: Vec<Option<Speaker>>,
    /// Row span of each utterance, SEP rows excluded.
    pub segments: Vec<Range<usize>>,
}

impl SeqLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn push(&mut self, token: usize, position: usize, pad: bool, owner: Option<Speaker>) {
        self.tokens.push(token);
        self.positions.push(position);
        self.pad.push(pad);
        self.owner.push(owner);
    }

    fn append(&mut self, other: &SeqLayout) {
        let base = self.len();
        self.tokens.extend_from_slice(&other.tokens);
        self.positions.extend_from_slice(&other.positions);
        self.pad.extend_from_slice(&other.pad);
        self.owner.extend_from_slice(&other.owner);
        self.segments
            .extend(other.segments.iter().map(|r| r.start + base..r.end + base));
    }

    pub fn non_pad_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.pad[i]).collect()
    }

    /// Drops pad rows. Positions travel with their rows, so a causal
    /// encoder with pads masked gives the same non-pad outputs either way.
    pub fn compact(&self) -> SeqLayout {
        let keep = self.non_pad_rows();
        let mut map = vec![0; self.len() + 1];
        let mut k = 0;
        for i in 0..self.len() {
            map[i] = k;
            if !self.pad[i] {
                k += 1;
            }
        }
        map[self.len()] = k;
        SeqLayout {
            tokens: keep.iter().map(|&i| self.tokens[i]).collect(),
            positions: keep.iter().map(|&i| self.positions[i]).collect(),
            pad: vec![false; keep.len()],
            owner: keep.iter().map(|&i| self.owner[i]).collect(),
            segments: self.segments.iter().map(|r| map[r.start]..map[r.end]).collect(),
        }
    }

    /// Next-token targets: row i predicts the token of row i+1. Rows
    /// where either side is a pad, and the last row, get `PAD`.
    pub fn lm_targets(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| {
                if i + 1 < self.len() && !self.pad[i] && !self.pad[i + 1] {
                    self.tokens[i + 1]
                } else {
                    PAD
                }
            })
            .collect()
    }
}

/// One utterance padded or truncated to exactly `n` rows.
pub fn utterance_layout(ids: &[usize], speaker: Speaker, n: usize, offset: usize) -> SeqLayout {
    let mut l = SeqLayout::default();
    for j in 0..n {
        match ids.get(j) {
            Some(&t) => l.push(t, offset + j, false, Some(speaker)),
            None => l.push(PAD, offset + j, true, Some(speaker)),
        }
    }
    l.segments.push(0..n);
    l
}

/// History plus current input, most recent last, joined by SEP rows.
///
/// Keeps the current input and at most `l_max` preceding utterances, and
/// drops older ones while the total exceeds `window`.
pub fn context_layout(
    turns: &[(Speaker, Vec<usize>)],
    n: usize,
    l_max: usize,
    window: usize,
) -> Result<SeqLayout> {
    if turns.is_empty() {
        return Err(BpdgError::Contract("context needs at least the current input".into()));
    }
    if n > window {
        return Err(BpdgError::Capacity(format!(
            "one utterance of {n} rows exceeds the {window}-row window"
        )));
    }
    let fits = |k: usize| k * n + k.saturating_sub(1) <= window;
    let mut k = (l_max + 1).min(turns.len());
    while !fits(k) {
        k -= 1;
    }
    let mut l = SeqLayout::default();
    let mut pos = 0;
    for (j, (speaker, ids)) in turns[turns.len() - k..].iter().enumerate() {
        if j > 0 {
            l.push(SEP, pos, false, None);
            pos += 1;
        }
        l.append(&utterance_layout(ids, *speaker, n, pos));
        pos += n;
    }
    Ok(l)
}

/// `gender <v> , area <v> , interests <v...>` with positions from 0 and no
/// persona addition.
pub fn profile_layout(profile: &Profile, tables: &AttributeTables, vocab: &Vocabulary) -> SeqLayout {
    let ids = vocab.tokenize(&profile.to_text(tables));
    let mut l = SeqLayout::default();
    for (i, &t) in ids.iter().enumerate() {
        l.push(t, i, false, None);
    }
    l.segments.push(0..ids.len());
    l
}

/// BOS followed by each response prefix, one segment per prefix.
pub fn prefix_layout(prefixes: &[&[usize]]) -> SeqLayout {
    let mut l = SeqLayout::default();
    for p in prefixes {
        let start = l.len();
        l.push(BOS, 0, false, None);
        for (i, &t) in p.iter().enumerate() {
            l.push(t, i + 1, false, None);
        }
        l.segments.push(start..l.len());
    }
    l
}

/// The two profiles whose attribute embeddings are added to owned rows.
#[derive(Clone, Copy, Debug)]
pub struct Personas<'a> {
    pub user: &'a Profile,
    pub robot: &'a Profile,
}

fn persona_vector(g: &mut Graph<'_>, ids: &EmbeddingIds, p: &Profile) -> Result<Var> {
    let gt = g.param(ids.gender);
    let at = g.param(ids.area);
    let it = g.param(ids.interest);
    let gv = g.gather_rows(gt, &[p.gender as usize])?;
    let av = g.gather_rows(at, &[p.area])?;
    let k = p.interests.len().min(MAX_EMBEDDED_INTERESTS);
    let iv = g.gather_rows(it, &p.interests[..k])?;
    let iv = g.mean_rows(iv)?;
    let s = g.add(gv, av)?;
    Ok(g.add(s, iv)?)
}

/// Rows of token + persona + position embeddings for `layout`.
///
/// `positions` must have at least `max(layout.positions) + 1` rows. With
/// `personas` absent, or for rows without an owner, nothing is added for
/// persona.
pub fn embed(
    g: &mut Graph<'_>,
    ids: &EmbeddingIds,
    layout: &SeqLayout,
    personas: Option<Personas<'_>>,
    positions: &Tensor,
) -> Result<Var> {
    let d = positions.cols();
    let tok = g.param(ids.token);
    let mut x = g.gather_rows(tok, &layout.tokens)?;
    if let Some(p) = personas {
        if layout.owner.iter().any(Option::is_some) {
            let u = persona_vector(g, ids, p.user)?;
            let r = persona_vector(g, ids, p.robot)?;
            let zero = g.constant(Tensor::zeros(&[1, d]));
            let table = g.concat_rows(&[u, r, zero])?;
            let rows: Vec<usize> = layout
                .owner
                .iter()
                .map(|o| match o {
                    Some(Speaker::User) => 0,
                    Some(Speaker::Robot) => 1,
                    None => 2,
                })
                .collect();
            let pe = g.gather_rows(table, &rows)?;
            x = g.add(x, pe)?;
        }
    }
    if let Some(&m) = layout.positions.iter().max() {
        if m >= positions.rows() {
            return Err(BpdgError::Capacity(format!(
                "position {m} beyond the {}-row position table",
                positions.rows()
            )));
        }
    }
    let x = g.scale(x, (d as f64).sqrt());
    let pos = g.constant(positions.select_rows(&layout.positions));
    Ok(g.add(x, pos)?)
}
