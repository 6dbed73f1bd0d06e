// SPDX-License-Identifier: Apache-2.0

//! The full generator: parameters, example preparation, and the
//! teacher-forced and step-wise forward passes.

use bpdg_tensor::{Graph, ParamStore, Reduction, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{encode, project_kv, project_logits, ModelConfig, StackIds};
use crate::corpus::{
    heuristic_persona_label, AttributeTables, Dialogue, PersonaLabel, Profile, Speaker, TieBreak,
    Vocabulary, EOS, PAD,
};
use crate::embedding::{
    context_layout, embed, position_encoding, prefix_layout, profile_layout, EmbeddingIds, Personas,
    SeqLayout,
};
use crate::error::{BpdgError, Result};
use crate::fusion::{
    compute_encodings, constant_weights, fuse, presence_logits, FusionIds, FusionWeights, KeyValue,
    WeightSource,
};

/// Component switches for the ablated variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Drop the context language-model loss.
    pub no_lm: bool,
    /// Fix fusion weights to (0,0,1) and drop the presence loss.
    pub no_paf: bool,
    /// Skip adding persona embeddings to context rows.
    pub no_pemb: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelIds {
    pub emb: EmbeddingIds,
    pub stack: StackIds,
    pub fusion: FusionIds,
}

pub struct BpdgModel {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub store: ParamStore,
    pub ids: ModelIds,
    positions: Tensor,
}

/// A dialogue turned into row layouts and ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub context: SeqLayout,
    pub user: Profile,
    pub robot: Profile,
    pub user_layout: SeqLayout,
    pub robot_layout: SeqLayout,
    pub response: Vec<usize>,
    pub label: PersonaLabel,
}

impl Prepared {
    pub fn personas(&self) -> Personas<'_> {
        Personas {
            user: &self.user,
            robot: &self.robot,
        }
    }
}

/// Layouts for generating the turn after `context` (history plus current
/// input).
pub fn prepare_context(
    context: &[(Speaker, &str)],
    user: &Profile,
    robot: &Profile,
    vocab: &Vocabulary,
    tables: &AttributeTables,
    cfg: &ModelConfig,
) -> Result<Prepared> {
    let turns: Vec<(Speaker, Vec<usize>)> = context
        .iter()
        .map(|(s, t)| (*s, vocab.tokenize(t)))
        .collect();
    Ok(Prepared {
        context: context_layout(&turns, cfg.n, cfg.l_max, cfg.window)?,
        user: user.clone(),
        robot: robot.clone(),
        user_layout: profile_layout(user, tables, vocab),
        robot_layout: profile_layout(robot, tables, vocab),
        response: Vec::new(),
        label: PersonaLabel::NoPersona,
    })
}

/// Layouts for a training or evaluation dialogue. Responses are cut so
/// that BOS plus the response fits the window.
pub fn prepare(
    d: &Dialogue,
    vocab: &Vocabulary,
    tables: &AttributeTables,
    cfg: &ModelConfig,
    tie: TieBreak,
) -> Result<Prepared> {
    let ctx: Vec<(Speaker, &str)> = d.context().iter().map(|u| (u.speaker, u.text.as_str())).collect();
    let mut p = prepare_context(&ctx, &d.user_profile, &d.robot_profile, vocab, tables, cfg)?;
    let reference = d.reference();
    let mut response = vocab.tokenize(&reference.text);
    response.truncate(cfg.window - 1);
    p.response = response;
    p.label = reference.label.unwrap_or_else(|| {
        heuristic_persona_label(&reference.text, &d.user_profile, &d.robot_profile, tables, tie)
    });
    Ok(p)
}

/// How the decoder obtains its fusion weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightPolicy {
    Predicted,
    Fixed([f64; 3]),
}

/// Keys and values of the three encodings the prefix attends to.
#[derive(Clone, Copy, Debug)]
pub struct DecoderInputs {
    pub u: KeyValue,
    pub r: KeyValue,
    pub c: KeyValue,
}

pub struct DecoderOut {
    pub decoded: Var,
    pub presence_logits: Option<Var>,
    pub weights: Var,
    pub segments: Vec<std::ops::Range<usize>>,
}

/// Constant copies of [`DecoderInputs`] for decoding without gradients.
#[derive(Clone, Debug)]
pub struct DecodeContext {
    kv: [(Tensor, Tensor); 3],
}

impl DecodeContext {
    pub fn insert(&self, g: &mut Graph<'_>) -> DecoderInputs {
        let mut kv = self.kv.iter().map(|(k, v)| KeyValue {
            k: g.constant(k.clone()),
            v: g.constant(v.clone()),
        });
        DecoderInputs {
            u: kv.next().unwrap(),
            r: kv.next().unwrap(),
            c: kv.next().unwrap(),
        }
    }
}

/// Per-example sums and counted rows of the three losses.
pub struct ExampleLoss {
    pub d: (Var, usize),
    pub lm: Option<(Var, usize)>,
    pub p: Option<(Var, usize)>,
}

impl BpdgModel {
    pub fn new(config: ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let emb = EmbeddingIds::register(
            &mut store,
            &mut rng,
            c.vocab_size,
            c.num_areas,
            c.num_interests,
            c.d_model,
            c.init_std,
        );
        let stack = StackIds::register(&mut store, &mut rng, "stack", c);
        let fusion = FusionIds::register(&mut store, &mut rng, c);
        let positions = position_encoding(c.window, c.d_model)?;
        Ok(Self {
            config,
            ablation,
            store,
            ids: ModelIds { emb, stack, fusion },
            positions,
        })
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    fn personas<'a>(&self, ex: &'a Prepared) -> Option<Personas<'a>> {
        (!self.ablation.no_pemb).then(|| ex.personas())
    }

    /// Encodes the compacted context; returns `E_C` and next-token targets
    /// for its rows.
    pub fn context_forward(&self, g: &mut Graph<'_>, ex: &Prepared) -> Result<(Var, Vec<usize>)> {
        let targets_full = ex.context.lm_targets();
        let keep = ex.context.non_pad_rows();
        let compact = ex.context.compact();
        let x = embed(g, &self.ids.emb, &compact, self.personas(ex), &self.positions)?;
        let e_c = encode(g, &self.ids.stack, &self.config, x, None, None)?;
        Ok((e_c, keep.iter().map(|&i| targets_full[i]).collect()))
    }

    /// Encodes the padded context with pad keys masked, for checking that
    /// compaction changes nothing.
    pub fn context_forward_padded(&self, g: &mut Graph<'_>, ex: &Prepared) -> Result<Var> {
        let x = embed(g, &self.ids.emb, &ex.context, self.personas(ex), &self.positions)?;
        encode(g, &self.ids.stack, &self.config, x, Some(&ex.context.pad), None)
    }

    /// A profile encoding, computed on its own gradient-free graph.
    pub fn encode_profile(&self, layout: &SeqLayout) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, false);
        let x = embed(&mut g, &self.ids.emb, layout, None, &self.positions)?;
        let e = encode(&mut g, &self.ids.stack, &self.config, x, None, None)?;
        Ok(g.value(e).clone())
    }

    pub fn decoder_inputs(&self, g: &mut Graph<'_>, e_c: Var, e_u: Var, e_r: Var) -> Result<DecoderInputs> {
        let f = &self.ids.fusion;
        let (uk, uv) = project_kv(g, &f.persona_attn, e_u)?;
        let (rk, rv) = project_kv(g, &f.persona_attn, e_r)?;
        let (ck, cv) = project_kv(g, &f.context_attn, e_c)?;
        Ok(DecoderInputs {
            u: KeyValue { k: uk, v: uv },
            r: KeyValue { k: rk, v: rv },
            c: KeyValue { k: ck, v: cv },
        })
    }

    /// Everything the decoder needs that does not depend on the prefix.
    pub fn decode_context(&self, ex: &Prepared) -> Result<DecodeContext> {
        let e_u = self.encode_profile(&ex.user_layout)?;
        let e_r = self.encode_profile(&ex.robot_layout)?;
        let mut g = Graph::new(&self.store, false);
        let (e_c, _) = self.context_forward(&mut g, ex)?;
        let eu = g.constant(e_u);
        let er = g.constant(e_r);
        let di = self.decoder_inputs(&mut g, e_c, eu, er)?;
        let t = |g: &Graph<'_>, kv: KeyValue| (g.value(kv.k).clone(), g.value(kv.v).clone());
        Ok(DecodeContext {
            kv: [t(&g, di.u), t(&g, di.r), t(&g, di.c)],
        })
    }

    /// Decoder over one or more response prefixes (each gets BOS in front).
    pub fn decoder_forward(
        &self,
        g: &mut Graph<'_>,
        inputs: &DecoderInputs,
        prefixes: &[&[usize]],
        policy: WeightPolicy,
    ) -> Result<DecoderOut> {
        let layout = prefix_layout(prefixes);
        let segs = layout.segments.clone();
        let x = embed(g, &self.ids.emb, &layout, None, &self.positions)?;
        let e_prev = encode(g, &self.ids.stack, &self.config, x, None, Some(&segs))?;
        let enc = compute_encodings(
            g,
            &self.ids.fusion,
            self.config.heads,
            e_prev,
            Some(&segs),
            inputs.u,
            inputs.r,
            inputs.c,
        )?;
        let (presence, weights) = match policy {
            WeightPolicy::Predicted => {
                let l = presence_logits(g, &self.ids.fusion.head, enc.o_c, &segs)?;
                let w = g.softmax(l, 1)?;
                (Some(l), w)
            }
            WeightPolicy::Fixed(w) => (None, constant_weights(g, layout.len(), w)),
        };
        let o_enc = fuse(g, &enc, weights)?;
        let decoded = encode(g, &self.ids.stack, &self.config, o_enc, None, Some(&segs))?;
        Ok(DecoderOut {
            decoded,
            presence_logits: presence,
            weights,
            segments: segs,
        })
    }

    pub fn training_policy(&self) -> WeightPolicy {
        if self.ablation.no_paf {
            WeightPolicy::Fixed([0.0, 0.0, 1.0])
        } else {
            WeightPolicy::Predicted
        }
    }

    /// Teacher-forced losses for one example, as sums over counted rows.
    /// Profile encodings enter as constants.
    pub fn example_loss(&self, g: &mut Graph<'_>, ex: &Prepared) -> Result<ExampleLoss> {
        let e_u = self.encode_profile(&ex.user_layout)?;
        let e_r = self.encode_profile(&ex.robot_layout)?;
        self.example_loss_with(g, ex, e_u, e_r)
    }

    /// [`Self::example_loss`] with given profile encodings.
    pub fn example_loss_with(&self, g: &mut Graph<'_>, ex: &Prepared, e_u: Tensor, e_r: Tensor) -> Result<ExampleLoss> {
        if ex.response.is_empty() {
            return Err(BpdgError::Contract("empty reference response".into()));
        }
        let (e_c, lm_targets) = self.context_forward(g, ex)?;
        let lm = if self.ablation.no_lm {
            None
        } else {
            let logits = project_logits(g, self.ids.emb.token, e_c)?;
            Some(g.cross_entropy(logits, &lm_targets, PAD, Reduction::Sum)?)
        };
        let eu = g.constant(e_u);
        let er = g.constant(e_r);
        let inputs = self.decoder_inputs(g, e_c, eu, er)?;
        let out = self.decoder_forward(g, &inputs, &[&ex.response], self.training_policy())?;
        let logits = project_logits(g, self.ids.emb.token, out.decoded)?;
        let mut targets = ex.response.clone();
        targets.push(EOS);
        let d = g.cross_entropy(logits, &targets, PAD, Reduction::Sum)?;
        let p = match out.presence_logits {
            Some(l) => {
                let gold = vec![ex.label.index(); targets.len()];
                Some(g.cross_entropy(l, &gold, usize::MAX, Reduction::Sum)?)
            }
            None => None,
        };
        Ok(ExampleLoss { d, lm, p })
    }

    /// Log-probabilities of the next token after each prefix, and the
    /// fusion weights used at that step.
    pub fn step_log_probs(
        &self,
        ctx: &DecodeContext,
        prefixes: &[&[usize]],
        policy: WeightPolicy,
    ) -> Result<Vec<(Vec<f64>, FusionWeights)>> {
        let mut g = Graph::new(&self.store, false);
        let inputs = ctx.insert(&mut g);
        let out = self.decoder_forward(&mut g, &inputs, prefixes, policy)?;
        let last: Vec<usize> = out.segments.iter().map(|r| r.end - 1).collect();
        let rows = g.gather_rows(out.decoded, &last)?;
        let logits = project_logits(&mut g, self.ids.emb.token, rows)?;
        let source = match policy {
            WeightPolicy::Predicted => WeightSource::Predicted,
            WeightPolicy::Fixed(_) => WeightSource::Override,
        };
        let lv = g.value(logits);
        let wv = g.value(out.weights);
        Ok((0..prefixes.len())
            .map(|i| {
                let w = wv.row(last[i]);
                (
                    log_softmax(lv.row(i)),
                    FusionWeights {
                        alpha: w[0],
                        beta: w[1],
                        gamma: w[2],
                        source,
                    },
                )
            })
            .collect())
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
    let lz = mx + z.ln();
    row.iter().map(|x| x - lz).collect()
}

impl BpdgModel {
    /// Teacher-forced log-probabilities of every reference token (EOS not
    /// included), with the training-time weight policy.
    pub fn reference_scores(&self, ex: &Prepared) -> Result<Vec<crate::eval::TokenScore>> {
        let ctx = self.decode_context(ex)?;
        self.reference_scores_with(&ctx, ex, self.training_policy())
    }

    pub fn reference_scores_with(
        &self,
        ctx: &DecodeContext,
        ex: &Prepared,
        policy: WeightPolicy,
    ) -> Result<Vec<crate::eval::TokenScore>> {
        let mut g = Graph::new(&self.store, false);
        let inputs = ctx.insert(&mut g);
        let out = self.decoder_forward(&mut g, &inputs, &[&ex.response], policy)?;
        let logits = project_logits(&mut g, self.ids.emb.token, out.decoded)?;
        let lv = g.value(logits);
        Ok(ex
            .response
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let lp = log_softmax(lv.row(i));
                crate::eval::TokenScore {
                    token: t,
                    log_p: lp[t],
                    log_p_unk: lp[crate::corpus::UNK],
                }
            })
            .collect())
    }
}

impl crate::eval::SequenceScorer for BpdgModel {
    type Item = Prepared;
    fn score(&self, item: &Prepared) -> Result<Vec<crate::eval::TokenScore>> {
        self.reference_scores(item)
    }
}
