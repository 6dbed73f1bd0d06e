// SPDX-License-Identifier: Apache-2.0

//! Joint optimisation of the generation, context language-model and
//! persona-presence losses.

use std::time::Instant;

use bpdg_tensor::{adam_step, AdamState, Grads, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, TieBreak, Vocabulary, PAD};
use crate::error::{BpdgError, Result};
use crate::eval::perplexity;
use crate::model::{BpdgModel, Prepared};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub warmup_steps: u64,
    /// Multiplier on the Noam schedule.
    pub lr_factor: f64,
    pub batch_size: usize,
    pub accumulation: usize,
    pub epochs: usize,
    pub seed: u64,
    pub valid_fraction: f64,
    pub tie_break: TieBreak,
    /// Train on every robot turn with its preceding context rather than on
    /// the final turn only.
    pub all_robot_turns: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: 0.5,
            warmup_steps: 200,
            lr_factor: 1.0,
            batch_size: 16,
            accumulation: 1,
            epochs: 30,
            seed: 0,
            valid_fraction: 0.05,
            tie_break: TieBreak::Robot,
            all_robot_turns: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BpdgError::Config(m.into()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.accumulation < 1 || self.batch_size < 1 {
            return bad("batch_size and accumulation must be at least 1");
        }
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be at least 1");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return bad("lr_factor must be positive");
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad("valid_fraction must be in [0,1)");
        }
        Ok(())
    }

    pub fn large() -> Self {
        Self {
            warmup_steps: 2000,
            ..Self::default()
        }
    }
}

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(BpdgError::Contract("learning-rate schedule starts at step 1".into()));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_d: f64,
    pub l_lm: f64,
    pub l_p: f64,
    pub total: f64,
}

/// Rows counted by each loss for one example.
pub fn loss_counts(model: &BpdgModel, ex: &Prepared) -> (usize, usize, usize) {
    let d = ex.response.len() + 1;
    let lm = if model.ablation.no_lm {
        0
    } else {
        let t = ex.context.lm_targets();
        t.iter().filter(|&&x| x != PAD).count()
    };
    let p = if model.ablation.no_paf { 0 } else { d };
    (d, lm, p)
}

fn ratio(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Gradients of the group loss `Σd/N_D + λ1·Σlm/N_LM + λ2·Σp/N_P`, where
/// the N are row totals over the whole group. Examples are processed and
/// reduced in order, so splitting a group into micro-batches gives the
/// same result.
pub fn group_gradients(
    model: &BpdgModel,
    group: &[&Prepared],
    cfg: &TrainingConfig,
    grads: Option<&mut Grads>,
) -> Result<LossReport> {
    if group.is_empty() {
        return Err(BpdgError::Contract("empty batch".into()));
    }
    let (mut nd, mut nlm, mut np) = (0, 0, 0);
    for ex in group {
        let (d, l, p) = loss_counts(model, ex);
        nd += d;
        nlm += l;
        np += p;
    }
    let train = grads.is_some();
    let mut grads = grads;
    let (mut sd, mut slm, mut sp) = (0.0, 0.0, 0.0);
    for ex in group {
        let mut g = Graph::new(&model.store, train);
        let loss = model.example_loss(&mut g, ex)?;
        let mut total = g.scale(loss.d.0, 1.0 / nd as f64);
        sd += g.value(loss.d.0).item();
        if let Some((v, _)) = loss.lm {
            slm += g.value(v).item();
            if nlm > 0 && cfg.lambda1 != 0.0 {
                let t = g.scale(v, cfg.lambda1 / nlm as f64);
                total = g.add(total, t)?;
            }
        }
        if let Some((v, _)) = loss.p {
            sp += g.value(v).item();
            if np > 0 && cfg.lambda2 != 0.0 {
                let t = g.scale(v, cfg.lambda2 / np as f64);
                total = g.add(total, t)?;
            }
        }
        if let Some(gr) = grads.as_deref_mut() {
            g.backward(total)?;
            g.accumulate_into(gr);
        }
    }
    let (l_d, l_lm, l_p) = (ratio(sd, nd), ratio(slm, nlm), ratio(sp, np));
    Ok(LossReport {
        l_d,
        l_lm,
        l_p,
        total: l_d + cfg.lambda1 * l_lm + cfg.lambda2 * l_p,
    })
}

/// Joint loss over a whole set without gradients.
pub fn evaluate_loss(model: &BpdgModel, set: &[Prepared], cfg: &TrainingConfig) -> Result<LossReport> {
    let refs: Vec<&Prepared> = set.iter().collect();
    group_gradients(model, &refs, cfg, None)
}

pub struct Trainer {
    pub model: BpdgModel,
    pub adam: AdamState,
    pub cfg: TrainingConfig,
    grads: Grads,
    /// Largest fusion-head gradient norm seen in any step.
    pub head_grad_max: f64,
}

impl Trainer {
    pub fn new(model: BpdgModel, cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model.store);
        let grads = Grads::zeros_like(&model.store);
        Ok(Self {
            model,
            adam,
            cfg,
            grads,
            head_grad_max: 0.0,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// One optimiser update from `micro_batches.len()` accumulated
    /// micro-batches.
    pub fn joint_step(&mut self, micro_batches: &[&[&Prepared]]) -> Result<LossReport> {
        let group: Vec<&Prepared> = micro_batches.iter().flat_map(|m| m.iter().copied()).collect();
        self.grads.zero();
        let report = group_gradients(&self.model, &group, &self.cfg, Some(&mut self.grads))?;
        let next = self.adam.step + 1;
        if !report.total.is_finite() || !self.grads.is_finite() {
            return Err(BpdgError::Numeric(format!(
                "non-finite loss at step {next}: L_D={} L_LM={} L_P={} total={}",
                report.l_d, report.l_lm, report.l_p, report.total
            )));
        }
        let head_norm: f64 = self
            .model
            .ids
            .fusion
            .head_params()
            .iter()
            .flat_map(|&p| self.grads.get(p).iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        self.head_grad_max = self.head_grad_max.max(head_norm);
        let lr = self.cfg.lr_factor * noam_lr(next, self.model.config.d_model, self.cfg.warmup_steps)?;
        adam_step(&mut self.model.store, &self.grads, &mut self.adam, lr)?;
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub train: LossReport,
    pub valid_ppl: Option<f64>,
    pub head_grad_max: f64,
    pub seconds: f64,
}

/// Seeded split of `fraction` of the dialogues into a validation set.
pub fn split_validation(dialogues: &[Dialogue], fraction: f64, seed: u64) -> (Vec<Dialogue>, Vec<Dialogue>) {
    let mut idx: Vec<usize> = (0..dialogues.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5A11));
    let nv = (dialogues.len() as f64 * fraction).round() as usize;
    let (v, t) = idx.split_at(nv.min(dialogues.len()));
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| dialogues[i].clone()).collect()
    };
    (pick(t), pick(v))
}

/// Runs `cfg.epochs` epochs; `on_epoch` sees each log as it is produced.
pub fn train(
    trainer: &mut Trainer,
    train_set: &[Prepared],
    valid_set: &[Prepared],
    vocab: &Vocabulary,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if train_set.is_empty() {
        return Err(BpdgError::Data("training corpus is empty".into()));
    }
    let mut logs = Vec::with_capacity(trainer.cfg.epochs);
    let per_step = trainer.cfg.batch_size * trainer.cfg.accumulation;
    for epoch in 0..trainer.cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            trainer.cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64),
        ));
        let (mut sum, mut n) = (LossReport::default(), 0.0);
        for chunk in order.chunks(per_step) {
            let exs: Vec<&Prepared> = chunk.iter().map(|&i| &train_set[i]).collect();
            let micro: Vec<&[&Prepared]> = exs.chunks(trainer.cfg.batch_size).collect();
            let r = trainer.joint_step(&micro)?;
            let w = chunk.len() as f64;
            sum.l_d += w * r.l_d;
            sum.l_lm += w * r.l_lm;
            sum.l_p += w * r.l_p;
            sum.total += w * r.total;
            n += w;
        }
        let valid_ppl = if valid_set.is_empty() {
            None
        } else {
            Some(perplexity(&trainer.model, valid_set, vocab)?)
        };
        let log = EpochLog {
            epoch: epoch + 1,
            step: trainer.step(),
            train: LossReport {
                l_d: sum.l_d / n,
                l_lm: sum.l_lm / n,
                l_p: sum.l_p / n,
                total: sum.total / n,
            },
            valid_ppl,
            head_grad_max: trainer.head_grad_max,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

pub fn prepare_all(
    dialogues: &[Dialogue],
    vocab: &Vocabulary,
    tables: &crate::corpus::AttributeTables,
    model: &crate::backbone::ModelConfig,
    tie: TieBreak,
) -> Result<Vec<Prepared>> {
    dialogues
        .iter()
        .map(|d| crate::model::prepare(d, vocab, tables, model, tie))
        .collect()
}

/// Every prefix of each dialogue ending in a robot turn.
pub fn robot_turn_prefixes(dialogues: &[Dialogue]) -> Vec<Dialogue> {
    let mut out = Vec::new();
    for d in dialogues {
        for end in (2..=d.turns.len()).step_by(2) {
            let mut p = d.clone();
            p.turns.truncate(end);
            out.push(p);
        }
    }
    out
}

/// Training examples per `cfg.all_robot_turns`.
pub fn training_examples(
    dialogues: &[Dialogue],
    vocab: &Vocabulary,
    tables: &crate::corpus::AttributeTables,
    model: &crate::backbone::ModelConfig,
    cfg: &TrainingConfig,
) -> Result<Vec<Prepared>> {
    if cfg.all_robot_turns {
        prepare_all(&robot_turn_prefixes(dialogues), vocab, tables, model, cfg.tie_break)
    } else {
        prepare_all(dialogues, vocab, tables, model, cfg.tie_break)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_values() {
        let v = noam_lr(200, 64, 200).unwrap();
        assert!((v - 0.125 / 200f64.sqrt()).abs() < 1e-15);
        assert!((v - 0.008839).abs() < 1e-6);
        assert!(noam_lr(0, 64, 200).is_err());
        let mut prev = 0.0;
        for s in 1..=200 {
            let x = noam_lr(s, 64, 200).unwrap();
            assert!(x > prev);
            prev = x;
        }
        for s in 201..400 {
            let x = noam_lr(s, 64, 200).unwrap();
            assert!(x < prev);
            prev = x;
        }
    }

    #[test]
    fn validation_split_is_seeded() {
        let cfg = crate::corpus::SynthConfig::default();
        let inv = cfg.inventory();
        let ds = crate::corpus::generate_synthetic_corpus(
            &cfg,
            &inv,
            crate::corpus::PersonaRates::new(0.3, 0.3).unwrap(),
            40,
            "x",
            1,
        )
        .unwrap();
        let (t, v) = split_validation(&ds, 0.05, 3);
        assert_eq!((t.len(), v.len()), (38, 2));
        assert_eq!(split_validation(&ds, 0.05, 3), (t, v));
    }
}
