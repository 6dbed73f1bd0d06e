// SPDX-License-Identifier: Apache-2.0

//! Small worlds shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use bpdg::backbone::ModelConfig;
use bpdg::corpus::{
    build_vocab, generate_splits, AttributeTables, Dialogue, Profile, Speaker, SynthConfig, TieBreak, Vocabulary,
};
use bpdg::decoding::StepScorer;
use bpdg::fusion::WeightMode;
use bpdg::model::{prepare, prepare_context, Ablation, BpdgModel, Prepared};
use bpdg::decoding::ModelStepper;
use bpdg::training::{loss_counts, TrainingConfig};
use bpdg_tensor::gradcheck::central_difference;
use bpdg_tensor::{Grads, Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct World {
    pub tables: AttributeTables,
    pub vocab: Vocabulary,
    pub train: Vec<Dialogue>,
}

/// A small synthetic corpus and its vocabulary.
pub fn world(train: usize, seed: u64) -> World {
    let cfg = SynthConfig {
        train,
        valid: 4,
        test: 4,
        ..SynthConfig::default()
    };
    let s = generate_splits(&cfg, seed).unwrap();
    let vocab = build_vocab(&s.train, &s.tables, 1, 2);
    World {
        tables: s.tables,
        vocab,
        train: s.train,
    }
}

pub fn small_config(w: &World, d_model: usize, layers: usize, heads: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(w.vocab.len(), w.tables.areas.len(), w.tables.interests.len());
    c.d_model = d_model;
    c.d_ff = 2 * d_model;
    c.layers = layers;
    c.heads = heads;
    c.n = 12;
    c.l_max = 3;
    c.window = 96;
    c
}

pub fn prepared(w: &World, cfg: &ModelConfig, dialogues: &[Dialogue]) -> Vec<Prepared> {
    dialogues
        .iter()
        .map(|d| prepare(d, &w.vocab, &w.tables, cfg, TieBreak::Robot).unwrap())
        .collect()
}

/// Eight tokens: the five specials plus `a`, `b`, `c`.
pub fn vocab8() -> Vocabulary {
    let counts: BTreeMap<String, u64> = [("a", 3), ("b", 2), ("c", 1)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let v = Vocabulary::from_counts(&counts, [], 1, 2);
    assert_eq!(v.len(), 8);
    v
}

pub fn tables3() -> AttributeTables {
    AttributeTables {
        areas: vec!["x".into(), "y".into(), "z".into()],
        interests: vec!["p".into(), "q".into()],
    }
}

/// A random generator over the eight-token vocabulary. Larger
/// initialisation spread keeps the next-token distributions far from flat.
pub fn tiny_model(seed: u64, d_model: usize) -> BpdgModel {
    let mut c = ModelConfig::toy(8, 3, 2);
    c.d_model = d_model;
    c.d_ff = 2 * d_model;
    c.layers = 1;
    c.heads = 2;
    c.n = 6;
    c.l_max = 2;
    c.window = 32;
    c.init_std = 0.5;
    BpdgModel::new(c, Ablation::default(), seed).unwrap()
}

pub fn tiny_context(model: &BpdgModel) -> Prepared {
    let tables = tables3();
    let user = Profile {
        gender: 0,
        area: 0,
        interests: vec![0],
    };
    let robot = Profile {
        gender: 1,
        area: 1,
        interests: vec![1],
    };
    let ctx = [(Speaker::User, "a b"), (Speaker::Robot, "c"), (Speaker::User, "b a c")];
    prepare_context(&ctx, &user, &robot, &vocab8(), &tables, &model.config).unwrap()
}

pub fn tiny_stepper(model: &BpdgModel) -> ModelStepper<'_> {
    ModelStepper::new(model, &tiny_context(model), WeightMode::Auto).unwrap()
}

/// Every complete sequence of at most `max_len` tokens (EOS included)
/// with its summed log-probability, by depth-first expansion.
pub fn enumerate<S: StepScorer>(scorer: &S, max_len: usize, eos: usize) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((p, s)) = stack.pop() {
        let lp = scorer.next_log_probs(&[&p]).unwrap().remove(0);
        for (t, &x) in lp.iter().enumerate() {
            let mut q = p.clone();
            q.push(t);
            if t == eos || q.len() == max_len {
                out.push((q, s + x));
            } else {
                stack.push((q, s + x));
            }
        }
    }
    out
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// The training objective over `exs` with profile encodings held at the
/// values in `profiles`.
fn objective(model: &BpdgModel, exs: &[Prepared], profiles: &[(Tensor, Tensor)], cfg: &TrainingConfig, grads: Option<&mut Grads>) -> f64 {
    let (mut nd, mut nl, mut np) = (0, 0, 0);
    for ex in exs {
        let (d, l, p) = loss_counts(model, ex);
        nd += d;
        nl += l;
        np += p;
    }
    let train = grads.is_some();
    let mut grads = grads;
    let mut total_value = 0.0;
    for (ex, (eu, er)) in exs.iter().zip(profiles) {
        let mut g = Graph::new(&model.store, train);
        let loss = model.example_loss_with(&mut g, ex, eu.clone(), er.clone()).unwrap();
        let mut total = g.scale(loss.d.0, 1.0 / nd as f64);
        if let Some((v, _)) = loss.lm {
            let t = g.scale(v, cfg.lambda1 / nl as f64);
            total = g.add(total, t).unwrap();
        }
        if let Some((v, _)) = loss.p {
            let t = g.scale(v, cfg.lambda2 / np as f64);
            total = g.add(total, t).unwrap();
        }
        total_value += g.value(total).item();
        if let Some(gr) = grads.as_deref_mut() {
            g.backward(total).unwrap();
            g.accumulate_into(gr);
        }
    }
    total_value
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative gradient error over the parameter tensors of a
/// `d_model = 8`, one-layer model on two dialogues, with the parameter's
/// name. Profile encodings are held fixed since no gradient flows into them.
pub fn model_gradient_error(ablation: Ablation) -> (f64, String) {
    let w = world(12, 3);
    let cfg = small_config(&w, 8, 1, 2);
    let tc = TrainingConfig::default();
    let mut model = BpdgModel::new(cfg.clone(), ablation, 5).unwrap();
    let exs = prepared(&w, &cfg, &w.train[..2]);
    let profiles: Vec<(Tensor, Tensor)> = exs
        .iter()
        .map(|e| (model.encode_profile(&e.user_layout).unwrap(), model.encode_profile(&e.robot_layout).unwrap()))
        .collect();
    let mut grads = Grads::zeros_like(&model.store);
    objective(&model, &exs, &profiles, &tc, Some(&mut grads));
    let analytic: Vec<f64> = model.store.ids().flat_map(|id| grads.get(id).to_vec()).collect();
    assert!(analytic.iter().any(|g| g.abs() > 1e-3));
    let x0 = model.store.flatten();
    let numeric = central_difference(
        &mut |x| {
            model.store.load_flat(x).unwrap();
            objective(&model, &exs, &profiles, &tc, None)
        },
        &x0,
        1e-5,
    );
    model.store.load_flat(&x0).unwrap();
    let mut at = 0;
    let mut worst = (0.0, String::new());
    for id in model.store.ids() {
        let n = model.store.get(id).numel();
        let (a, b) = (&analytic[at..at + n], &numeric[at..at + n]);
        at += n;
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = norm(a).max(norm(b)).max(1e-10);
        if diff / scale > worst.0 {
            worst = (diff / scale, model.store.name(id).to_string());
        }
    }
    worst
}
