// SPDX-License-Identifier: Apache-2.0

//! Small full-attention transformer classifiers over SEP-joined segments.
//! Used for response relevance (2 classes) and for the bilateral persona
//! metric (3 classes).

use bpdg_tensor::{adam_step, AdamState, Grads, Graph, ParamId, ParamStore, Reduction, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{encode_masked, ModelConfig, StackIds};
use crate::corpus::SEP;
use crate::embedding::position_encoding;
use crate::error::{BpdgError, Result};
use crate::init::{normal_tensor, INIT_STD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub window: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            window: 256,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 4,
            seed: 0,
        }
    }
}

/// Token ids of each segment; segment 0 is the item being classified.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierInput {
    pub segments: Vec<Vec<usize>>,
}

impl ClassifierInput {
    /// Rows after joining: every segment is followed by one SEP.
    pub fn rows(&self) -> usize {
        self.segments.iter().map(|s| s.len() + 1).sum()
    }

    /// Drops tokens from the front of `segment` until the input fits, then
    /// from the back of the longest remaining segment. Segment 0 is never
    /// cut.
    pub fn fit(&mut self, window: usize, segment: usize) -> Result<()> {
        while self.rows() > window {
            let idx = if segment != 0 && !self.segments[segment].is_empty() {
                segment
            } else {
                match (1..self.segments.len())
                    .filter(|&i| !self.segments[i].is_empty())
                    .max_by_key(|&i| (self.segments[i].len(), std::cmp::Reverse(i)))
                {
                    Some(i) => i,
                    None => {
                        return Err(BpdgError::Capacity(format!(
                            "classified segment of {} tokens exceeds the {window}-row window",
                            self.segments[0].len()
                        )))
                    }
                }
            };
            if idx == segment {
                self.segments[idx].remove(0);
            } else {
                self.segments[idx].pop();
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub input: ClassifierInput,
    pub label: usize,
}

#[derive(Clone, Copy, Debug)]
struct ClsIds {
    token: ParamId,
    segment: ParamId,
    matched: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub struct SequenceClassifier {
    pub config: ClassifierConfig,
    pub vocab_size: usize,
    pub num_segments: usize,
    pub classes: usize,
    pub store: ParamStore,
    ids: ClsIds,
    stack: StackIds,
    backbone: ModelConfig,
    positions: Tensor,
}

impl SequenceClassifier {
    pub fn new(config: ClassifierConfig, vocab_size: usize, num_segments: usize, classes: usize) -> Result<Self> {
        if num_segments == 0 || classes < 2 {
            return Err(BpdgError::Config("classifier needs a segment and two classes".into()));
        }
        let backbone = ModelConfig {
            layers: config.layers,
            heads: config.heads,
            d_model: config.d_model,
            d_ff: config.d_ff,
            window: config.window,
            n: config.window,
            l_max: 0,
            vocab_size,
            num_areas: 1,
            num_interests: 1,
            init_std: INIT_STD,
        };
        backbone.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let feat = d * (2 * num_segments - 1);
        let token = store.add("cls.token", normal_tensor(&mut rng, &[vocab_size, d], INIT_STD));
        let segment = store.add("cls.segment", normal_tensor(&mut rng, &[num_segments, d], INIT_STD));
        let matched = store.add(
            "cls.match",
            normal_tensor(&mut rng, &[1 << (num_segments - 1), d], INIT_STD),
        );
        let stack = StackIds::register(&mut store, &mut rng, "cls.stack", &backbone);
        let ids = ClsIds {
            token,
            segment,
            matched,
            w1: store.add("cls.head.w1", normal_tensor(&mut rng, &[feat, d], (1.0 / feat as f64).sqrt())),
            b1: store.add("cls.head.b1", Tensor::zeros(&[d])),
            w2: store.add("cls.head.w2", normal_tensor(&mut rng, &[d, classes], (1.0 / d as f64).sqrt())),
            b2: store.add("cls.head.b2", Tensor::zeros(&[classes])),
        };
        let positions = position_encoding(config.window, d)?;
        Ok(Self {
            config,
            vocab_size,
            num_segments,
            classes,
            store,
            ids,
            stack,
            backbone,
            positions,
        })
    }

    /// Logits `[1, classes]`.
    pub fn logits(&self, g: &mut Graph<'_>, input: &ClassifierInput) -> Result<Var> {
        if input.segments.len() != self.num_segments {
            return Err(BpdgError::Contract(format!(
                "classifier expects {} segments, got {}",
                self.num_segments,
                input.segments.len()
            )));
        }
        let rows = input.rows();
        if rows > self.config.window {
            return Err(BpdgError::Capacity(format!(
                "classifier input of {rows} rows exceeds the {}-row window",
                self.config.window
            )));
        }
        let mut tokens = Vec::with_capacity(rows);
        let mut seg_ids = Vec::with_capacity(rows);
        let mut spans = Vec::with_capacity(self.num_segments);
        for (i, s) in input.segments.iter().enumerate() {
            let start = tokens.len();
            if let Some(&bad) = s.iter().find(|&&t| t >= self.vocab_size) {
                return Err(BpdgError::Contract(format!("token id {bad} outside the vocabulary")));
            }
            tokens.extend_from_slice(s);
            tokens.push(SEP);
            seg_ids.extend(std::iter::repeat_n(i, s.len() + 1));
            spans.push((start, s.len() + 1));
        }
        let tok = g.param(self.ids.token);
        let seg = g.param(self.ids.segment);
        let x = g.gather_rows(tok, &tokens)?;
        let s = g.gather_rows(seg, &seg_ids)?;
        let x = g.add(x, s)?;
        let mt = g.param(self.ids.matched);
        let m = g.gather_rows(mt, &match_codes(&input.segments))?;
        let x = g.add(x, m)?;
        let pos = g.constant(self.positions.select_rows(&(0..rows).collect::<Vec<_>>()));
        let x = g.add(x, pos)?;
        let h = encode_masked(g, &self.stack, &self.backbone, x, false, None, None)?;
        let mut pools = Vec::with_capacity(self.num_segments);
        for &(start, len) in &spans {
            let part = g.slice_rows(h, start, len)?;
            pools.push(g.mean_rows(part)?);
        }
        let mut feats = pools.clone();
        for &p in &pools[1..] {
            feats.push(g.mul(pools[0], p)?);
        }
        let f = g.concat_cols(&feats)?;
        let w1 = g.param(self.ids.w1);
        let b1 = g.param(self.ids.b1);
        let w2 = g.param(self.ids.w2);
        let b2 = g.param(self.ids.b2);
        let z = g.matmul(f, w1)?;
        let z = g.add_row(z, b1)?;
        let z = g.tanh(z);
        let z = g.matmul(z, w2)?;
        Ok(g.add_row(z, b2)?)
    }

    pub fn probabilities(&self, input: &ClassifierInput) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store, false);
        let l = self.logits(&mut g, input)?;
        let p = g.softmax(l, 1)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Log-probabilities from a stable log-softmax of the logits.
    pub fn log_probabilities(&self, input: &ClassifierInput) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store, false);
        let l = self.logits(&mut g, input)?;
        Ok(crate::model::log_softmax(g.value(l).data()))
    }

    pub fn predict(&self, input: &ClassifierInput) -> Result<usize> {
        let p = self.probabilities(input)?;
        Ok(argmax(&p))
    }

    pub fn accuracy(&self, data: &[Labeled]) -> Result<f64> {
        if data.is_empty() {
            return Err(BpdgError::Data("accuracy over an empty set".into()));
        }
        let mut hits = 0;
        for ex in data {
            if self.predict(&ex.input)? == ex.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Mini-batch Adam on mean cross-entropy; returns the mean training
    /// loss of each epoch.
    pub fn fit(&mut self, data: &[Labeled]) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(BpdgError::Data("classifier training set is empty".into()));
        }
        if let Some(ex) = data.iter().find(|e| e.label >= self.classes) {
            return Err(BpdgError::Data(format!("label {} outside {} classes", ex.label, self.classes)));
        }
        let mut adam = AdamState::new(&self.store);
        let mut grads = Grads::zeros_like(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xC1A5_5EED);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut log = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size.max(1)) {
                grads.zero();
                for &i in chunk {
                    let mut g = Graph::new(&self.store, true);
                    let l = self.logits(&mut g, &data[i].input)?;
                    let (loss, _) = g.cross_entropy(l, &[data[i].label], usize::MAX, Reduction::Sum)?;
                    total += g.value(loss).item();
                    let loss = g.scale(loss, 1.0 / chunk.len() as f64);
                    g.backward(loss)?;
                    g.accumulate_into(&mut grads);
                }
                if !grads.is_finite() {
                    return Err(BpdgError::Numeric(format!(
                        "non-finite classifier gradient in epoch {}",
                        epoch + 1
                    )));
                }
                adam_step(&mut self.store, &grads, &mut adam, self.config.learning_rate)?;
            }
            log.push(total / data.len() as f64);
        }
        Ok(log)
    }
}

/// Per row, a bit for each other segment containing the same token,
/// numbered over the other segments in order. SEP rows get 0.
fn match_codes(segments: &[Vec<usize>]) -> Vec<usize> {
    let sets: Vec<std::collections::HashSet<usize>> =
        segments.iter().map(|s| s.iter().copied().collect()).collect();
    let mut out = Vec::new();
    for (j, s) in segments.iter().enumerate() {
        for t in s {
            let mut code = 0;
            let mut bit = 0;
            for (k, set) in sets.iter().enumerate() {
                if k == j {
                    continue;
                }
                if set.contains(t) {
                    code |= 1 << bit;
                }
                bit += 1;
            }
            out.push(code);
        }
        out.push(0);
    }
    out
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Seeded 8:1:1 split.
pub fn split_811<T: Clone>(items: &[T], seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = items.len();
    let a = n * 8 / 10;
    let b = n * 9 / 10;
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    (pick(&idx[..a]), pick(&idx[a..b]), pick(&idx[b..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ClassifierConfig {
        ClassifierConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            window: 16,
            epochs: 30,
            learning_rate: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn fit_truncates_history_front_first() {
        let mut x = ClassifierInput {
            segments: vec![vec![5, 6], vec![7, 8, 9, 10], vec![11]],
        };
        x.fit(7, 1).unwrap();
        assert_eq!(x.segments, vec![vec![5, 6], vec![10], vec![11]]);
        let mut y = ClassifierInput {
            segments: vec![vec![5; 8]],
        };
        assert!(matches!(y.fit(4, 0), Err(BpdgError::Capacity(_))));
    }

    #[test]
    fn probabilities_sum_to_one_and_learns_separable_task() {
        let mut c = SequenceClassifier::new(tiny(), 12, 2, 2).unwrap();
        let data: Vec<Labeled> = (0..40)
            .map(|i| {
                let label = i % 2;
                Labeled {
                    input: ClassifierInput {
                        segments: vec![vec![5 + label * 3, 6], vec![9]],
                    },
                    label,
                }
            })
            .collect();
        let p = c.probabilities(&data[0].input).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let log = c.fit(&data).unwrap();
        assert!(log.last().unwrap() < &log[0]);
        assert_eq!(c.accuracy(&data).unwrap(), 1.0);
    }

    #[test]
    fn match_codes_mark_shared_tokens() {
        let c = match_codes(&[vec![5, 6], vec![6, 7], vec![5, 6]]);
        assert_eq!(c, vec![2, 3, 0, 3, 0, 0, 1, 3, 0]);
    }

    #[test]
    fn split_ratio() {
        let v: Vec<usize> = (0..100).collect();
        let (a, b, c) = split_811(&v, 1);
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
    }
}
