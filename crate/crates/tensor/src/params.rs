// SPDX-License-Identifier: Apache-2.0

//! Named parameter storage, gradient buffers, and a tape bound to a store.

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
///
/// Insertion order is the canonical parameter order used for
/// serialization and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    /// Mutable access; copies the storage first if a tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// All parameter values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in &self.values {
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Overwrites all values from a flat buffer in canonical order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(TensorError::Contract(format!(
                "expected {} parameter scalars, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            let t = Arc::make_mut(v);
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Gradient accumulators laid out like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    bufs: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            bufs: store.values.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        self.bufs.iter_mut().for_each(|b| b.fill(0.0));
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        self.bufs[id.0]
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a += b);
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.bufs
            .iter_mut()
            .for_each(|b| b.iter_mut().for_each(|x| *x *= c));
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// A tape whose parameter leaves are bound lazily from a store.
///
/// Each parameter is bound at most once per graph, so every use of the
/// same [`ParamId`] within one forward pass reads the same storage and
/// contributes to the same gradient.
pub struct Graph<'p> {
    tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf_shared(self.store.shared(id), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Tape node a parameter is bound to, if it was used.
    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Adds this graph's parameter gradients into `grads`, in parameter order.
    pub fn accumulate_into(&self, grads: &mut Grads) {
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = self.tape.grad_slice(*v) {
                    grads.accumulate(ParamId(i), g);
                }
            }
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trips() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        s.add("b", Tensor::new(vec![1, 3], vec![3.0, 4.0, 5.0]).unwrap());
        let flat = s.flatten();
        let mut t = s.clone();
        t.get_mut(ParamId(0)).data_mut()[0] = 9.0;
        t.load_flat(&flat).unwrap();
        assert_eq!(t.flatten(), flat);
        assert!(t.load_flat(&flat[1..]).is_err());
    }

    #[test]
    fn graph_binds_each_param_once() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let mut g = Graph::new(&s, true);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        g.backward(y).unwrap();
        let mut grads = Grads::zeros_like(&s);
        g.accumulate_into(&mut grads);
        assert_eq!(grads.get(id), &[6.0]);
    }
}
