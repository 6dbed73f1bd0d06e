// SPDX-License-Identifier: Apache-2.0

//! Adam with an externally supplied learning rate.

use crate::error::{Result, TensorError};
use crate::params::{Grads, ParamId, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.get(id).numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }

    /// First moments then second moments, each in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.num_scalars());
        self.m.iter().for_each(|b| out.extend_from_slice(b));
        self.v.iter().for_each(|b| out.extend_from_slice(b));
        out
    }

    pub fn load_flat(&mut self, flat: &[f64], step: u64) -> Result<()> {
        let n = self.num_scalars();
        if flat.len() != 2 * n {
            return Err(TensorError::Contract(format!(
                "expected {} optimizer scalars, got {}",
                2 * n,
                flat.len()
            )));
        }
        let mut off = 0;
        for b in self.m.iter_mut().chain(self.v.iter_mut()) {
            let len = b.len();
            b.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        self.step = step;
        Ok(())
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TensorError::Contract(format!(
            "adam_step: {} params, {} grads, {} state slots",
            store.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..store.len() {
        let id = ParamId(i);
        let g = grads.get(id);
        let n = store.get(id).numel();
        if g.len() != n || state.m[i].len() != n {
            return Err(TensorError::Shape {
                op: "adam_step",
                lhs: store.get(id).shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        let p = store.get_mut(id).data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..n {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
