// SPDX-License-Identifier: Apache-2.0

use bpdg_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const INIT_STD: f64 = 0.02;

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite positive std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
