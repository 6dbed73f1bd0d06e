// SPDX-License-Identifier: Apache-2.0

//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! The tape records every operation in evaluation order; [`Tape::backward`]
//! sweeps it once in reverse. Parameters live in a [`ParamStore`] and are
//! bound onto a tape through a [`Graph`], whose gradients are reduced into
//! a [`Grads`] buffer in parameter order. [`adam_step`] applies an update.

pub mod error;
pub mod gemm;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use optim::{adam_step, AdamState};
pub use params::{Grads, Graph, ParamId, ParamStore};
pub use tape::{Reduction, Tape, Var};
pub use tensor::Tensor;
