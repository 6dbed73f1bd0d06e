// SPDX-License-Identifier: Apache-2.0

//! Central finite differences, used as an independent oracle for the tape.

use crate::tape::{Reduction, Tape, Var};
use crate::tensor::Tensor;

/// Step used by the op checks.
pub const H: f64 = 1e-5;

/// `df/dx_i ≈ (f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Derivative of `f` at `x` along `dir`.
pub fn directional_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    dir: &[f64],
    h: f64,
) -> f64 {
    let step = |s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, d)| a + s * d).collect() };
    (f(&step(h)) - f(&step(-h))) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|)`; two values both below `1e-10` in magnitude
/// count as agreeing zeros.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| relative_error(*x, *y))
        .fold(0.0, f64::max)
}

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One differentiable op with the input shapes it is checked at.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

/// Every differentiable tape op. Inputs are checked away from kinks, so
/// `relu` is left to a dedicated test.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("matmul_nt", &[&[3, 4], &[5, 4]], |t, v| t.matmul_nt(v[0], v[1]).unwrap()),
        case("transpose", &[&[2, 3]], |t, v| t.transpose(v[0]).unwrap()),
        case("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("add_row", &[&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1]).unwrap()),
        case("scale", &[&[2, 2]], |t, v| t.scale(v[0], -1.7)),
        case("scale_rows", &[&[3, 4], &[3, 1]], |t, v| t.scale_rows(v[0], v[1]).unwrap()),
        case("tanh", &[&[2, 3]], |t, v| t.tanh(v[0])),
        case("gelu", &[&[2, 3]], |t, v| t.gelu(v[0])),
        case("softmax_last", &[&[3, 4]], |t, v| t.softmax(v[0], 1).unwrap()),
        case("softmax_first", &[&[3, 4]], |t, v| t.softmax(v[0], 0).unwrap()),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        case("gather_rows", &[&[4, 3]], |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]).unwrap()),
        case("slice_cols", &[&[3, 5]], |t, v| t.slice_cols(v[0], 1, 3).unwrap()),
        case("slice_rows", &[&[4, 2]], |t, v| t.slice_rows(v[0], 1, 2).unwrap()),
        case("concat_cols", &[&[2, 3], &[2, 1]], |t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap()),
        case("concat_rows", &[&[2, 3], &[1, 3]], |t, v| t.concat_rows(&[v[1], v[0]]).unwrap()),
        case("mean_rows", &[&[4, 3]], |t, v| t.mean_rows(v[0]).unwrap()),
        case("sum", &[&[2, 3]], |t, v| t.sum(v[0])),
        case("cross_entropy_mean", &[&[4, 5]], |t, v| {
            t.cross_entropy(v[0], &[1, 9, 4, 0], 9, Reduction::Mean).unwrap().0
        }),
        case("cross_entropy_sum", &[&[3, 5]], |t, v| {
            t.cross_entropy(v[0], &[2, 2, 3], 9, Reduction::Sum).unwrap().0
        }),
    ]
}

/// Projects `f(inputs)` onto a random vector and compares reverse-mode
/// gradients with central differences for every input. Returns the worst
/// relative error. `random` draws tensors of a given shape.
pub fn check_op(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
    random: &mut dyn FnMut(&[usize]) -> Tensor,
) -> f64 {
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        random(tape.shape(out))
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let p = tape.constant(probe.clone());
    let prod = tape.mul(out, p).expect("probe has the output shape");
    let loss = tape.sum(prod);
    tape.backward(loss).expect("scalar loss");

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(|g| g.into_data()).unwrap_or(vec![0.0; x.numel()]);
        let mut fk = |flat: &[f64]| {
            let mut xs = inputs.to_vec();
            xs[k] = Tensor::new(x.shape().to_vec(), flat.to_vec()).expect("same shape");
            eval(&xs)
        };
        let numeric = central_difference(&mut fk, x.data(), H);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Worst relative error per op over `trials` random draws.
pub fn check_all_ops(trials: usize, random: &mut dyn FnMut(&[usize]) -> Tensor) -> Vec<(&'static str, f64)> {
    op_cases()
        .iter()
        .map(|c| {
            let worst = (0..trials)
                .map(|_| {
                    let inputs: Vec<Tensor> = c.shapes.iter().map(|s| random(s)).collect();
                    check_op(&inputs, c.f.as_ref(), random)
                })
                .fold(0.0, f64::max);
            (c.name, worst)
        })
        .collect()
}
