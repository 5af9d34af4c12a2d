//! Finite-difference checks of every tape operation and network stage.

use ndarray::Array2;
use ptal::autodiff::{Tape, Var};
use ptal::gradcheck::{central_difference, relative_error};
use ptal::network::{init_params, Discriminator, Net, Task};

use super::*;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const DRAWS: u64 = 5;

/// Largest relative error of `d sum(w ⊙ build(x)) / dx` over the draws, for
/// a fixed random weighting `w`.
pub fn op_error(rows: usize, cols: usize, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut worst = 0.0f64;
    for draw in 0..DRAWS {
        let mut r = rng(draw * 31 + rows as u64);
        let x = normal_matrix(&mut r, rows, cols);
        let probe = {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let out = build(&mut t, v);
            t.value(out).dim()
        };
        let w = normal_matrix(&mut r, probe.0, probe.1);
        let eval = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let out = build(&mut t, v);
            (t.value(out) * &w).sum()
        };
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let out = build(&mut t, v);
        let wv = t.leaf(w.clone());
        let prod = t.mul(out, wv);
        let loss = t.sum_all(prod);
        let analytic = t.backward(loss).get(v).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        let numeric = central_difference(eval, &x, H);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// `(name, worst relative error)` for every tape operation.
pub fn tape_ops() -> Vec<(&'static str, f64)> {
    vec![
        ("relu", op_error(4, 3, |t, x| t.relu(x))),
        ("sigmoid", op_error(4, 3, |t, x| t.sigmoid(x))),
        ("exp", op_error(4, 3, |t, x| t.exp(x))),
        ("ln", op_error(4, 3, |t, x| {
            let s = t.sigmoid(x);
            t.ln(s)
        })),
        ("clamp", op_error(4, 3, |t, x| t.clamp(x, -0.5, 0.5))),
        ("powf", op_error(4, 3, |t, x| {
            let s = t.sigmoid(x);
            t.powf(s, 2.0)
        })),
        ("one_minus", op_error(4, 3, |t, x| t.one_minus(x))),
        ("scale", op_error(4, 3, |t, x| t.scale(x, -1.7))),
        ("add_scalar", op_error(4, 3, |t, x| t.add_scalar(x, 0.3))),
        ("softmax_rows", op_error(3, 5, |t, x| t.softmax_rows(x))),
        ("log_softmax_rows", op_error(3, 5, |t, x| t.log_softmax_rows(x))),
        ("layer_norm", op_error(3, 5, |t, x| t.layer_norm(x, 1e-5))),
        ("l2_normalize_rows", op_error(3, 5, |t, x| t.l2_normalize_rows(x, 1e-12))),
        ("transpose", op_error(3, 5, |t, x| t.transpose(x))),
        ("gather_rows", op_error(4, 3, |t, x| t.gather_rows(x, &[2, 0, 2, 3]))),
        ("slice_cols", op_error(3, 5, |t, x| t.slice_cols(x, 1, 4))),
        ("reshape", op_error(4, 3, |t, x| t.reshape(x, 2, 6))),
        ("sum_rows", op_error(4, 3, |t, x| t.sum_rows(x))),
        ("row_sums", op_error(4, 3, |t, x| t.row_sums(x))),
        ("unfold", op_error(6, 2, |t, x| t.unfold(x, 3))),
        ("concat", op_error(3, 2, |t, x| {
            let y = t.scale(x, 2.0);
            let c = t.concat_cols(&[x, y]);
            t.concat_rows(&[c, c])
        })),
        ("matmul", op_error(3, 4, |t, x| {
            let xt = t.transpose(x);
            t.matmul(x, xt)
        })),
        ("mul", op_error(3, 4, |t, x| t.mul(x, x))),
        ("sub", op_error(3, 4, |t, x| {
            let y = t.sigmoid(x);
            t.sub(x, y)
        })),
        ("add_row", op_error(3, 4, |t, x| {
            let r = t.sum_rows(x);
            t.add_row(x, r)
        })),
        ("mul_row", op_error(3, 4, |t, x| {
            let r = t.sum_rows(x);
            t.mul_row(x, r)
        })),
    ]
}

/// `(name, worst relative error)` for every network stage as a function of
/// its input, over random parameter draws.
pub fn network_stages() -> Vec<(&'static str, f64)> {
    type Stage = fn(&mut Tape, &Net<'_>, Var) -> Var;
    let stages: [(&str, usize, usize, Stage); 6] = [
        ("embed", 7, 8, |t, n, x| n.embed(t, x)),
        ("classify", 7, 8, |t, n, x| {
            let (p, q) = n.classify(t, x);
            t.concat_cols(&[p, q])
        }),
        ("adapt", 7, 8, |t, n, x| n.adapt(t, x, Task::Ac)),
        ("ac_predict", 3, 32, |t, n, x| n.ac_predict(t, x)),
        ("discriminate order", 3, 40, |t, n, x| n.discriminate(t, x, Discriminator::Order)),
        ("discriminate regularity", 3, 40, |t, n, x| n.discriminate(t, x, Discriminator::Regularity)),
    ];
    stages
        .iter()
        .map(|&(name, rows, cols, build)| {
            let worst = (0..DRAWS)
                .map(|draw| {
                    let params = init_params(&tiny_net(draw)).unwrap();
                    op_error(rows, cols, |t, x| {
                        let net = params.bind(t);
                        build(t, &net, x)
                    })
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}
