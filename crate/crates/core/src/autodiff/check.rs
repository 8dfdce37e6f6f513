//! Finite-difference checks of every tape operation on random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Activation, NodeId, Tape, Tensor};

/// Operation kinds covered by [`op_gradient_error`].
pub const OP_KINDS: [&str; 30] = [
    "add", "sub", "mul", "div", "neg", "scalar_mul", "add_scalar", "matmul", "add_row", "repeat_rows",
    "relu", "softplus", "tanh", "sigmoid", "exp", "log", "sqrt", "square", "powf", "transpose",
    "concat_cols", "select_cols", "slice_cols", "mean", "row_sum", "row_matmul", "row_dot", "scale_rows",
    "hadamard_chain", "mlp",
];

/// Entries of magnitude in `[0.5, 1.5]` with random signs when `signed`.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize, signed: bool) -> Tensor {
    Tensor::from_vec(
        r,
        c,
        (0..r * c)
            .map(|_| {
                let m = rng.random_range(0.5..1.5);
                if signed && rng.random_bool(0.5) {
                    -m
                } else {
                    m
                }
            })
            .collect(),
    )
}

/// Relative gradient error of `sum(w * op(inputs))` for one random instance
/// of `op`, against central differences.
///
/// # Panics
/// On an unknown op name.
pub fn op_gradient_error(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..4);
    let c = rng.random_range(1..4);
    let signed = away_from_zero(&mut rng, k, c, true);
    let pos = away_from_zero(&mut rng, k, c, false);
    let pos2 = away_from_zero(&mut rng, k, c, false);
    let (p, q, s) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
    let sel: Vec<usize> = (0..c + 1).map(|_| rng.random_range(0..c)).collect();
    let lo = rng.random_range(0..c);
    let hi = rng.random_range(lo + 1..=c);
    let weight_seed = seed ^ 0xABCD;
    let reduce = move |t: &mut Tape, out: NodeId| {
        let (r, cc) = t.shape(out);
        let mut wr = ChaCha8Rng::seed_from_u64(weight_seed);
        let w = t.constant(away_from_zero(&mut wr, r, cc, false));
        let prod = t.mul(out, w);
        let rows = t.row_sum(prod);
        t.mean(rows)
    };
    let (point, build): (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[NodeId]) -> NodeId>) = match op {
        "add" => (vec![signed.clone(), pos], Box::new(|t, x| t.add(x[0], x[1]))),
        "sub" => (vec![signed.clone(), pos], Box::new(|t, x| t.sub(x[0], x[1]))),
        "mul" => (vec![signed.clone(), pos], Box::new(|t, x| t.mul(x[0], x[1]))),
        "div" => (vec![signed.clone(), pos], Box::new(|t, x| t.div(x[0], x[1]))),
        "neg" => (vec![signed], Box::new(|t, x| t.neg(x[0]))),
        "scalar_mul" => (vec![signed], Box::new(|t, x| t.scalar_mul(x[0], -1.7))),
        "add_scalar" => (vec![signed], Box::new(|t, x| t.add_scalar(x[0], 0.3))),
        "matmul" => {
            let b = away_from_zero(&mut rng, c, q, false);
            (vec![pos, b], Box::new(|t, x| t.matmul(x[0], x[1])))
        }
        "add_row" => {
            let b = away_from_zero(&mut rng, 1, c, true);
            (vec![signed, b], Box::new(|t, x| t.add_row(x[0], x[1])))
        }
        "repeat_rows" => {
            let b = away_from_zero(&mut rng, 1, c, true);
            (vec![b], Box::new(move |t, x| t.repeat_rows(x[0], k)))
        }
        "relu" => (vec![signed], Box::new(|t, x| t.activation(x[0], Activation::Relu))),
        "softplus" => (vec![signed], Box::new(|t, x| t.activation(x[0], Activation::Softplus))),
        "tanh" => (vec![signed], Box::new(|t, x| t.activation(x[0], Activation::Tanh))),
        "sigmoid" => (vec![signed], Box::new(|t, x| t.activation(x[0], Activation::Sigmoid))),
        "exp" => (vec![signed], Box::new(|t, x| t.exp(x[0]))),
        "log" => (vec![pos], Box::new(|t, x| t.log(x[0]))),
        "sqrt" => (vec![pos], Box::new(|t, x| t.sqrt(x[0]))),
        "square" => (vec![signed], Box::new(|t, x| t.square(x[0]))),
        "powf" => (vec![pos], Box::new(|t, x| t.powf(x[0], -1.5))),
        "transpose" => (vec![signed], Box::new(|t, x| t.transpose(x[0]))),
        "concat_cols" => (vec![signed, pos], Box::new(|t, x| t.concat_cols(&[x[0], x[1], x[0]]))),
        "select_cols" => (vec![signed], Box::new(move |t, x| t.select_cols(x[0], &sel))),
        "slice_cols" => (vec![signed], Box::new(move |t, x| t.slice_cols(x[0], lo, hi))),
        "mean" => (vec![signed], Box::new(|t, x| t.mean(x[0]))),
        "row_sum" => (vec![signed], Box::new(|t, x| t.row_sum(x[0]))),
        "row_matmul" => {
            let a = away_from_zero(&mut rng, k, p * q, false);
            let b = away_from_zero(&mut rng, k, q * s, false);
            (vec![a, b], Box::new(move |t, x| t.row_matmul(x[0], x[1], p, q, s)))
        }
        "row_dot" => (vec![signed, pos], Box::new(|t, x| t.row_dot(x[0], x[1]))),
        "scale_rows" => {
            let col = away_from_zero(&mut rng, k, 1, true);
            (vec![signed, col], Box::new(|t, x| t.scale_rows(x[0], x[1])))
        }
        "hadamard_chain" => (
            vec![pos, pos2],
            Box::new(|t, x| {
                let m = t.mul(x[0], x[1]);
                let l = t.log(m);
                t.mul(l, x[0])
            }),
        ),
        "mlp" => {
            let w = away_from_zero(&mut rng, c, q, true);
            (
                vec![pos, w],
                Box::new(|t, x| {
                    let h = t.matmul(x[0], x[1]);
                    t.activation(h, Activation::Tanh)
                }),
            )
        }
        _ => unreachable!("{op}"),
    };
    grad_check(
        |t, ids| {
            let out = build(t, ids);
            reduce(t, out)
        },
        &point,
        1e-6,
    )
    .unwrap()
}
