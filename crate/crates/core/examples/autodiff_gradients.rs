//! Reverse-mode gradients of a small network loss against central
//! differences, then the per-operation check on random instances.

use dualctl::autodiff::check::{op_gradient_error, OP_KINDS};
use dualctl::autodiff::{grad_check, Activation, Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::from_vec(4, 2, vec![0.3, -1.2, 0.8, 0.1, -0.4, 0.9, 1.5, -0.7]);
    let w = Tensor::from_vec(2, 3, vec![0.5, -0.2, 0.9, 0.4, 0.7, -1.1]);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.var(w.clone()));
    let h = tape.matmul(xv, wv);
    let a = tape.activation(h, Activation::Tanh);
    let sq = tape.square(a);
    let loss = tape.mean(sq);
    println!("loss {:.6}", tape.evaluate(loss)?);
    let grads = tape.backward(loss, &[wv])?;
    println!("dL/dW {:?}", grads.get(wv).map(Tensor::data));

    let err = grad_check(
        |t, ids| {
            let xv = t.constant(x.clone());
            let h = t.matmul(xv, ids[0]);
            let a = t.activation(h, Activation::Tanh);
            let sq = t.square(a);
            t.mean(sq)
        },
        &[w],
        1e-6,
    )?;
    println!("relative error vs central differences {err:.2e}");

    let worst = OP_KINDS
        .iter()
        .map(|op| (op, (0..20).map(|s| op_gradient_error(op, s)).fold(0.0, f64::max)))
        .fold((&"", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    println!("worst op over 20 instances each: {} {:.2e}", worst.0, worst.1);
    Ok(())
}
