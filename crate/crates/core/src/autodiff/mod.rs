//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations as they are executed. Every loss in the
//! solvers is a scalar node on a tape, and [`Tape::backward`] returns exact
//! gradients with respect to any set of variable leaves.
//!
//! ```
//! use dualctl::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.var(Tensor::scalar(3.0));
//! let y = tape.square(x);
//! assert_eq!(tape.evaluate(y).unwrap(), 9.0);
//! let grads = tape.backward(y, &[x]).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

pub mod check;
mod tape;
mod tensor;

pub use tape::{Activation, Gradients, NodeId, Tape};
pub use tensor::{block_transpose_index, row_matmul, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("root node must be 1x1, got {shape:?}")]
    NonScalarRoot { shape: (usize, usize) },
    #[error("non-finite value produced at tape node {node}")]
    NonFinite { node: usize },
    #[error("node {node} is not a variable on this tape")]
    NotAVariable { node: usize },
    #[error("no variables requested")]
    EmptyWrt,
}

/// Compares reverse-mode gradients of `f` at `point` with central differences.
///
/// `f` receives fresh variable nodes holding the point's tensors and must
/// return a scalar node. The result is the largest
/// `|autodiff - fd| / (|fd| + 1e-12)` over all components.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |inputs: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let root = f(&mut tape, &ids);
        tape.evaluate(root)
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = point.iter().map(|t| tape.var(t.clone())).collect();
    let root = f(&mut tape, &ids);
    let grads = tape.backward(root, &ids)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = point.to_vec();
    for (slot, id) in ids.iter().enumerate() {
        let ad = grads.get(*id).expect("gradient for every input");
        for j in 0..point[slot].len() {
            let orig = point[slot].data()[j];
            work[slot].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[slot].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[slot].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * step);
            let err = (ad.data()[j] - fd).abs() / (fd.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
