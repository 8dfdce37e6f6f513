use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::{row_matmul, Tensor};
use super::AutodiffError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise non-linearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Softplus,
        Activation::Tanh,
        Activation::Sigmoid,
    ];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative in terms of the input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            // subgradient 0 at the kink
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Var,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    ScalarMul(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    RepeatRows(NodeId),
    Activation(NodeId, Activation),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Powf(NodeId, f64),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    SelectCols(NodeId, Vec<usize>),
    Mean(NodeId),
    RowSum(NodeId),
    RowMatMul {
        a: NodeId,
        b: NodeId,
        p: usize,
        q: usize,
        s: usize,
    },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Var => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::RowMatMul { a, b, .. } => vec![*a, *b],
            Op::Neg(a)
            | Op::ScalarMul(a, _)
            | Op::AddScalar(a)
            | Op::RepeatRows(a)
            | Op::Activation(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Powf(a, _)
            | Op::Transpose(a)
            | Op::SelectCols(a, _)
            | Op::Mean(a)
            | Op::RowSum(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of tensor operations.
///
/// Values are computed eagerly as nodes are pushed, so every node's parents
/// precede it and the node list is already in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

/// Reverse-mode gradients keyed by the variable node they belong to.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Removes and returns the gradients for `ids`, in order.
    pub fn take_all(&mut self, ids: &[NodeId]) -> Vec<Tensor> {
        ids.iter()
            .map(|id| self.map.remove(id).expect("gradient requested for every id"))
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Var => true,
            Op::Constant => false,
            other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that gradients may be requested for.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Var)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    fn check_same(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch between nodes {} and {}",
            a.0,
            b.0
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same(a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same(a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Element-wise quotient.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same(a, b, "div");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::ScalarMul(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a `1 x c` row to every row of a `k x c` node.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (k, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} bias");
        let bias = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for r in 0..k {
            for (x, b) in v.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Broadcasts a `1 x c` node to `k x c`.
    pub fn repeat_rows(&mut self, a: NodeId, k: usize) -> NodeId {
        let v = self.value(a).repeat_rows(k);
        self.push(v, Op::RepeatRows(a))
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        let v = self.value(a).map(|x| act.apply(x));
        self.push(v, Op::Activation(a, act))
    }

    /// `max(0, x)` element-wise.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Relu)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// Square root; the derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn powf(&mut self, a: NodeId, exponent: f64) -> NodeId {
        let v = self.value(a).map(|x| x.powf(exponent));
        self.push(v, Op::Powf(a, exponent))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::hcat(&refs);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Gathers columns (may repeat or reorder them).
    pub fn select_cols(&mut self, a: NodeId, cols: &[usize]) -> NodeId {
        let v = self.value(a).select_cols(cols);
        self.push(v, Op::SelectCols(a, cols.to_vec()))
    }

    /// Contiguous column range `start..end`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let cols: Vec<usize> = (start..end).collect();
        self.select_cols(a, &cols)
    }

    /// Mean over every entry, giving a `1 x 1` node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Sum of each row, giving a `k x 1` node.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).row_sums();
        self.push(v, Op::RowSum(a))
    }

    /// Per-row block product, see [`row_matmul`].
    pub fn row_matmul(&mut self, a: NodeId, b: NodeId, p: usize, q: usize, s: usize) -> NodeId {
        let v = row_matmul(self.value(a), self.value(b), p, q, s);
        self.push(v, Op::RowMatMul { a, b, p, q, s })
    }

    /// Per-row dot product of two `k x c` nodes, giving `k x 1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let prod = self.mul(a, b);
        self.row_sum(prod)
    }

    /// Scales every column of `a` (`k x c`) by the matching row of `col` (`k x 1`).
    pub fn scale_rows(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (_, c) = self.shape(a);
        self.row_matmul(col, a, 1, 1, c)
    }

    /// Forward value of a scalar root.
    pub fn evaluate(&self, root: NodeId) -> Result<f64, AutodiffError> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot { shape });
        }
        if let Some(node) = self.first_non_finite {
            if node <= root.0 {
                return Err(AutodiffError::NonFinite { node });
            }
        }
        Ok(self.value(root).item())
    }

    /// Exact reverse-mode gradients of the scalar `root` with respect to `wrt`.
    pub fn backward(&self, root: NodeId, wrt: &[NodeId]) -> Result<Gradients, AutodiffError> {
        self.evaluate(root)?;
        if wrt.is_empty() {
            return Err(AutodiffError::EmptyWrt);
        }
        for &w in wrt {
            match self.nodes.get(w.0) {
                Some(Node { op: Op::Var, .. }) => {}
                _ => return Err(AutodiffError::NotAVariable { node: w.0 }),
            }
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(node.op, Op::Var) {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }

        let mut map = HashMap::with_capacity(wrt.len());
        for &w in wrt {
            let g = if w.0 <= root.0 {
                adj[w.0].clone()
            } else {
                None
            };
            let g = g.unwrap_or_else(|| {
                let (r, c) = self.shape(w);
                Tensor::zeros(r, c)
            });
            map.insert(w, g);
        }
        Ok(Gradients { map })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut adj[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Var => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(adj, *a, g.zip_map(vb, |x, y| x * y));
                self.accumulate(adj, *b, g.zip_map(va, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(adj, *a, g.zip_map(vb, |x, y| x / y));
                let ga = g.zip_map(va, |x, y| x * y);
                self.accumulate(adj, *b, ga.zip_map(vb, |x, y| -x / (y * y)));
            }
            Op::Neg(a) => self.accumulate(adj, *a, g.scale(-1.0)),
            Op::ScalarMul(a, c) => self.accumulate(adj, *a, g.scale(*c)),
            Op::AddScalar(a) => self.accumulate(adj, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(adj, *a, g.matmul_t(vb));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(adj, *b, va.t_matmul(g));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(adj, *a, g.clone());
                if self.nodes[row.0].needs_grad {
                    let (k, c) = g.shape();
                    let mut sums = vec![0.0; c];
                    for r in 0..k {
                        for (s, v) in sums.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    self.accumulate(adj, *row, Tensor::from_vec(1, c, sums));
                }
            }
            Op::RepeatRows(a) => {
                let (k, c) = g.shape();
                let mut sums = vec![0.0; c];
                for r in 0..k {
                    for (s, v) in sums.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                self.accumulate(adj, *a, Tensor::from_vec(1, c, sums));
            }
            Op::Activation(a, act) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut out = g.clone();
                for ((o, &xv), &yv) in out.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *o *= act.derivative(xv, yv);
                }
                self.accumulate(adj, *a, out);
            }
            Op::Exp(a) => self.accumulate(adj, *a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Log(a) => self.accumulate(adj, *a, g.zip_map(self.value(*a), |x, y| x / y)),
            Op::Sqrt(a) => self.accumulate(
                adj,
                *a,
                g.zip_map(&node.value, |x, y| if y > 0.0 { 0.5 * x / y } else { 0.0 }),
            ),
            Op::Square(a) => {
                self.accumulate(adj, *a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y))
            }
            Op::Powf(a, e) => {
                let e = *e;
                self.accumulate(
                    adj,
                    *a,
                    g.zip_map(self.value(*a), |x, y| x * e * y.powf(e - 1.0)),
                )
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (_, c) = self.shape(*p);
                    if self.nodes[p.0].needs_grad {
                        let cols: Vec<usize> = (offset..offset + c).collect();
                        self.accumulate(adj, *p, g.select_cols(&cols));
                    }
                    offset += c;
                }
            }
            Op::SelectCols(a, cols) => {
                let (k, c) = self.shape(*a);
                let mut out = Tensor::zeros(k, c);
                for r in 0..k {
                    let src = g.row(r);
                    let dst = out.row_mut(r);
                    for (&v, &col) in src.iter().zip(cols) {
                        dst[col] += v;
                    }
                }
                self.accumulate(adj, *a, out);
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let scale = g.item() / (r * c) as f64;
                self.accumulate(adj, *a, Tensor::filled(r, c, scale));
            }
            Op::RowSum(a) => {
                let (k, c) = self.shape(*a);
                let mut out = Tensor::zeros(k, c);
                for r in 0..k {
                    let gv = g.get(r, 0);
                    out.row_mut(r).iter_mut().for_each(|x| *x = gv);
                }
                self.accumulate(adj, *a, out);
            }
            Op::RowMatMul { a, b, p, q, s } => {
                let (p, q, s) = (*p, *q, *s);
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = g.rows();
                if self.nodes[a.0].needs_grad {
                    // dA_r = G_r B_r^T
                    let mut ga = Tensor::zeros(k, p * q);
                    for r in 0..k {
                        let gr = g.row(r);
                        let br = vb.row(r);
                        let out = ga.row_mut(r);
                        for i in 0..p {
                            for l in 0..q {
                                let mut acc = 0.0;
                                for j in 0..s {
                                    acc += gr[i * s + j] * br[l * s + j];
                                }
                                out[i * q + l] = acc;
                            }
                        }
                    }
                    self.accumulate(adj, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    // dB_r = A_r^T G_r
                    let mut gb = Tensor::zeros(k, q * s);
                    for r in 0..k {
                        let gr = g.row(r);
                        let ar = va.row(r);
                        let out = gb.row_mut(r);
                        for i in 0..p {
                            for l in 0..q {
                                let av = ar[i * q + l];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..s {
                                    out[l * s + j] += av * gr[i * s + j];
                                }
                            }
                        }
                    }
                    self.accumulate(adj, *b, gb);
                }
            }
        }
    }
}
