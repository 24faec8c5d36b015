//! Reverse-mode differentiation over dense matrices.
//!
//! Every node holds a [`DenseMatrix`] value; scalars are 1x1 matrices. A
//! batch of points is an `N x d` node, one point per row, so a whole
//! minibatch flows through a handful of matrix nodes instead of thousands
//! of scalar ones.
//!
//! Binary elementwise ops broadcast a dimension of size 1 (scalars, row
//! vectors, column vectors). The tape is append-only and single-writer;
//! parents always precede children, so the backward pass is a single
//! reverse sweep.

use crate::activation::Activation;

use super::{DenseMatrix, Lu, NumericsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Row(NodeId, usize),
    Act(NodeId, Activation),
    ActDeriv(NodeId, Activation),
    Sum(NodeId),
    SumSq(NodeId),
    RowSumSq(NodeId),
    /// Per-row `‖(I − θJ)⁻¹(I + (1 − θ)J)‖_F²`, with `J` assembled from one
    /// column node per input direction. `local` holds the per-row gradient
    /// with respect to `J`.
    Resolvent {
        columns: Vec<NodeId>,
        local: Vec<DenseMatrix>,
    },
    /// Identity in the forward pass; the backward pass applies
    /// `(I − θJ_p)⁻ᵀ` to each row of the incoming adjoint.
    ImplicitAdjoint { input: NodeId, factors: Vec<Lu> },
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.get(0, 0)
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: DenseMatrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
        let (va, vb) = (self.value(a), self.value(b));
        let (rows, cols) = broadcast_shape(va, vb);
        DenseMatrix::from_fn(rows, cols, |i, j| f(at(va, i, j), at(vb, i, j)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x + y);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x - y);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x * y);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, |x, y| x / y);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Div(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).scale(k);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Scale(a, k), g)
    }

    /// `a + k` elementwise.
    pub fn offset(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| x + k);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Offset(a), g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let g = self.grad_of(&[a]);
        self.push(v, Op::Transpose(a), g)
    }

    /// Row `i` of `a` as a `1 x cols` node.
    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let v = DenseMatrix::row_vector(self.value(a).row(i));
        let g = self.grad_of(&[a]);
        self.push(v, Op::Row(a, i), g)
    }

    pub fn act(&mut self, a: NodeId, act: Activation) -> NodeId {
        let v = self.value(a).map(|x| act.apply(x));
        let g = self.grad_of(&[a]);
        self.push(v, Op::Act(a, act), g)
    }

    /// Elementwise σ'(a).
    pub fn act_deriv(&mut self, a: NodeId, act: Activation) -> NodeId {
        let v = self.value(a).map(|x| act.derivative(x));
        let g = self.grad_of(&[a]) && act.second_derivative_nonzero();
        self.push(v, Op::ActDeriv(a, act), g)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = DenseMatrix::scalar(self.value(a).sum());
        let g = self.grad_of(&[a]);
        self.push(v, Op::Sum(a), g)
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let v = DenseMatrix::scalar(self.value(a).frobenius_sq());
        let g = self.grad_of(&[a]);
        self.push(v, Op::SumSq(a), g)
    }

    /// Squared Euclidean norm of each row, as an `N x 1` node.
    pub fn row_sum_sq(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = DenseMatrix::from_fn(va.rows(), 1, |i, _| {
            va.row(i).iter().map(|x| x * x).sum()
        });
        let g = self.grad_of(&[a]);
        self.push(v, Op::RowSumSq(a), g)
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).as_slice().len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row squared Frobenius norm of the θ-resolvent
    /// `R_θ(J) = (I − θJ)⁻¹(I + (1 − θ)J)`.
    ///
    /// `columns[k]` is an `N x d` node whose row `p` is column `k` of the
    /// Jacobian at point `p`. Fails with [`NumericsError::SingularRow`] when
    /// `I − θJ` is singular at some point.
    pub fn resolvent_frob_sq(
        &mut self,
        columns: &[NodeId],
        theta: f64,
    ) -> Result<NodeId, NumericsError> {
        let d = columns.len();
        if d == 0 {
            return Err(NumericsError::Empty);
        }
        let n = self.value(columns[0]).rows();
        for c in columns {
            if self.value(*c).shape() != (n, d) {
                return Err(NumericsError::Shape(format!(
                    "jacobian column nodes must be {n}x{d}"
                )));
            }
        }
        let mut values = Vec::with_capacity(n);
        let mut local = Vec::with_capacity(n);
        for p in 0..n {
            let j = DenseMatrix::from_fn(d, d, |i, k| self.value(columns[k]).get(p, i));
            let (value, grad) = resolvent_value_and_grad(&j, theta)
                .map_err(|_| NumericsError::SingularRow { row: p })?;
            values.push(value);
            local.push(grad);
        }
        let g = self.grad_of(columns);
        Ok(self.push(
            DenseMatrix::column_vector(&values),
            Op::Resolvent {
                columns: columns.to_vec(),
                local,
            },
            g,
        ))
    }

    /// Identity on values; on the way back each row adjoint `g_p` becomes
    /// `(I − θJ_p)⁻ᵀ g_p`. This is the implicit-function-theorem correction
    /// for a converged implicit step rebuilt as `x + F(z*)`.
    pub fn implicit_adjoint(
        &mut self,
        input: NodeId,
        jacobians: &[DenseMatrix],
        theta: f64,
    ) -> Result<NodeId, NumericsError> {
        let (n, d) = self.value(input).shape();
        if jacobians.len() != n {
            return Err(NumericsError::Shape(format!(
                "{} jacobians for {n} rows",
                jacobians.len()
            )));
        }
        let mut factors = Vec::with_capacity(n);
        for (p, j) in jacobians.iter().enumerate() {
            if j.shape() != (d, d) {
                return Err(NumericsError::Shape(format!("jacobian {p} is not {d}x{d}")));
            }
            let a = DenseMatrix::identity(d).sub(&j.scale(theta));
            factors.push(Lu::factor(&a).map_err(|_| NumericsError::SingularRow { row: p })?);
        }
        let v = self.value(input).clone();
        let g = self.grad_of(&[input]);
        Ok(self.push(v, Op::ImplicitAdjoint { input, factors }, g))
    }

    pub fn backward(&self, output: NodeId) -> Result<Gradients, NumericsError> {
        backward(self, output)
    }
}

impl Activation {
    fn second_derivative_nonzero(self) -> bool {
        !matches!(self, Activation::Relu | Activation::Identity)
    }
}

/// `R_θ(J)` for a square `J`.
pub fn theta_resolvent(j: &DenseMatrix, theta: f64) -> Result<DenseMatrix, NumericsError> {
    let d = j.rows();
    let a = DenseMatrix::identity(d).sub(&j.scale(theta));
    let b = DenseMatrix::identity(d).add(&j.scale(1.0 - theta));
    Ok(Lu::factor(&a)?.solve_matrix(&b))
}

/// `‖M‖_F²` with `M = R_θ(J)` and its gradient `2 A⁻ᵀ M Kᵀ`, where
/// `A = I − θJ` and `K = (1 − θ)I + θM`.
fn resolvent_value_and_grad(
    j: &DenseMatrix,
    theta: f64,
) -> Result<(f64, DenseMatrix), NumericsError> {
    let d = j.rows();
    let a = DenseMatrix::identity(d).sub(&j.scale(theta));
    let b = DenseMatrix::identity(d).add(&j.scale(1.0 - theta));
    let lu = Lu::factor(&a)?;
    let m = lu.solve_matrix(&b);
    let k = DenseMatrix::identity(d).scale(1.0 - theta).add(&m.scale(theta));
    let mkt = m.matmul(&k.transpose());
    let mut grad = DenseMatrix::zeros(d, d);
    for col in 0..d {
        let x = lu.solve_transpose(&mkt.column(col));
        for (i, v) in x.into_iter().enumerate() {
            grad.set(i, col, 2.0 * v);
        }
    }
    Ok((m.frobenius_sq(), grad))
}

#[inline]
fn at(m: &DenseMatrix, i: usize, j: usize) -> f64 {
    let ii = if m.rows() == 1 { 0 } else { i };
    let jj = if m.cols() == 1 { 0 } else { j };
    m.get(ii, jj)
}

fn broadcast_shape(a: &DenseMatrix, b: &DenseMatrix) -> (usize, usize) {
    fn dim(x: usize, y: usize) -> usize {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast dimensions {x} and {y}")
        }
    }
    (dim(a.rows(), b.rows()), dim(a.cols(), b.cols()))
}

/// Sums a full-shape gradient down onto the (possibly broadcast) shape of
/// an operand.
fn reduce_to(grad: &DenseMatrix, shape: (usize, usize)) -> DenseMatrix {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = DenseMatrix::zeros(shape.0, shape.1);
    for i in 0..grad.rows() {
        let ii = if shape.0 == 1 { 0 } else { i };
        for j in 0..grad.cols() {
            let jj = if shape.1 == 1 { 0 } else { j };
            let cur = out.get(ii, jj);
            out.set(ii, jj, cur + grad.get(i, j));
        }
    }
    out
}

/// Adjoints of every node with respect to one scalar output.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `id`; zeros when the output does not depend on it.
    pub fn get(&self, id: NodeId) -> DenseMatrix {
        match &self.adjoints[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.adjoints[id.0].as_ref()
    }

    /// Concatenates the row-major gradients of `ids`.
    pub fn flatten(&self, ids: &[NodeId]) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in ids {
            match &self.adjoints[id.0] {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => {
                    let (r, c) = self.shapes[id.0];
                    out.extend(std::iter::repeat(0.0).take(r * c));
                }
            }
        }
        out
    }
}

fn accumulate(adj: &mut [Option<DenseMatrix>], nodes: &[Node], id: NodeId, g: DenseMatrix) {
    if !nodes[id.0].requires_grad {
        return;
    }
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Reverse sweep from a scalar `output`; the output adjoint is seeded with 1.
pub fn backward(tape: &Tape, output: NodeId) -> Result<Gradients, NumericsError> {
    let out_val = tape.value(output);
    if out_val.shape() != (1, 1) {
        return Err(NumericsError::NonScalarOutput {
            rows: out_val.rows(),
            cols: out_val.cols(),
        });
    }
    let nodes = &tape.nodes;
    let mut adj: Vec<Option<DenseMatrix>> = vec![None; output.0 + 1];
    adj[output.0] = Some(DenseMatrix::scalar(1.0));
    let needs = |id: NodeId| nodes[id.0].requires_grad;

    for idx in (0..=output.0).rev() {
        let node = &nodes[idx];
        if !node.requires_grad {
            continue;
        }
        let Some(g) = adj[idx].take() else { continue };
        match &node.op {
            Op::Leaf => {
                // keep leaf adjoints around for the caller
                adj[idx] = Some(g);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    let s = tape.value(*a).shape();
                    accumulate(&mut adj, nodes, *a, reduce_to(&g, s));
                }
                if needs(*b) {
                    let s = tape.value(*b).shape();
                    accumulate(&mut adj, nodes, *b, reduce_to(&g, s));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    let s = tape.value(*a).shape();
                    accumulate(&mut adj, nodes, *a, reduce_to(&g, s));
                }
                if needs(*b) {
                    let s = tape.value(*b).shape();
                    accumulate(&mut adj, nodes, *b, reduce_to(&g.scale(-1.0), s));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (tape.value(*a), tape.value(*b));
                if needs(*a) {
                    let full = DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| {
                        g.get(i, j) * at(vb, i, j)
                    });
                    accumulate(&mut adj, nodes, *a, reduce_to(&full, va.shape()));
                }
                if needs(*b) {
                    let full = DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| {
                        g.get(i, j) * at(va, i, j)
                    });
                    accumulate(&mut adj, nodes, *b, reduce_to(&full, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (tape.value(*a), tape.value(*b));
                if needs(*a) {
                    let full = DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| {
                        g.get(i, j) / at(vb, i, j)
                    });
                    accumulate(&mut adj, nodes, *a, reduce_to(&full, va.shape()));
                }
                if needs(*b) {
                    let full = DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let y = at(vb, i, j);
                        -g.get(i, j) * at(va, i, j) / (y * y)
                    });
                    accumulate(&mut adj, nodes, *b, reduce_to(&full, vb.shape()));
                }
            }
            Op::Scale(a, k) => accumulate(&mut adj, nodes, *a, g.scale(*k)),
            Op::Offset(a) => accumulate(&mut adj, nodes, *a, g),
            Op::MatMul(a, b) => {
                if needs(*a) {
                    let ga = g.matmul(&tape.value(*b).transpose());
                    accumulate(&mut adj, nodes, *a, ga);
                }
                if needs(*b) {
                    let gb = tape.value(*a).transpose().matmul(&g);
                    accumulate(&mut adj, nodes, *b, gb);
                }
            }
            Op::Transpose(a) => accumulate(&mut adj, nodes, *a, g.transpose()),
            Op::Row(a, i) => {
                let va = tape.value(*a);
                let mut full = DenseMatrix::zeros(va.rows(), va.cols());
                full.row_mut(*i).copy_from_slice(g.as_slice());
                accumulate(&mut adj, nodes, *a, full);
            }
            Op::Act(a, act) => {
                let va = tape.value(*a);
                let full = DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| {
                    g.get(i, j) * act.derivative(va.get(i, j))
                });
                accumulate(&mut adj, nodes, *a, full);
            }
            Op::ActDeriv(a, act) => {
                let va = tape.value(*a);
                let full = DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| {
                    g.get(i, j) * act.second_derivative(va.get(i, j))
                });
                accumulate(&mut adj, nodes, *a, full);
            }
            Op::Sum(a) => {
                let (r, c) = tape.value(*a).shape();
                accumulate(&mut adj, nodes, *a, DenseMatrix::filled(r, c, g.get(0, 0)));
            }
            Op::SumSq(a) => {
                let s = 2.0 * g.get(0, 0);
                accumulate(&mut adj, nodes, *a, tape.value(*a).scale(s));
            }
            Op::RowSumSq(a) => {
                let va = tape.value(*a);
                let full =
                    DenseMatrix::from_fn(va.rows(), va.cols(), |i, j| 2.0 * g.get(i, 0) * va.get(i, j));
                accumulate(&mut adj, nodes, *a, full);
            }
            Op::Resolvent { columns, local } => {
                let d = columns.len();
                for (k, col) in columns.iter().enumerate() {
                    if !needs(*col) {
                        continue;
                    }
                    let n = local.len();
                    let full = DenseMatrix::from_fn(n, d, |p, i| g.get(p, 0) * local[p].get(i, k));
                    accumulate(&mut adj, nodes, *col, full);
                }
            }
            Op::ImplicitAdjoint { input, factors } => {
                let mut full = DenseMatrix::zeros(g.rows(), g.cols());
                for (p, lu) in factors.iter().enumerate() {
                    let w = lu.solve_transpose(g.row(p));
                    full.row_mut(p).copy_from_slice(&w);
                }
                accumulate(&mut adj, nodes, *input, full);
            }
        }
    }
    let mut adjoints = adj;
    adjoints[output.0] = Some(DenseMatrix::scalar(1.0));
    adjoints.resize(nodes.len(), None);
    Ok(Gradients {
        adjoints,
        shapes: nodes.iter().map(|n| n.value.shape()).collect(),
    })
}
