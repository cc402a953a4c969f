//! Reverse-mode automatic differentiation over matrix-level primitives.
//!
//! A `Tape` records a forward computation as a sequence of nodes in
//! topological order (inputs always precede their consumers, by
//! construction). `backward` then sweeps the recorded nodes in reverse,
//! accumulating adjoints. Node granularity is whole matrices rather than
//! scalars; vectors are `n x 1` matrices.
//!
//! A tape is single-owner while recording. Independent tapes may run in
//! parallel; callers combine their leaf gradients in a fixed order.

use crate::diffnum::{dag_penalty, dag_penalty_grad, Matrix};
use crate::error::{Error, Result};

/// Probability floor applied inside the cross-entropy node.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    /// Differentiable input; its adjoint is reported by `backward`.
    Leaf,
    /// Non-differentiable input; no adjoint is accumulated.
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// Constant scalar multiple.
    Scale(NodeId, f64),
    AddN(Vec<NodeId>),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Softmax over a column vector, computed with max-subtraction.
    Softmax(NodeId),
    /// Scalar inner product of two same-shape matrices.
    Dot(NodeId, NodeId),
    /// Sum of absolute values; subgradient at zero taken as zero.
    AbsSum(NodeId),
    /// trace(e^{W o W}) - K with its analytic gradient.
    DagPenalty(NodeId),
    /// Vertical concatenation of two column vectors.
    ConcatRows(NodeId, NodeId),
    /// Column vector built from scalar (1x1) nodes.
    Stack(Vec<NodeId>),
    /// Entry `i` of a column vector as a scalar node.
    Index(NodeId, usize),
    /// Row `i` of a matrix as a column vector.
    RowAsCol(NodeId, usize),
    /// Scalar (1x1) node times a matrix.
    MulScalar(NodeId, NodeId),
    /// Binary cross-entropy of a scalar probability against a 0/1 label.
    Bce(NodeId, f64),
}

struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by a backward sweep, indexed by `NodeId`.
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the swept output with respect to the node, if any path
    /// reached it. Leaves untouched by the output get `None`.
    pub fn wrt(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints.get(id.0).and_then(|a| a.as_ref())
    }

    /// Like [`wrt`](Self::wrt) but materializes a zero matrix of the given
    /// shape when the node was not reached.
    pub fn wrt_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Matrix {
        self.wrt(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert!(v.rows() == 1 && v.cols() == 1);
        v.get(0, 0)
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Matrix::from_vec(1, 1, vec![v]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), value)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).hadamard(self.value(b));
        self.push(Op::Hadamard(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_n(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty(), "add_n over empty set");
        let mut value = self.value(ids[0]).clone();
        for &id in &ids[1..] {
            value = value.add(self.value(id));
        }
        self.push(Op::AddN(ids.to_vec()), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.cols(), 1, "softmax expects a column vector");
        let value = Matrix::column(&softmax_vec(v.data()));
        self.push(Op::Softmax(a), value)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(self.value(b));
        self.push(Op::Dot(a, b), Matrix::from_vec(1, 1, vec![value]))
    }

    pub fn abs_sum(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).abs_sum();
        self.push(Op::AbsSum(a), Matrix::from_vec(1, 1, vec![value]))
    }

    pub fn dag_penalty(&mut self, a: NodeId) -> Result<NodeId> {
        let value = dag_penalty(self.value(a))?;
        Ok(self.push(Op::DagPenalty(a), Matrix::from_vec(1, 1, vec![value])))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.cols() == 1 && vb.cols() == 1, "concat_rows expects columns");
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let value = Matrix::column(&data);
        self.push(Op::ConcatRows(a, b), value)
    }

    pub fn stack(&mut self, ids: &[NodeId]) -> NodeId {
        let data: Vec<f64> = ids.iter().map(|&id| self.scalar(id)).collect();
        self.push(Op::Stack(ids.to_vec()), Matrix::column(&data))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.cols(), 1, "index expects a column vector");
        let value = Matrix::from_vec(1, 1, vec![v.get(i, 0)]);
        self.push(Op::Index(a, i), value)
    }

    pub fn row_as_col(&mut self, a: NodeId, i: usize) -> NodeId {
        let value = self.value(a).row_as_column(i);
        self.push(Op::RowAsCol(a, i), value)
    }

    pub fn mul_scalar(&mut self, s: NodeId, a: NodeId) -> NodeId {
        let c = self.scalar(s);
        let value = self.value(a).scale(c);
        self.push(Op::MulScalar(s, a), value)
    }

    pub fn bce(&mut self, pred: NodeId, label: bool) -> NodeId {
        let p = self.scalar(pred).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let y = if label { 1.0 } else { 0.0 };
        let value = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        self.push(Op::Bce(pred, y), Matrix::from_vec(1, 1, vec![value]))
    }

    /// Reverse sweep from a scalar output node. Returns the adjoint of every
    /// node reached by the chain rule; leaves not on a path to `output` are
    /// reported as `None`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward output node {} is not on this tape (len {})",
                output.0,
                self.nodes.len()
            )));
        }
        let out_val = &self.nodes[output.0].value;
        if out_val.rows() != 1 || out_val.cols() != 1 {
            return Err(Error::Usage(format!(
                "backward expects a scalar output, got {}x{}",
                out_val.rows(),
                out_val.cols()
            )));
        }

        let mut adjoints: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adjoints[output.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for idx in (0..=output.0).rev() {
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Constant => {
                    adjoints[idx] = Some(grad);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = grad.matmul(&self.nodes[b.0].value.transpose());
                    let db = self.nodes[a.0].value.transpose().matmul(&grad);
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, grad.clone());
                    accumulate(&mut adjoints, *b, grad.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoints, *a, grad.clone());
                    accumulate(&mut adjoints, *b, grad.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    let da = grad.hadamard(&self.nodes[b.0].value);
                    let db = grad.hadamard(&self.nodes[a.0].value);
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adjoints, *a, grad.scale(*c));
                }
                Op::AddN(ids) => {
                    for &id in ids {
                        accumulate(&mut adjoints, id, grad.clone());
                    }
                }
                Op::Sigmoid(a) => {
                    let d = node.value.map(|y| y * (1.0 - y));
                    accumulate(&mut adjoints, *a, grad.hadamard(&d));
                }
                Op::Tanh(a) => {
                    let d = node.value.map(|y| 1.0 - y * y);
                    accumulate(&mut adjoints, *a, grad.hadamard(&d));
                }
                Op::Softmax(a) => {
                    // dx_i = y_i * (g_i - sum_j g_j y_j)
                    let y = &node.value;
                    let inner = grad.dot(y);
                    let dx = Matrix::from_fn(y.rows(), 1, |i, _| {
                        y.get(i, 0) * (grad.get(i, 0) - inner)
                    });
                    accumulate(&mut adjoints, *a, dx);
                }
                Op::Dot(a, b) => {
                    let g = grad.get(0, 0);
                    let da = self.nodes[b.0].value.scale(g);
                    let db = self.nodes[a.0].value.scale(g);
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *b, db);
                }
                Op::AbsSum(a) => {
                    let g = grad.get(0, 0);
                    let da = self.nodes[a.0].value.map(|v| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adjoints, *a, da);
                }
                Op::DagPenalty(a) => {
                    let g = grad.get(0, 0);
                    // Analytic gradient; the input was validated at record time.
                    let da = dag_penalty_grad(&self.nodes[a.0].value)
                        .expect("dag_penalty input validated on the forward pass")
                        .scale(g);
                    accumulate(&mut adjoints, *a, da);
                }
                Op::ConcatRows(a, b) => {
                    let na = self.nodes[a.0].value.rows();
                    let da = Matrix::column(&grad.data()[..na]);
                    let db = Matrix::column(&grad.data()[na..]);
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *b, db);
                }
                Op::Stack(ids) => {
                    for (i, &id) in ids.iter().enumerate() {
                        accumulate(
                            &mut adjoints,
                            id,
                            Matrix::from_vec(1, 1, vec![grad.get(i, 0)]),
                        );
                    }
                }
                Op::Index(a, i) => {
                    let mut da = Matrix::zeros(self.nodes[a.0].value.rows(), 1);
                    da.set(*i, 0, grad.get(0, 0));
                    accumulate(&mut adjoints, *a, da);
                }
                Op::RowAsCol(a, i) => {
                    let src = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for j in 0..src.cols() {
                        da.set(*i, j, grad.get(j, 0));
                    }
                    accumulate(&mut adjoints, *a, da);
                }
                Op::MulScalar(s, a) => {
                    let ds = grad.dot(&self.nodes[a.0].value);
                    let da = grad.scale(self.nodes[s.0].value.get(0, 0));
                    accumulate(&mut adjoints, *s, Matrix::from_vec(1, 1, vec![ds]));
                    accumulate(&mut adjoints, *a, da);
                }
                Op::Bce(pred, y) => {
                    let g = grad.get(0, 0);
                    let p = self.nodes[pred.0]
                        .value
                        .get(0, 0)
                        .clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                    let dp = g * (p - y) / (p * (1.0 - p));
                    accumulate(&mut adjoints, *pred, Matrix::from_vec(1, 1, vec![dp]));
                }
            }
        }

        Ok(Gradients { adjoints })
    }
}

fn accumulate(adjoints: &mut [Option<Matrix>], id: NodeId, grad: Matrix) {
    match &mut adjoints[id.0] {
        Some(existing) => existing.add_assign_scaled(&grad, 1.0),
        slot => *slot = Some(grad),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of a slice with max-subtraction for stability.
pub fn softmax_vec(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> df/dx = 6
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(1, 1, vec![3.0]));
        let y = tape.hadamard(x, x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn sigmoid_product_gradient_at_origin() {
        // f(x,y) = sigmoid(x*y) at (0,0): both partials are 0.25 * 0 = 0.
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(1, 1, vec![0.0]));
        let y = tape.leaf(Matrix::from_vec(1, 1, vec![0.0]));
        let xy = tape.hadamard(x, y);
        let s = tape.sigmoid(xy);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().get(0, 0), 0.0);
        assert_eq!(grads.wrt(y).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn backward_rejects_foreign_node() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(1, 1, vec![1.0]));
        let _ = x;
        assert!(tape.backward(NodeId(5)).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 1));
        assert!(tape.backward(x).is_err());
    }

    /// Three stacked random affine + nonlinearity layers on 10 inputs,
    /// checked component-wise against central finite differences.
    #[test]
    fn random_composition_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..10 {
            let w1 = Matrix::from_fn(6, 10, |_, _| rng.gen_range(-1.0..1.0));
            let w2 = Matrix::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
            let w3 = Matrix::from_fn(1, 4, |_, _| rng.gen_range(-1.0..1.0));
            let x0: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let eval = |x: &[f64]| -> f64 {
                let v = Matrix::column(x);
                let h1 = w1.matmul(&v).map(sigmoid);
                let h2 = w2.matmul(&h1).map(f64::tanh);
                w3.matmul(&h2).get(0, 0)
            };

            let mut tape = Tape::new();
            let x = tape.leaf(Matrix::column(&x0));
            let c1 = tape.constant(w1.clone());
            let c2 = tape.constant(w2.clone());
            let c3 = tape.constant(w3.clone());
            let m1 = tape.matmul(c1, x);
            let h1 = tape.sigmoid(m1);
            let m2 = tape.matmul(c2, h1);
            let h2 = tape.tanh(m2);
            let out_vec = tape.matmul(c3, h2);
            let out = tape.index(out_vec, 0);
            let grads = tape.backward(out).unwrap();
            let gx = grads.wrt(x).unwrap();

            let h = 1e-5;
            for i in 0..10 {
                let mut plus = x0.clone();
                plus[i] += h;
                let mut minus = x0.clone();
                minus[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = gx.get(i, 0);
                let denom = a.abs().max(fd.abs()).max(1.0);
                assert!(
                    (a - fd).abs() / denom <= 1e-5,
                    "trial {trial} input {i}: ad {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_matches_reference() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::column(&[1.0, 2.0, 3.0]));
        let y = tape.softmax(x);
        let v = tape.value(y);
        let total: f64 = v.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((v.get(0, 0) - 0.090_030_57).abs() < 1e-7);
        assert!((v.get(2, 0) - 0.665_240_96).abs() < 1e-7);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = x*x + x -> f'(x) = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(1, 1, vec![4.0]));
        let sq = tape.hadamard(x, x);
        let y = tape.add(sq, x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().get(0, 0), 9.0);
    }
}
