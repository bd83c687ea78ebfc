//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and records its parents, so node ids are
//! already in topological order. [`Graph::backward`] walks the nodes in reverse
//! and accumulates vector-Jacobian products into a [`Gradients`] table.

use std::ops::Range;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Direction of a softmax or reduction.
///
/// `Cols` runs across the columns of each row (one result per row), `Rows`
/// runs down the rows of each column (one result per column).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    XLogX(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    SumAll(Var),
    SumAxis(Var, Axis),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    Transpose(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to every node that depends on a
/// parameter.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, op: Op, a: Var, value: Tensor) -> Var {
        let ng = self.needs(a);
        self.push(op, value, ng)
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, value: Tensor) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(op, value, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(Op::MatMul(a, b), a, b, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.binary(Op::Add(a, b), a, b, value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.binary(Op::Sub(a, b), a, b, value))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.binary(Op::Mul(a, b), a, b, value))
    }

    /// Adds a `1×c` row to every row of an `r×c` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::shape("add_row", sa, sr));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        let cols = sa.1;
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bias[i % cols];
        }
        Ok(self.binary(Op::AddRow(a, row), a, row, value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.unary(Op::Scale(a, factor), a, value)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a).map(|x| x + offset);
        self.unary(Op::AddScalar(a), a, value)
    }

    /// `1 − a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Natural logarithm; every input entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0))
        {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        let value = self.value(a).map(f64::ln);
        Ok(self.unary(Op::Log(a), a, value))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(Op::Exp(a), a, value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.unary(Op::Relu(a), a, value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.unary(Op::Sigmoid(a), a, value)
    }

    /// `x·ln x` elementwise with `0·ln 0 = 0`. Inputs must be non-negative.
    pub fn xlogx(&mut self, a: Var) -> Var {
        let value = self.value(a).map(xlogx);
        self.unary(Op::XLogX(a), a, value)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.unary(Op::Clamp(a, lo, hi), a, value)
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let value = softmax(self.value(a), axis);
        self.unary(Op::Softmax(a, axis), a, value)
    }

    pub fn log_softmax(&mut self, a: Var, axis: Axis) -> Var {
        let value = log_softmax(self.value(a), axis);
        self.unary(Op::LogSoftmax(a, axis), a, value)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(Op::SumAll(a), a, value)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Var {
        let value = sum_axis(self.value(a), axis);
        self.unary(Op::SumAxis(a, axis), a, value)
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Var {
        let (r, c) = self.shape(a);
        let n = match axis {
            Axis::Cols => c,
            Axis::Rows => r,
        } as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(Error::shape("concat_rows", sa, sb));
        }
        let mut data = Vec::with_capacity((sa.0 + sb.0) * sa.1);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(sa.0 + sb.0, sa.1, data)?;
        Ok(self.binary(Op::ConcatRows(a, b), a, b, value))
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if range.start > range.end || range.end > r {
            return Err(Error::shape("slice_rows", (r, c), (range.start, range.end)));
        }
        let data = self.value(a).data()[range.start * c..range.end * c].to_vec();
        let value = Tensor::new(range.end - range.start, c, data)?;
        Ok(self.unary(Op::SliceRows(a, range.start), a, value))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.unary(Op::Transpose(a), a, value)
    }

    /// Reverse sweep from a 1×1 `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::Usage(format!(
                "backward() requires a scalar root, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    acc(a, g.matmul(&self.value(b).transpose()).expect("matmul grad"));
                }
                if self.needs(b) {
                    acc(b, self.value(a).transpose().matmul(g).expect("matmul grad"));
                }
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(a, g.zip_map(self.value(b), |x, y| x * y));
                acc(b, g.zip_map(self.value(a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(a, g.clone());
                acc(row, sum_axis(g, Axis::Rows));
            }
            Op::Scale(a, factor) => acc(a, g.map(|x| x * factor)),
            Op::AddScalar(a) => acc(a, g.clone()),
            Op::Log(a) => acc(a, g.zip_map(self.value(a), |x, y| x / y)),
            Op::Exp(a) => acc(a, g.zip_map(out, |x, y| x * y)),
            Op::Relu(a) => acc(
                a,
                g.zip_map(self.value(a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Sigmoid(a) => acc(a, g.zip_map(out, |x, s| x * s * (1.0 - s))),
            Op::XLogX(a) => acc(
                a,
                g.zip_map(self.value(a), |x, y| x * (y.max(f64::MIN_POSITIVE).ln() + 1.0)),
            ),
            Op::Clamp(a, lo, hi) => acc(
                a,
                g.zip_map(self.value(a), |x, y| if y >= lo && y <= hi { x } else { 0.0 }),
            ),
            Op::Softmax(a, axis) => {
                // s ⊙ (g − Σ g⊙s) per slice
                let gs = g.zip_map(out, |x, s| x * s);
                let dot = sum_axis(&gs, axis);
                let mut ga = gs;
                for_each_slice(&mut ga, out, axis, |v, s, slice| *v -= s * dot.data()[slice]);
                acc(a, ga);
            }
            Op::LogSoftmax(a, axis) => {
                // g − softmax ⊙ Σ g per slice
                let total = sum_axis(g, axis);
                let mut ga = g.clone();
                for_each_slice(&mut ga, out, axis, |v, ls, slice| {
                    *v -= ls.exp() * total.data()[slice]
                });
                acc(a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(a);
                acc(a, Tensor::full(r, c, g.data()[0]));
            }
            Op::SumAxis(a, axis) => {
                let (r, c) = self.shape(a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        let gv = match axis {
                            Axis::Cols => g.get(i, 0),
                            Axis::Rows => g.get(0, j),
                        };
                        ga.set(i, j, gv);
                    }
                }
                acc(a, ga);
            }
            Op::ConcatRows(a, b) => {
                let (ra, c) = self.shape(a);
                let split = ra * c;
                let ga = Tensor::new(ra, c, g.data()[..split].to_vec()).expect("concat grad");
                let gb = Tensor::new(g.rows() - ra, c, g.data()[split..].to_vec())
                    .expect("concat grad");
                acc(a, ga);
                acc(b, gb);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(a);
                let mut ga = Tensor::zeros(r, c);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(a, ga);
            }
            Op::Transpose(a) => acc(a, g.transpose()),
        }
    }
}

/// Visits every entry of `target` alongside the matching entry of `reference`
/// and the index of the softmax slice it belongs to.
fn for_each_slice(
    target: &mut Tensor,
    reference: &Tensor,
    axis: Axis,
    mut f: impl FnMut(&mut f64, f64, usize),
) {
    let cols = target.cols();
    for (idx, (v, &r)) in target
        .data_mut()
        .iter_mut()
        .zip(reference.data())
        .enumerate()
    {
        let slice = match axis {
            Axis::Cols => idx / cols,
            Axis::Rows => idx % cols,
        };
        f(v, r, slice);
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

#[inline]
pub fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

pub fn sum_axis(t: &Tensor, axis: Axis) -> Tensor {
    let (r, c) = t.shape();
    match axis {
        Axis::Cols => {
            let data = (0..r).map(|i| t.row(i).iter().sum()).collect();
            Tensor::new(r, 1, data).expect("shape")
        }
        Axis::Rows => {
            let mut data = vec![0.0; c];
            for i in 0..r {
                for (d, v) in data.iter_mut().zip(t.row(i)) {
                    *d += v;
                }
            }
            Tensor::new(1, c, data).expect("shape")
        }
    }
}

/// Max-subtracted softmax.
pub fn softmax(t: &Tensor, axis: Axis) -> Tensor {
    let (r, c) = t.shape();
    let mut out = t.clone();
    let (slices, len) = match axis {
        Axis::Cols => (r, c),
        Axis::Rows => (c, r),
    };
    let index = |s: usize, k: usize| match axis {
        Axis::Cols => s * c + k,
        Axis::Rows => k * c + s,
    };
    let data = out.data_mut();
    for s in 0..slices {
        let max = (0..len)
            .map(|k| data[index(s, k)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for k in 0..len {
            let e = (data[index(s, k)] - max).exp();
            data[index(s, k)] = e;
            total += e;
        }
        for k in 0..len {
            data[index(s, k)] /= total;
        }
    }
    out
}

pub fn log_softmax(t: &Tensor, axis: Axis) -> Tensor {
    let (r, c) = t.shape();
    let mut out = t.clone();
    let (slices, len) = match axis {
        Axis::Cols => (r, c),
        Axis::Rows => (c, r),
    };
    let index = |s: usize, k: usize| match axis {
        Axis::Cols => s * c + k,
        Axis::Rows => k * c + s,
    };
    let data = out.data_mut();
    for s in 0..slices {
        let max = (0..len)
            .map(|k| data[index(s, k)])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = (0..len)
            .map(|k| (data[index(s, k)] - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        for k in 0..len {
            data[index(s, k)] -= lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.matmul(i, a).unwrap();
        assert_eq!(g.value(p), g.value(a));

        let x = g.constant(t(&[&[1.0, 2.0]]));
        let y = g.constant(t(&[&[3.0], &[4.0]]));
        let d = g.matmul(x, y).unwrap();
        assert_eq!(g.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(3, 4));
        let b = g.constant(Tensor::zeros(3, 2));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        let msg = err.to_string();
        assert!(msg.contains("(3, 4)") && msg.contains("(3, 2)"), "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.scalar(s), 0.5);

        let a = g.constant(t(&[&[1.0, -1.0]]));
        let b = g.constant(t(&[&[0.8, 0.2]]));
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[0.8, -0.2]);
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 2));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(g.mul(a, b), Err(Error::Shape { .. })));
        assert!(matches!(g.sub(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn log_domain_error_names_index() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1.0, 2.0, -0.5]]));
        match g.log(a) {
            Err(Error::Domain { index, value, .. }) => {
                assert_eq!(index, 2);
                assert_eq!(value, -0.5);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
        let z = g.constant(t(&[&[0.0]]));
        assert!(g.log(z).is_err());
    }

    #[test]
    fn sigmoid_derivative_at_one() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let s = g.sigmoid(x);
        let grads = g.backward(s).unwrap();
        // central-difference value, h = 1e-5
        let h = 1e-5;
        let fd = (sigmoid(1.0 + h) - sigmoid(1.0 - h)) / (2.0 * h);
        assert_abs_diff_eq!(fd, 0.19661193, epsilon = 1e-8);
        assert_abs_diff_eq!(grads.get(x).unwrap().data()[0], 0.19661193, epsilon = 1e-8);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[0.0, 0.0], &[2.0, 0.0], &[1000.0, 1000.0]]));
        let s = g.softmax(a, Axis::Cols);
        let v = g.value(s);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(v.get(1, 0), e2 / (e2 + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(v.get(1, 0), 0.88079708, epsilon = 1e-8);
        assert_abs_diff_eq!(v.get(1, 1), 0.11920292, epsilon = 1e-8);
        assert_eq!(v.row(2), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_normalizes_columns() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1.0, 5.0], &[2.0, -3.0], &[0.5, 0.0]]));
        let s = g.softmax(a, Axis::Rows);
        let colsum = sum_axis(g.value(s), Axis::Rows);
        for v in colsum.data() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = g.sum_all(a);
        assert_eq!(g.scalar(s), 10.0);
        let b = g.constant(t(&[&[1.0, 3.0]]));
        let m = g.mean_axis(b, Axis::Cols);
        assert_eq!(g.value(m).data(), &[2.0]);
        let c = g.mean_axis(a, Axis::Rows);
        assert_eq!(g.value(c).data(), &[2.0, 3.0]);
    }

    #[test]
    fn concat_rows_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1.0]]));
        let b = g.constant(t(&[&[2.0]]));
        let c = g.concat_rows(a, b).unwrap();
        assert_eq!(g.value(c), &t(&[&[1.0], &[2.0]]));

        let x = g.constant(t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let y = g.constant(t(&[&[7.0, 8.0, 9.0]]));
        let xy = g.concat_rows(x, y).unwrap();
        assert_eq!(g.value(xy).shape(), (3, 3));
        assert_eq!(g.value(xy).row(2), &[7.0, 8.0, 9.0]);

        let bad = g.constant(Tensor::zeros(1, 2));
        assert!(matches!(g.concat_rows(x, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(2, 3, 0.7));
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(2, 3));
    }

    #[test]
    fn backward_sigmoid_of_product() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(0.0));
        let x = g.constant(Tensor::scalar(1.0));
        let wx = g.mul(w, x).unwrap();
        let s = g.sigmoid(wx);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data()[0], 0.25);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn xlogx_zero_convention() {
        assert_eq!(xlogx(0.0), 0.0);
        let mut g = Graph::new();
        let p = g.param(t(&[&[0.0, 1.0]]));
        let e = g.xlogx(p);
        let s = g.sum_all(e);
        assert_eq!(g.scalar(s), 0.0);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(p).unwrap().is_finite());
    }

    #[test]
    fn deterministic_evaluation() {
        let build = || {
            let mut g = Graph::new();
            let a = g.constant(t(&[&[0.3, -1.2, 2.5], &[1.0, 0.1, -0.4]]));
            let s = g.softmax(a, Axis::Cols);
            let l = g.xlogx(s);
            let m = g.mean_all(l);
            g.value(m).data()[0].to_bits()
        };
        assert_eq!(build(), build());
    }
}
