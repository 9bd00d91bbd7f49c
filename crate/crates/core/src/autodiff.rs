//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so the node list
//! is already a topological order: parents always have smaller ids than
//! their children. [`Graph::backward`] walks the list once in reverse.
//!
//! Parameters enter the graph through [`Graph::param`] with a caller-chosen
//! key; [`Gradients::param`] looks gradients up by that key and returns a
//! zero tensor for parameters that never reached the loss.

use crate::error::{Result, VdmError};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Broadcast(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    a.same_shape(b)
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A constant leaf; gradients with respect to it are still recorded.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// A trainable leaf identified by `key`.
    pub fn param(&mut self, key: usize, value: &Tensor) -> NodeId {
        self.push(Op::Param(key), value.clone())
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// Adds a `[n]`/`[1,n]` bias to each row of a `[m,n]` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.len() != av.cols() {
            return Err(VdmError::Dimension {
                expected: vec![av.cols()],
                got: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        let c = av.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        Ok(self.push(Op::AddBias(a, bias), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same(self.value(a), self.value(b))?;
        let v = self.value(a).axpby(1.0, self.value(b), 1.0)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).axpby(1.0, self.value(b), -1.0)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Scales row `i` of a `[m,n]` matrix by entry `i` of a `[m,1]` column.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.len() != av.rows() {
            return Err(VdmError::Dimension {
                expected: vec![av.rows(), 1],
                got: cv.shape().to_vec(),
            });
        }
        let c = av.cols();
        let mut out = av.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= cv.data()[i / c];
        }
        Ok(self.push(Op::MulCol(a, col), out))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(crate::schedule::sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sin);
        self.push(Op::Sin(a), v)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::cos);
        self.push(Op::Cos(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    /// Repeats a `[1,n]` row (or a scalar) `rows` times.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, c], data).expect("broadcast shape");
        self.push(Op::Broadcast(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        self.push(Op::Mean(a), v)
    }

    /// Row sums of a `[m,n]` matrix, as a `[m,1]` column.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let m = t.rows();
        let data = (0..m).map(|i| t.row(i).iter().sum()).collect();
        let v = Tensor::new(vec![m, 1], data).expect("row-sum shape");
        self.push(Op::SumCols(a), v)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for p in parts {
            if self.value(*p).rows() != m {
                return Err(VdmError::Dimension {
                    expected: vec![m],
                    got: vec![self.value(*p).rows()],
                });
            }
        }
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![m, total], data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), v))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a);
        if start >= end || end > t.cols() {
            return Err(VdmError::Contract(format!(
                "column slice {start}..{end} of width {}",
                t.cols()
            )));
        }
        let m = t.rows();
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let v = Tensor::new(vec![m, end - start], data)?;
        Ok(self.push(Op::Slice(a, start, end), v))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(VdmError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            // leaves keep their gradient; interior ones are consumed
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, 0.0);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, 0.0);
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
                Op::AddBias(a, bias) => {
                    let bv = self.value(*bias);
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[i % c] += v;
                    }
                    accumulate(&mut grads, *bias, Tensor::new(bv.shape().to_vec(), gb)?);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let c = av.cols();
                    let mut ga = g.clone();
                    let mut gc = vec![0.0; cv.len()];
                    for (i, v) in ga.data_mut().iter_mut().enumerate() {
                        gc[i / c] += *v * av.data()[i];
                        *v *= cv.data()[i / c];
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *col, Tensor::new(cv.shape().to_vec(), gc)?);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |gi, y| gi * y)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sin(a) => {
                    let ga = g.zip_map(self.value(*a), |gi, x| gi * x.cos())?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Cos(a) => {
                    let ga = g.zip_map(self.value(*a), |gi, x| -gi * x.sin())?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |gi, x| 2.0 * gi * x)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = g.zip_map(&node.value, |gi, y| 0.5 * gi / y)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Recip(a) => {
                    let ga = g.zip_map(&node.value, |gi, y| -gi * y * y)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Broadcast(a) => {
                    let av = self.value(*a);
                    let c = av.len();
                    let mut ga = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        ga[i % c] += v;
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), s));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let s = g.data()[0] / av.len().max(1) as f64;
                    accumulate(&mut grads, *a, Tensor::full(av.shape(), s));
                }
                Op::SumCols(a) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let data = (0..av.len()).map(|i| g.data()[i / c]).collect();
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), data)?);
                }
                Op::Concat(parts) => {
                    let m = g.rows();
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let w = pv.cols();
                        let mut data = Vec::with_capacity(m * w);
                        for i in 0..m {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        accumulate(&mut grads, *p, Tensor::new(pv.shape().to_vec(), data)?);
                        offset += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.shape());
                    let w = end - start;
                    for i in 0..av.rows() {
                        ga.row_mut(i)[*start..*end].copy_from_slice(&g.row(i)[..w]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Ok(Gradients {
            keys: self
                .nodes
                .iter()
                .map(|n| match n.op {
                    Op::Param(k) => Some(k),
                    _ => None,
                })
                .collect(),
            grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    keys: Vec<Option<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf node.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for parameter `key`, summed over every node that used it.
    /// `like` gives the shape of the zero tensor returned when the parameter
    /// is not on any path to the loss.
    pub fn param(&self, key: usize, like: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(like.shape());
        for (k, g) in self.keys.iter().zip(&self.grads) {
            if let (Some(k), Some(g)) = (k, g) {
                if *k == key && g.len() == out.len() {
                    for (a, b) in out.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_is_the_input() {
        let mut g = Graph::new();
        let w = g.param(0, &Tensor::vector(vec![0.3, -1.2, 2.0]));
        let x = g.input(Tensor::vector(vec![1.5, 2.5, -0.5]));
        let wx = g.mul(w, x).unwrap();
        let loss = g.sum(wx);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(0, g.value(w)).data(), &[1.5, 2.5, -0.5]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::new();
        let w = g.param(0, &Tensor::scalar(0.0));
        let s = g.sigmoid(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(0, g.value(w)).data(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut g = Graph::new();
        let w = g.param(0, &Tensor::vector(vec![1.0, 2.0]));
        let y = g.tanh(w);
        assert!(matches!(g.backward(y), Err(VdmError::Contract(_))));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let used = g.param(0, &Tensor::scalar(2.0));
        let unused = g.param(1, &Tensor::vector(vec![1.0, 1.0]));
        let sq = g.square(used);
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.param(0, g.value(used)).data(), &[4.0]);
        assert_eq!(grads.param(1, g.value(unused)).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        // loss = sum(w * w) + sum(w) with w used through two paths
        let mut g = Graph::new();
        let w = g.param(7, &Tensor::vector(vec![1.0, -3.0]));
        let w2 = g.mul(w, w).unwrap();
        let both = g.add(w2, w).unwrap();
        let loss = g.sum(both);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(7, g.value(w)).data(), &[3.0, -5.0]);
    }

    fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn every_op_matches_central_differences() {
        let a0 = Tensor::matrix(3, 2, vec![0.2, -0.7, 1.1, 0.4, -0.3, 0.9]).unwrap();
        let b0 = Tensor::matrix(2, 4, vec![0.5, -0.1, 0.3, 0.8, -0.6, 0.2, 0.7, -0.4]).unwrap();
        let build = |a: &Tensor, b: &Tensor| -> (Graph, NodeId, NodeId, NodeId) {
            let mut g = Graph::new();
            let an = g.param(0, a);
            let bn = g.param(1, b);
            let ab = g.matmul(an, bn).unwrap();
            let bias = g.input(Tensor::vector(vec![0.1, 0.2, -0.3, 0.05]));
            let h = g.add_bias(ab, bias).unwrap();
            let t = g.tanh(h);
            let s = g.sigmoid(h);
            let e = g.exp(t);
            let sn = g.sin(s);
            let cs = g.cos(h);
            let m1 = g.mul(e, sn).unwrap();
            let m2 = g.sub(m1, cs).unwrap();
            let rs = g.sum_cols(m2);
            let scaled = g.mul_col(m2, rs).unwrap();
            let sl = g.slice_cols(scaled, 1, 3).unwrap();
            let cat = g.concat_cols(&[sl, an]).unwrap();
            let sq = g.square(cat);
            let sc = g.scale(sq, 0.7);
            let sh = g.add_scalar(sc, 1.0);
            let sr = g.sqrt(sh);
            let rc = g.recip(sr);
            let m = g.mean(rc);
            let bc = g.broadcast_rows(m, 3);
            let tail = g.sum(bc);
            let loss = g.add(m, tail).unwrap();
            (g, an, bn, loss)
        };
        let (g, an, bn, loss) = build(&a0, &b0);
        let grads = g.backward(loss).unwrap();
        let ga = grads.param(0, g.value(an));
        let gb = grads.param(1, g.value(bn));
        let fa = |a: &Tensor| {
            let (g, _, _, l) = build(a, &b0);
            g.value(l).data()[0]
        };
        let fb = |b: &Tensor| {
            let (g, _, _, l) = build(&a0, b);
            g.value(l).data()[0]
        };
        for (an_, nu) in ga.data().iter().zip(numeric_grad(fa, &a0, 1e-6)) {
            assert!((an_ - nu).abs() <= 1e-7 * (1.0 + nu.abs()), "{an_} vs {nu}");
        }
        for (an_, nu) in gb.data().iter().zip(numeric_grad(fb, &b0, 1e-6)) {
            assert!((an_ - nu).abs() <= 1e-7 * (1.0 + nu.abs()), "{an_} vs {nu}");
        }
    }
}
