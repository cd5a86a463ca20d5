//! Reverse-mode automatic differentiation over an eager computation graph.
//!
//! Nodes are appended in define-by-run order, so every node's inputs have
//! smaller ids and a plain reverse id sweep is a valid reverse topological
//! order. `backward` emits the adjoint computation *as new graph nodes built
//! from the same primitive ops*, which makes gradients themselves
//! differentiable: calling `backward` again on a scalar built from gradient
//! nodes yields second-order derivatives. The gradient inversion attack relies
//! on exactly that.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    AddScalar(f64),
    MulScalar(f64),
    Recip,
    Exp,
    Ln,
    Sqrt,
    Sigmoid,
    Clamp { lo: f64, hi: f64 },
    MatMul,
    Transpose,
    Reshape,
    Gather { idx: Arc<Vec<usize>> },
    ScatterAdd { idx: Arc<Vec<usize>> },
    Concat,
    RowSum,
    RowBroadcast { cols: usize },
    RowMax,
    SumAll,
    BroadcastScalar,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Default)]
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].value.shape
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    /// Creates a leaf holding `t`. Leaves are both variables and constants;
    /// only the set passed to `backward` decides what gets differentiated.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], t)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    fn binary_same_shape(&mut self, op: Op, name: &'static str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(CoreError::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<f64> = {
            let (va, vb) = (&self.nodes[a].value.data, &self.nodes[b].value.data);
            match op {
                Op::Add => va.iter().zip(vb).map(|(x, y)| x + y).collect(),
                Op::Sub => va.iter().zip(vb).map(|(x, y)| x - y).collect(),
                Op::Mul => va.iter().zip(vb).map(|(x, y)| x * y).collect(),
                _ => unreachable!(),
            }
        };
        Ok(self.push(op, vec![a, b], Tensor { shape: sa, data }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Mul, "mul", a, b)
    }

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data: self.nodes[x].value.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(op, vec![x], value)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Neg, x, |v| -v)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(Op::AddScalar(c), x, |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(Op::MulScalar(c), x, |v| v * c)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Recip, x, |v| 1.0 / v)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Exp, x, f64::exp)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Ln, x, f64::ln)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sqrt, x, f64::sqrt)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, x, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(Op::Clamp { lo, hi }, x, |v| v.clamp(lo, hi))
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        {
            let va = &self.nodes[a].value.data;
            let vb = &self.nodes[b].value.data;
            for i in 0..m {
                for p in 0..k {
                    let x = va[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let row = &vb[p * n..(p + 1) * n];
                    let out = &mut data[i * n..(i + 1) * n];
                    for j in 0..n {
                        out[j] += x * row[j];
                    }
                }
            }
        }
        Ok(self.push(
            Op::MatMul,
            vec![a, b],
            Tensor {
                shape: vec![m, n],
                data,
            },
        ))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(CoreError::InvalidShape {
                op: "transpose",
                shape: s,
                reason: "expects a 2-D tensor".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.nodes[x].value.data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(
            Op::Transpose,
            vec![x],
            Tensor {
                shape: vec![c, r],
                data,
            },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x].value.len() {
            return Err(CoreError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("element count differs from input {:?}", self.shape(x)),
            });
        }
        let data = self.nodes[x].value.data.clone();
        Ok(self.push(Op::Reshape, vec![x], Tensor { shape, data }))
    }

    /// Pure data movement: `out[i] = in[idx[i]]`. Covers slicing, padding
    /// reads, im2col patch extraction and nearest up/downsampling.
    pub fn gather(&mut self, x: NodeId, idx: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(CoreError::InvalidShape {
                op: "gather",
                shape,
                reason: format!("index map has {} entries", idx.len()),
            });
        }
        let src = &self.nodes[x].value;
        let mut data = Vec::with_capacity(n);
        for &i in idx.iter() {
            if i >= src.len() {
                return Err(CoreError::InvalidArgument(format!(
                    "gather index {i} out of bounds for input of {} values",
                    src.len()
                )));
            }
            data.push(src.data[i]);
        }
        Ok(self.push(Op::Gather { idx }, vec![x], Tensor { shape, data }))
    }

    /// Adjoint of gather: `out[idx[i]] += in[i]` over a zero tensor of `shape`.
    pub fn scatter_add(
        &mut self,
        x: NodeId,
        idx: Arc<Vec<usize>>,
        shape: Vec<usize>,
    ) -> Result<NodeId> {
        let src = &self.nodes[x].value;
        if idx.len() != src.len() {
            return Err(CoreError::InvalidShape {
                op: "scatter_add",
                shape: src.shape.clone(),
                reason: format!("index map has {} entries", idx.len()),
            });
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for (&i, &v) in idx.iter().zip(&src.data) {
            if i >= n {
                return Err(CoreError::InvalidArgument(format!(
                    "scatter index {i} out of bounds for output of {n} values"
                )));
            }
            data[i] += v;
        }
        Ok(self.push(Op::ScatterAdd { idx }, vec![x], Tensor { shape, data }))
    }

    /// Concatenates the flattened values of `a` then `b` into `shape`.
    pub fn concat(&mut self, a: NodeId, b: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        let (la, lb) = (self.nodes[a].value.len(), self.nodes[b].value.len());
        if la + lb != n {
            return Err(CoreError::InvalidShape {
                op: "concat",
                shape,
                reason: format!("inputs hold {la} + {lb} values"),
            });
        }
        let mut data = Vec::with_capacity(n);
        data.extend_from_slice(&self.nodes[a].value.data);
        data.extend_from_slice(&self.nodes[b].value.data);
        Ok(self.push(Op::Concat, vec![a, b], Tensor { shape, data }))
    }

    /// Row-wise sum: `[r,c] -> [r]`.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(CoreError::InvalidShape {
                op: "row_sum",
                shape: s,
                reason: "expects a 2-D tensor".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.nodes[x].value.data;
        let data: Vec<f64> = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(self.push(
            Op::RowSum,
            vec![x],
            Tensor {
                shape: vec![r],
                data,
            },
        ))
    }

    /// Repeats a `[r]` vector into `[r, cols]` rows.
    pub fn row_broadcast(&mut self, x: NodeId, cols: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 {
            return Err(CoreError::InvalidShape {
                op: "row_broadcast",
                shape: s,
                reason: "expects a 1-D tensor".into(),
            });
        }
        let r = s[0];
        let v = &self.nodes[x].value.data;
        let mut data = Vec::with_capacity(r * cols);
        for &x in v {
            data.extend(std::iter::repeat(x).take(cols));
        }
        Ok(self.push(
            Op::RowBroadcast { cols },
            vec![x],
            Tensor {
                shape: vec![r, cols],
                data,
            },
        ))
    }

    /// Row-wise max: `[r,c] -> [r]`. The backward pass routes the adjoint to
    /// the (first) argmax of each row, the usual subgradient choice.
    pub fn row_max(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(CoreError::InvalidShape {
                op: "row_max",
                shape: s,
                reason: "expects a non-empty 2-D tensor".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.nodes[x].value.data;
        let data: Vec<f64> = (0..r)
            .map(|i| v[i * c..(i + 1) * c].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Ok(self.push(
            Op::RowMax,
            vec![x],
            Tensor {
                shape: vec![r],
                data,
            },
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data.iter().sum();
        self.push(Op::SumAll, vec![x], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len().max(1);
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Fills `shape` with the single value of a scalar node.
    pub fn broadcast_scalar(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if !self.nodes[x].value.is_scalar() {
            return Err(CoreError::InvalidShape {
                op: "broadcast_scalar",
                shape: self.shape(x).to_vec(),
                reason: "expects a scalar input".into(),
            });
        }
        let v = self.nodes[x].value.scalar_value();
        let n: usize = shape.iter().product();
        Ok(self.push(
            Op::BroadcastScalar,
            vec![x],
            Tensor {
                shape,
                data: vec![v; n],
            },
        ))
    }

    /// Reverse sweep from scalar `out`, emitting adjoints as new graph nodes.
    /// Returns one gradient node per entry of `wrt` (zeros where `out` does
    /// not depend on the node). Because adjoints are ordinary ops, the
    /// returned nodes can feed further forward computation and be
    /// differentiated again.
    pub fn backward(&mut self, out: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.nodes[out].value.is_scalar() {
            return Err(CoreError::NonScalarOutput(self.shape(out).to_vec()));
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; out + 1];
        let seed = self.leaf(Tensor::scalar(1.0));
        adj[out] = Some(seed);

        for id in (0..=out).rev() {
            let g = match adj[id] {
                Some(g) => g,
                None => continue,
            };
            let inputs = self.nodes[id].inputs.clone();
            if inputs.is_empty() {
                continue;
            }
            let contribs = self.vjp(id, g)?;
            debug_assert_eq!(contribs.len(), inputs.len());
            for (&input, contrib) in inputs.iter().zip(contribs) {
                adj[input] = Some(match adj[input] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adj.get(w).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.leaf(Tensor::zeros(self.shape(w).to_vec()))),
            })
            .collect()
    }

    /// Per-input adjoint contributions of node `id` given output adjoint `g`.
    /// Every rule is expressed with graph ops so the result stays
    /// differentiable.
    fn vjp(&mut self, id: NodeId, g: NodeId) -> Result<Vec<NodeId>> {
        let op = self.nodes[id].op.clone();
        let inputs = self.nodes[id].inputs.clone();
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add => vec![g, g],
            Op::Sub => vec![g, self.neg(g)],
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                vec![self.mul(g, b)?, self.mul(g, a)?]
            }
            Op::Neg => vec![self.neg(g)],
            Op::AddScalar(_) => vec![g],
            Op::MulScalar(c) => vec![self.mul_scalar(g, c)],
            Op::Recip => {
                // d(1/x) = -y^2 dx, reusing the output node y.
                let y2 = self.mul(id, id)?;
                let gy = self.mul(g, y2)?;
                vec![self.neg(gy)]
            }
            Op::Exp => vec![self.mul(g, id)?],
            Op::Ln => {
                let r = self.recip(inputs[0]);
                vec![self.mul(g, r)?]
            }
            Op::Sqrt => {
                let r = self.recip(id);
                let h = self.mul_scalar(r, 0.5);
                vec![self.mul(g, h)?]
            }
            Op::Sigmoid => {
                let ny = self.neg(id);
                let one_minus = self.add_scalar(ny, 1.0);
                let d = self.mul(id, one_minus)?;
                vec![self.mul(g, d)?]
            }
            Op::Clamp { lo, hi } => {
                let x = &self.nodes[inputs[0]].value;
                let mask = Tensor {
                    shape: x.shape.clone(),
                    data: x
                        .data
                        .iter()
                        .map(|&v| if v >= lo && v <= hi { 1.0 } else { 0.0 })
                        .collect(),
                };
                let m = self.leaf(mask);
                vec![self.mul(g, m)?]
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let bt = self.transpose(b)?;
                let da = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let db = self.matmul(at, g)?;
                vec![da, db]
            }
            Op::Transpose => vec![self.transpose(g)?],
            Op::Reshape => {
                let shape = self.shape(inputs[0]).to_vec();
                vec![self.reshape(g, shape)?]
            }
            Op::Gather { idx } => {
                let shape = self.shape(inputs[0]).to_vec();
                vec![self.scatter_add(g, idx, shape)?]
            }
            Op::ScatterAdd { idx } => {
                let shape = self.shape(inputs[0]).to_vec();
                vec![self.gather(g, idx, shape)?]
            }
            Op::Concat => {
                let (la, lb) = (
                    self.nodes[inputs[0]].value.len(),
                    self.nodes[inputs[1]].value.len(),
                );
                let sa = self.shape(inputs[0]).to_vec();
                let sb = self.shape(inputs[1]).to_vec();
                let ia = Arc::new((0..la).collect::<Vec<_>>());
                let ib = Arc::new((la..la + lb).collect::<Vec<_>>());
                vec![self.gather(g, ia, sa)?, self.gather(g, ib, sb)?]
            }
            Op::RowSum => {
                let cols = self.shape(inputs[0])[1];
                vec![self.row_broadcast(g, cols)?]
            }
            Op::RowBroadcast { .. } => vec![self.row_sum(g)?],
            Op::RowMax => {
                let x = &self.nodes[inputs[0]].value;
                let (r, c) = (x.shape[0], x.shape[1]);
                let idx: Vec<usize> = (0..r)
                    .map(|i| {
                        let row = &x.data[i * c..(i + 1) * c];
                        let mut best = 0;
                        for (j, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = j;
                            }
                        }
                        i * c + best
                    })
                    .collect();
                let shape = x.shape.clone();
                vec![self.scatter_add(g, Arc::new(idx), shape)?]
            }
            Op::SumAll => {
                let shape = self.shape(inputs[0]).to_vec();
                vec![self.broadcast_scalar(g, shape)?]
            }
            Op::BroadcastScalar => vec![self.sum_all(g)],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).scalar_value(), 0.5);
    }

    #[test]
    fn d_x_squared() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y, &[x]).unwrap();
        assert_eq!(g.value(grads[0]).scalar_value(), 6.0);
    }

    #[test]
    fn d_sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let grads = g.backward(y, &[x]).unwrap();
        assert!((g.value(grads[0]).scalar_value() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x, &[x]),
            Err(CoreError::NonScalarOutput(_))
        ));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let z = g.leaf(Tensor::from_vec(vec![5.0, 6.0]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y, &[z]).unwrap();
        assert_eq!(g.value(grads[0]).data, vec![0.0, 0.0]);
    }

    #[test]
    fn matmul_known_product() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn second_order_of_cube() {
        // y = x^3, dy/dx = 3x^2, d2y/dx2 = 6x.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let x2 = g.mul(x, x).unwrap();
        let y = g.mul(x2, x).unwrap();
        let first = g.backward(y, &[x]).unwrap()[0];
        assert_eq!(g.value(first).scalar_value(), 12.0);
        let second = g.backward(first, &[x]).unwrap()[0];
        assert_eq!(g.value(second).scalar_value(), 12.0);
    }

    #[test]
    fn second_order_through_sigmoid() {
        // f(x) = sigmoid(x)^2; f'(x) = 2 s s(1-s); verified numerically below.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.3));
        let s = g.sigmoid(x);
        let y = g.mul(s, s).unwrap();
        let first = g.backward(y, &[x]).unwrap()[0];
        let second = g.backward(first, &[x]).unwrap()[0];

        let f = |v: f64| {
            let s = 1.0 / (1.0 + (-v).exp());
            s * s
        };
        let h = 1e-5;
        let fd2 = (f(0.3 + h) - 2.0 * f(0.3) + f(0.3 - h)) / (h * h);
        assert!(
            (g.value(second).scalar_value() - fd2).abs() < 1e-5,
            "{} vs {}",
            g.value(second).scalar_value(),
            fd2
        );
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let idx = Arc::new(vec![2usize, 0, 1, 2]);
        let y = g.gather(x, idx, vec![4]).unwrap();
        assert_eq!(g.value(y).data, vec![3.0, 1.0, 2.0, 3.0]);
        let s = g.sum_all(y);
        let grads = g.backward(s, &[x]).unwrap();
        // index 2 used twice.
        assert_eq!(g.value(grads[0]).data, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn leaf_values_untouched_by_tracing() {
        let t = Tensor::from_vec(vec![1.5, -2.5]);
        let mut g = Graph::new();
        let x = g.leaf(t.clone());
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        let _ = g.backward(s, &[x]).unwrap();
        assert_eq!(g.value(x).data, t.data);
        drop(g);
        assert_eq!(t.data, vec![1.5, -2.5]);
    }
}
