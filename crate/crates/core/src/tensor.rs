//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The op set is deliberately closed: matmul, add, sub, hadamard, sigmoid,
//! tanh, prelu, square, concat and mean are everything the forecaster needs.
//! There is no broadcasting; bias terms are expanded with an explicit
//! ones-matmul by the model code.

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.contains(&0) {
            return Err(Error::BadTensorData {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: Option<String> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    PRelu { input: NodeId, slope: NodeId },
    Square(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Mean(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of forward operations. Nodes are stored in topological
/// order by construction, so one reverse sweep visits every node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    named: Vec<NodeId>,
}

/// Gradients keyed by leaf name, as produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: indexmap::IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// c[i,j] += sum_k a[i,k] * b[k,j], accumulated in ascending k so that each
/// output row depends only on the matching input row (keeps batched and
/// per-sample evaluation bit-identical).
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aik) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// c[i,k] += sum_j a[i,j] * b[k,j] (b used transposed).
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            c[i * k + kk] += s;
        }
    }
}

/// c[k,j] += sum_i a[i,k] * b[i,j] (a used transposed).
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Register a named leaf (a learnable parameter).
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.push(
            value,
            Op::Leaf {
                name: Some(name.into()),
            },
        );
        self.named.push(id);
        id
    }

    /// Register an unnamed constant (inputs, targets, the ones column).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { name: None })
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| f(x)).collect(),
        };
        self.push(value, op)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// PReLU with one learnable slope per channel of the input's last
    /// dimension: y = x if x > 0, else slope[channel] * x.
    pub fn prelu(&mut self, input: NodeId, slope: NodeId) -> Result<NodeId> {
        let (tx, ts) = (&self.nodes[input.0].value, &self.nodes[slope.0].value);
        let channels = tx.cols();
        if ts.shape().len() != 1 || ts.shape()[0] != channels {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                left: tx.shape().to_vec(),
                right: ts.shape().to_vec(),
            });
        }
        let slopes = ts.data().to_vec();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| if x > 0.0 { x } else { slopes[idx % channels] * x })
            .collect();
        let value = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        Ok(self.push(value, Op::PRelu { input, slope }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let rank = self.nodes[parts[0].0].value.shape().len();
        if axis >= rank {
            return Err(Error::AxisOutOfRange {
                op: "concat",
                axis,
                rank,
            });
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let mut axis_total = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == rank
                && s.iter()
                    .enumerate()
                    .all(|(d, &e)| d == axis || e == first[d]);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;

        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        if axis == 0 {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.data());
            }
        } else {
            // axis == 1 on rank-2 tensors: splice each row from every part.
            let rows = shape[0];
            for r in 0..rows {
                for &p in parts {
                    let t = &self.nodes[p.0].value;
                    let c = t.cols();
                    data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Mean over all entries, producing a scalar node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let v = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        self.push(Tensor::scalar(v), Op::Mean(a))
    }

    /// (a - b)^2 for scalar nodes.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        Ok(self.square(d))
    }

    /// Reverse sweep from a scalar loss. Returns a gradient per named leaf;
    /// leaves the loss does not reach get zero gradients. Forward values are
    /// left untouched.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let out_value = &self.nodes[idx].value;
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = {
                        let sa = self.nodes[a.0].value.shape();
                        (sa[0], sa[1])
                    };
                    let n = self.nodes[b.0].value.shape()[1];
                    {
                        let bd = self.nodes[b.0].value.data();
                        let ga = ensure(&mut grads, *a, m * k);
                        matmul_nt_acc(&g, bd, m, n, k, ga);
                    }
                    {
                        let ad = self.nodes[a.0].value.data();
                        let gb = ensure(&mut grads, *b, k * n);
                        matmul_tn_acc(ad, &g, m, k, n, gb);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, |gi| gi);
                    accumulate(&mut grads, *b, &g, |gi| gi);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, |gi| gi);
                    accumulate(&mut grads, *b, &g, |gi| -gi);
                }
                Op::Hadamard(a, b) => {
                    {
                        let bd = self.nodes[b.0].value.data().to_vec();
                        let ga = ensure(&mut grads, *a, g.len());
                        for (i, gi) in g.iter().enumerate() {
                            ga[i] += gi * bd[i];
                        }
                    }
                    {
                        let ad = self.nodes[a.0].value.data().to_vec();
                        let gb = ensure(&mut grads, *b, g.len());
                        for (i, gi) in g.iter().enumerate() {
                            gb[i] += gi * ad[i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let out = out_value.data().to_vec();
                    let ga = ensure(&mut grads, *a, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        let s = out[i];
                        ga[i] += gi * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    let out = out_value.data().to_vec();
                    let ga = ensure(&mut grads, *a, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        let t = out[i];
                        ga[i] += gi * (1.0 - t * t);
                    }
                }
                Op::PRelu { input, slope } => {
                    let x = self.nodes[input.0].value.data().to_vec();
                    let slopes = self.nodes[slope.0].value.data().to_vec();
                    let channels = slopes.len();
                    {
                        let gx = ensure(&mut grads, *input, x.len());
                        for (i, gi) in g.iter().enumerate() {
                            gx[i] += gi * if x[i] > 0.0 { 1.0 } else { slopes[i % channels] };
                        }
                    }
                    {
                        let gs = ensure(&mut grads, *slope, channels);
                        for (i, gi) in g.iter().enumerate() {
                            if x[i] <= 0.0 {
                                gs[i % channels] += gi * x[i];
                            }
                        }
                    }
                }
                Op::Square(a) => {
                    let x = self.nodes[a.0].value.data().to_vec();
                    let ga = ensure(&mut grads, *a, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * 2.0 * x[i];
                    }
                }
                Op::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut offset = 0;
                        for &p in parts {
                            let len = self.nodes[p.0].value.numel();
                            let gp = ensure(&mut grads, p, len);
                            for i in 0..len {
                                gp[i] += g[offset + i];
                            }
                            offset += len;
                        }
                    } else {
                        let rows = out_value.shape()[0];
                        let out_cols = out_value.shape()[1];
                        let mut col_offset = 0;
                        for &p in parts {
                            let c = self.nodes[p.0].value.cols();
                            let gp = ensure(&mut grads, p, rows * c);
                            for r in 0..rows {
                                for j in 0..c {
                                    gp[r * c + j] += g[r * out_cols + col_offset + j];
                                }
                            }
                            col_offset += c;
                        }
                    }
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.numel();
                    let scale = g[0] / n as f64;
                    let ga = ensure(&mut grads, *a, n);
                    for gi in ga.iter_mut() {
                        *gi += scale;
                    }
                }
            }
        }

        let mut entries = indexmap::IndexMap::new();
        for &id in &self.named {
            let Op::Leaf { name: Some(name) } = &self.nodes[id.0].op else {
                continue;
            };
            let shape = self.nodes[id.0].value.shape().to_vec();
            let data = match &grads[id.0] {
                Some(g) => g.clone(),
                None => vec![0.0; self.nodes[id.0].value.numel()],
            };
            entries.insert(name.clone(), Tensor { shape, data });
        }
        Ok(Gradients { entries })
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64], f: impl Fn(f64) -> f64) {
    let target = grads[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
    for (t, &gi) in target.iter_mut().zip(g) {
        *t += f(gi);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Central finite differences of `f` w.r.t. every named leaf.
    fn numerical_grads(
        f: &dyn Fn(&[(&str, Tensor)]) -> f64,
        leaves: &[(&str, Tensor)],
        step: f64,
    ) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for li in 0..leaves.len() {
            let mut g = vec![0.0; leaves[li].1.numel()];
            for i in 0..g.len() {
                let mut plus: Vec<(&str, Tensor)> = leaves.to_vec();
                let mut d = plus[li].1.data().to_vec();
                d[i] += step;
                plus[li].1 = Tensor::new(plus[li].1.shape().to_vec(), d).unwrap();

                let mut minus: Vec<(&str, Tensor)> = leaves.to_vec();
                let mut d = minus[li].1.data().to_vec();
                d[i] -= step;
                minus[li].1 = Tensor::new(minus[li].1.shape().to_vec(), d).unwrap();

                g[i] = (f(&plus) - f(&minus)) / (2.0 * step);
            }
            out.push(g);
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale < 1e-8 {
            0.0
        } else {
            (a - b).abs() / scale.max(1e-3)
        }
    }

    fn check_against_fd(
        build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
        leaves: &[(&str, Tensor)],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves
            .iter()
            .map(|(n, t)| tape.leaf(*n, t.clone()))
            .collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();

        let eval = |ls: &[(&str, Tensor)]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = ls.iter().map(|(n, x)| t.leaf(*n, x.clone())).collect();
            let l = build(&mut t, &ids);
            t.value(l).item()
        };
        let numeric = numerical_grads(&eval, leaves, 1e-6);
        for (li, (name, _)) in leaves.iter().enumerate() {
            let g = grads.get(name).unwrap();
            for (i, (&a, &b)) in g.data().iter().zip(&numeric[li]).enumerate() {
                let e = rel_err(a, b);
                assert!(
                    e <= tol,
                    "{name}[{i}]: tape {a} vs fd {b} (rel err {e:.3e})"
                );
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let out = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_gradient_of_sum_is_ones_pattern() {
        // d sum(A·B) / dA at A=[[1,2],[3,4]], B=[[1],[1]] is [[1,1],[1,1]].
        let mut tape = Tape::new();
        let a = tape.leaf("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let prod = tape.matmul(a, b).unwrap();
        let total = tape.mean(prod); // mean = sum / 2
        let grads = tape.backward(total).unwrap();
        let ga = grads.get("a").unwrap();
        for &g in ga.data() {
            assert!((g - 0.5).abs() < 1e-15); // sum-gradient 1.0 scaled by 1/2
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn sigmoid_tanh_at_zero() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3]));
        let s = tape.sigmoid(z);
        let t = tape.tanh(z);
        assert!(tape.value(s).data().iter().all(|&v| v == 0.5));
        assert!(tape.value(t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prelu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![-2.0, 3.0]).unwrap());
        let a = tape.constant(Tensor::vector(vec![0.25, 0.25]));
        let y = tape.prelu(x, a).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.5, 3.0]);
    }

    #[test]
    fn backward_square_and_sigmoid_oracles() {
        // loss = theta^2 at theta=3 -> grad 6
        let mut tape = Tape::new();
        let th = tape.leaf("theta", Tensor::scalar(3.0));
        let sq = tape.square(th);
        let grads = tape.backward(sq).unwrap();
        assert!((grads.get("theta").unwrap().item() - 6.0).abs() < 1e-15);

        // loss = mean(sigmoid(theta)) at theta=0 -> grad 0.25/n per entry
        let mut tape = Tape::new();
        let th = tape.leaf("theta", Tensor::zeros(&[4]));
        let s = tape.sigmoid(th);
        let m = tape.mean(s);
        let grads = tape.backward(m).unwrap();
        for &g in grads.get("theta").unwrap().data() {
            assert!((g - 0.25 / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let th = tape.leaf("theta", Tensor::vector(vec![1.0, 2.0]));
        let s = tape.square(th);
        assert!(matches!(
            tape.backward(s),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn unreached_leaves_get_zero_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf("a", Tensor::scalar(2.0));
        let _b = tape.leaf("b", Tensor::vector(vec![1.0, 1.0]));
        let loss = tape.square(a);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("b").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn concat_shapes_and_single_part_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).shape(), &[5]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);

        let single = tape.concat(&[a], 0).unwrap();
        assert_eq!(tape.value(single).data(), &[1.0, 2.0]);

        let err = tape.concat(&[a, b], 3).unwrap_err();
        assert!(matches!(err, Error::AxisOutOfRange { .. }));
    }

    #[test]
    fn concat_of_twelve_states_of_size_twenty() {
        let mut tape = Tape::new();
        let parts: Vec<NodeId> = (0..12)
            .map(|i| tape.constant(Tensor::matrix(1, 20, vec![i as f64; 20]).unwrap()))
            .collect();
        let c = tape.concat(&parts, 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 240]);
    }

    #[test]
    fn backward_does_not_mutate_forward_values() {
        let mut tape = Tape::new();
        let a = tape.leaf("a", Tensor::vector(vec![0.3, -0.7]));
        let s = tape.sigmoid(a);
        let m = tape.mean(s);
        let before: Vec<Vec<f64>> = (0..tape.len())
            .map(|i| tape.value(NodeId(i)).data().to_vec())
            .collect();
        tape.backward(m).unwrap();
        for i in 0..tape.len() {
            assert_eq!(tape.value(NodeId(i)).data(), before[i].as_slice());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::matrix(2, 2, vec![0.1, -0.2, 0.3, 0.4]).unwrap());
            let b = tape.constant(Tensor::matrix(2, 2, vec![0.5, 0.6, -0.7, 0.8]).unwrap());
            let p = tape.matmul(a, b).unwrap();
            let s = tape.sigmoid(p);
            let m = tape.mean(s);
            tape.value(m).item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_op_matches_finite_differences_over_100_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[4, 2]);
            let c = rand_tensor(&mut rng, &[3, 2]);
            let slope = rand_tensor(&mut rng, &[2]);

            check_against_fd(
                &|tape, ids| {
                    let p = tape.matmul(ids[0], ids[1]).unwrap();
                    let q = tape.add(p, ids[2]).unwrap();
                    let r = tape.sub(q, ids[2]).unwrap();
                    let h = tape.hadamard(r, ids[2]).unwrap();
                    let s = tape.sigmoid(h);
                    let t = tape.tanh(s);
                    let pr = tape.prelu(t, ids[3]).unwrap();
                    let sq = tape.square(pr);
                    let cat = tape.concat(&[sq, s], 1).unwrap();
                    tape.mean(cat)
                },
                &[
                    ("a", a.clone()),
                    ("b", b.clone()),
                    ("c", c.clone()),
                    ("slope", slope.clone()),
                ],
                1e-5,
            );
        }
    }

    #[test]
    fn prelu_slope_gradient_covers_negative_branch() {
        // Force negative inputs so the slope gradient is exercised.
        let x = Tensor::matrix(2, 3, vec![-1.0, -2.0, 0.5, -0.3, 1.5, -4.0]).unwrap();
        let slope = Tensor::vector(vec![0.25, 0.1, 0.9]);
        check_against_fd(
            &|tape, ids| {
                let y = tape.prelu(ids[0], ids[1]).unwrap();
                tape.mean(y)
            },
            &[("x", x), ("slope", slope)],
            1e-6,
        );
    }
}
