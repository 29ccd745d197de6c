//! Reverse-mode tape over a fixed vocabulary of matrix operations.
//!
//! Every forward operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into a [`Grads`]
//! buffer aligned with the [`ParamStore`] the tape reads from. Parameters are
//! borrowed, never copied, so a tape is cheap to build per voxel.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use super::params::{Grads, ParamStore};
use super::tensor::{matmul, matmul_a_bt_into, matmul_at_b_into, Tensor};
use crate::graph::EdgeList;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Vector norms below this are treated as degenerate by [`rotation_from_6d`].
pub const ROTATION_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
    Reshape(Var),
    Transpose(Var),
    EdgeDiff(Var, Rc<EdgeList>),
    SegmentSum(Var, Rc<EdgeList>),
    SumSqRows(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Rot6d(Var, Option<Box<GramSchmidt>>),
    Chamfer(Var, Rc<Tensor>, Vec<usize>, Vec<usize>),
    EdgeConv(EdgeConvArgs),
}

#[derive(Debug)]
struct EdgeConvArgs {
    z: Var,
    weights: Var,
    w_edge: Var,
    bias: Var,
    edges: Rc<EdgeList>,
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Intermediate quantities of the 6-number rotation construction.
#[derive(Debug, Clone)]
struct GramSchmidt {
    a2: [f64; 3],
    b1: [f64; 3],
    b2: [f64; 3],
    norm1: f64,
    norm2: f64,
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn gram_schmidt(r: &[f64]) -> Option<GramSchmidt> {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let norm1 = dot(&a1, &a1).sqrt();
    if !(norm1 >= ROTATION_EPS) {
        return None;
    }
    let b1 = [a1[0] / norm1, a1[1] / norm1, a1[2] / norm1];
    let proj = dot(&b1, &a2);
    let u2 = [a2[0] - proj * b1[0], a2[1] - proj * b1[1], a2[2] - proj * b1[2]];
    let norm2 = dot(&u2, &u2).sqrt();
    if !(norm2 >= ROTATION_EPS) {
        return None;
    }
    let b2 = [u2[0] / norm2, u2[1] / norm2, u2[2] / norm2];
    Some(GramSchmidt { a2, b1, b2, norm1, norm2 })
}

fn rotation_columns(gs: &GramSchmidt) -> [[f64; 3]; 3] {
    let b3 = cross(&gs.b1, &gs.b2);
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        m[r] = [gs.b1[r], gs.b2[r], b3[r]];
    }
    m
}

/// Rotation matrix (row-major) from two 3-vectors: the first is normalized,
/// the second orthogonalized against it and normalized, the third column is
/// their cross product. Returns `None` when either vector is degenerate.
pub fn rotation_from_6d(r: &[f64; 6]) -> Option<[[f64; 3]; 3]> {
    gram_schmidt(r).map(|gs| rotation_columns(&gs))
}

/// Like [`rotation_from_6d`] but falls back to the identity.
pub fn rotation_or_identity(r: &[f64; 6]) -> [[f64; 3]; 3] {
    rotation_from_6d(r).unwrap_or([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    kinks: Option<DefaultHasher>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            kinks: None,
        }
    }

    /// Records a fingerprint of every non-smooth branch taken (ReLU signs,
    /// max/argmin selections, rotation fallbacks). Two forward passes with the
    /// same fingerprint evaluate the same smooth piece of the function.
    pub fn with_kink_tracking(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            kinks: Some(DefaultHasher::new()),
        }
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(|h| h.finish())
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.tensor(id),
            _ => node.value.as_ref().expect("non-parameter node has a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Folds a discrete choice made outside the tape (e.g. a neighbor
    /// ranking computed from node values) into the kink signature.
    pub fn note_kink<T: Hash>(&mut self, t: T) {
        if let Some(h) = self.kinks.as_mut() {
            t.hash(h);
        }
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), self.shape(b), "add shapes");
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// `a (n x c) + b (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        let bias = self.value(b);
        assert_eq!((1, v.cols()), bias.shape(), "add_row shapes");
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(bias.data()) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b), &[a, b])
    }

    /// `a (n x c) * b (1 x c)` elementwise, broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        let s = self.value(b);
        assert_eq!((1, v.cols()), s.shape(), "mul_row shapes");
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(s.data()) {
                *x *= y;
            }
        }
        self.push(v, Op::MulRow(a, b), &[a, b])
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale_in_place(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            if !(*x > 0.0) {
                *x = 0.0;
            }
        }
        if self.kinks.is_some() {
            let signs: Vec<bool> = self.value(a).data().iter().map(|&x| x > 0.0).collect();
            self.note_kink(signs);
        }
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.exp();
        }
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row counts");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// `1 x c -> rows x c`.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), 1, "repeat_rows expects a row vector");
        let mut data = Vec::with_capacity(rows * t.cols());
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(rows, t.cols(), data);
        self.push(v, Op::RepeatRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    /// Row `e` is `x[src[e]] - x[dst[e]]`.
    pub fn edge_diff(&mut self, x: Var, edges: Rc<EdgeList>) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows(), edges.nodes, "edge_diff node count");
        let c = t.cols();
        let mut v = Tensor::zeros(edges.len(), c);
        for e in 0..edges.len() {
            let (s, d) = (t.row(edges.src[e]), t.row(edges.dst[e]));
            for ((o, a), b) in v.row_mut(e).iter_mut().zip(s).zip(d) {
                *o = a - b;
            }
        }
        self.push(v, Op::EdgeDiff(x, edges), &[x])
    }

    /// Row `i` is the sum of edge rows whose `dst` is `i`, in edge order.
    pub fn segment_sum(&mut self, x: Var, edges: Rc<EdgeList>) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows(), edges.len(), "segment_sum edge count");
        let c = t.cols();
        let mut v = Tensor::zeros(edges.nodes, c);
        for e in 0..edges.len() {
            let src = t.row(e);
            for (o, a) in v.row_mut(edges.dst[e]).iter_mut().zip(src) {
                *o += a;
            }
        }
        self.push(v, Op::SegmentSum(x, edges), &[x])
    }

    /// `n x c -> n x 1`, squared Euclidean norm of each row.
    pub fn sum_sq_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().map(|x| x * x).sum()).collect();
        let v = Tensor::from_vec(t.rows(), 1, data);
        self.push(v, Op::SumSqRows(a), &[a])
    }

    /// Column mean `X^T 1 / n` as a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = column_mean(self.value(a));
        self.push(v, Op::MeanRows(a), &[a])
    }

    /// Column maximum as a `1 x c` row; the first maximal row wins.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(t.rows() > 0, "max_rows of an empty tensor");
        let c = t.cols();
        let mut best = t.row(0).to_vec();
        let mut arg = vec![0usize; c];
        for r in 1..t.rows() {
            for (k, &x) in t.row(r).iter().enumerate() {
                if x > best[k] {
                    best[k] = x;
                    arg[k] = r;
                }
            }
        }
        self.note_kink(&arg);
        self.push(Tensor::row_vector(best), Op::MaxRows(a, arg), &[a])
    }

    /// `1 x 6 -> 3 x 3` rotation; identity (with zero gradient) when degenerate.
    pub fn rot6d(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape(), (1, 6), "rot6d expects 1x6");
        let gs = gram_schmidt(t.data());
        let m = match &gs {
            Some(gs) => rotation_columns(gs),
            None => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        };
        self.note_kink(gs.is_none());
        let v = Tensor::from_vec(3, 3, m.iter().flatten().copied().collect());
        self.push(v, Op::Rot6d(a, gs.map(Box::new)), &[a])
    }

    /// Fused first layer of an edge MLP followed by ReLU and neighbor sum:
    /// row `i` is `sum_{e: dst[e] = i} relu((z[src] - z[dst]) + a_e w_edge + bias)`.
    /// Bit-identical to composing `edge_diff`, `matmul`, `add`, `add_row`,
    /// `relu` and `segment_sum`, without materializing the per-edge rows.
    pub fn edge_conv(&mut self, z: Var, weights: Var, w_edge: Var, bias: Var, edges: Rc<EdgeList>) -> Var {
        let zt = self.value(z);
        let (n, c) = zt.shape();
        assert_eq!(n, edges.nodes, "edge_conv node count");
        assert_eq!(self.shape(weights), (edges.len(), 1), "edge_conv weights");
        assert_eq!(self.shape(w_edge), (1, c), "edge_conv w_edge");
        assert_eq!(self.shape(bias), (1, c), "edge_conv bias");
        let (a, we, b) = (self.value(weights).data(), self.value(w_edge).data(), self.value(bias).data());
        let mut out = Tensor::zeros(n, c);
        let track = self.kinks.is_some();
        let mut signs: Vec<u64> = Vec::new();
        let mut word = 0u64;
        let mut bit = 0;
        for e in 0..edges.len() {
            let (j, i) = (edges.src[e], edges.dst[e]);
            let (zj, zi) = (zt.row(j), zt.row(i));
            let orow = &mut out.data_mut()[i * c..(i + 1) * c];
            let ae = a[e];
            for k in 0..c {
                let pre = ((zj[k] - zi[k]) + ae * we[k]) + b[k];
                let on = pre > 0.0;
                if on {
                    orow[k] += pre;
                }
                if track {
                    word |= (on as u64) << bit;
                    bit += 1;
                    if bit == 64 {
                        signs.push(word);
                        word = 0;
                        bit = 0;
                    }
                }
            }
        }
        if track {
            signs.push(word);
            self.note_kink(&signs);
        }
        let args = EdgeConvArgs { z, weights, w_edge, bias, edges };
        self.push(out, Op::EdgeConv(args), &[z, weights, w_edge, bias])
    }

    /// Chamfer distance between a predicted `m x 3` set and a fixed `n x 3`
    /// target: `(1/m) sum_j min_i |q_j - p_i|^2 + (1/n) sum_i min_j |p_i - q_j|^2`.
    pub fn chamfer(&mut self, pred: Var, target: Rc<Tensor>) -> Var {
        let q = self.value(pred);
        assert_eq!(q.cols(), 3);
        assert_eq!(target.cols(), 3);
        assert!(q.rows() > 0 && target.rows() > 0, "chamfer of an empty set");
        let (m, n) = (q.rows(), target.rows());
        let mut to_target = vec![0usize; m];
        let mut to_pred = vec![0usize; n];
        let mut best_pred = vec![f64::INFINITY; m];
        let mut best_target = vec![f64::INFINITY; n];
        for j in 0..m {
            let qj = q.row(j);
            for i in 0..n {
                let pi = target.row(i);
                let dx = qj[0] - pi[0];
                let dy = qj[1] - pi[1];
                let dz = qj[2] - pi[2];
                let d = dx * dx + dy * dy + dz * dz;
                if d < best_pred[j] {
                    best_pred[j] = d;
                    to_target[j] = i;
                }
                if d < best_target[i] {
                    best_target[i] = d;
                    to_pred[i] = j;
                }
            }
        }
        let value = best_pred.iter().sum::<f64>() / m as f64 + best_target.iter().sum::<f64>() / n as f64;
        self.note_kink((&to_target, &to_pred));
        self.push(
            Tensor::from_vec(1, 1, vec![value]),
            Op::Chamfer(pred, target, to_target, to_pred),
            &[pred],
        )
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut out = self.params.zeros_like();
        self.backward_into(loss, 1.0, &mut out);
        out
    }

    /// Accumulates `seed * d loss / d params` into `out`.
    pub fn backward_into(&self, loss: Var, seed: f64, out: &mut Grads) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, seed));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &node.op, g, &mut grads, out);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn edge_conv_backward(
        &self,
        args: &EdgeConvArgs,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        accumulate: &dyn Fn(&mut [Option<Tensor>], Var, Tensor),
    ) {
        let EdgeConvArgs { z, weights, w_edge, bias, edges } = args;
        let zt = self.value(*z);
        let (n, c) = zt.shape();
        let (a, we, b) = (self.value(*weights).data(), self.value(*w_edge).data(), self.value(*bias).data());
        let (want_z, want_a) = (self.wants(*z), self.wants(*weights));
        let mut gz = Tensor::zeros(if want_z { n } else { 0 }, c);
        let mut ga = vec![0.0; if want_a { edges.len() } else { 0 }];
        let mut gwe = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for e in 0..edges.len() {
            let (j, i) = (edges.src[e], edges.dst[e]);
            let (zj, zi) = (zt.row(j), zt.row(i));
            let grow = g.row(i);
            let ae = a[e];
            let mut gae = 0.0;
            for k in 0..c {
                let pre = ((zj[k] - zi[k]) + ae * we[k]) + b[k];
                if !(pre > 0.0) {
                    continue;
                }
                let gk = grow[k];
                gwe[k] += ae * gk;
                gb[k] += gk;
                gae += gk * we[k];
                if want_z {
                    gz.data_mut()[j * c + k] += gk;
                    gz.data_mut()[i * c + k] -= gk;
                }
            }
            if want_a {
                ga[e] = gae;
            }
        }
        if want_z {
            accumulate(grads, *z, gz);
        }
        if want_a {
            accumulate(grads, *weights, Tensor::from_vec(edges.len(), 1, ga));
        }
        if self.wants(*w_edge) {
            accumulate(grads, *w_edge, Tensor::row_vector(gwe));
        }
        if self.wants(*bias) {
            accumulate(grads, *bias, Tensor::row_vector(gb));
        }
    }

    fn propagate(&self, idx: usize, op: &Op, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Grads) {
        let accumulate = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match op {
            Op::Input => {}
            Op::Param(id) => out.tensors[*id].add_assign(&g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    matmul_a_bt_into(&g, bv, &mut ga);
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    matmul_at_b_into(av, &g, &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*b) {
                    accumulate(grads, *b, column_sum(&g));
                }
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(1, av.cols());
                    for r in 0..g.rows() {
                        for ((o, x), y) in gb.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += x * y;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
                if self.wants(*a) {
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        for (x, y) in ga.row_mut(r).iter_mut().zip(bv.data()) {
                            *x *= y;
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::Scale(a, s) => {
                let mut ga = g;
                ga.scale_in_place(*s);
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g;
                for (x, y) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if !(*y > 0.0) {
                        *x = 0.0;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let mut ga = g;
                let y = self.nodes[idx].value.as_ref().expect("exp value");
                for (x, e) in ga.data_mut().iter_mut().zip(y.data()) {
                    *x *= e;
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    if self.wants(p) {
                        let mut gp = Tensor::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        accumulate(grads, p, gp);
                    }
                    offset += c;
                }
            }
            Op::RepeatRows(a) => accumulate(grads, *a, column_sum(&g)),
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, g.reshaped(r, c));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::EdgeDiff(x, edges) => {
                let (n, c) = self.shape(*x);
                let mut gx = Tensor::zeros(n, c);
                for e in 0..edges.len() {
                    let ge = g.row(e);
                    for (o, v) in gx.row_mut(edges.src[e]).iter_mut().zip(ge) {
                        *o += v;
                    }
                    for (o, v) in gx.row_mut(edges.dst[e]).iter_mut().zip(ge) {
                        *o -= v;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SegmentSum(x, edges) => {
                let c = g.cols();
                let mut gx = Tensor::zeros(edges.len(), c);
                for e in 0..edges.len() {
                    gx.row_mut(e).copy_from_slice(g.row(edges.dst[e]));
                }
                accumulate(grads, *x, gx);
            }
            Op::SumSqRows(a) => {
                let av = self.value(*a);
                let mut ga = av.clone();
                for r in 0..ga.rows() {
                    let s = 2.0 * g.get(r, 0);
                    for x in ga.row_mut(r) {
                        *x *= s;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let (n, c) = self.shape(*a);
                let mut ga = Tensor::zeros(n, c);
                let inv = 1.0 / n as f64;
                for r in 0..n {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::MaxRows(a, arg) => {
                let (n, c) = self.shape(*a);
                let mut ga = Tensor::zeros(n, c);
                for (k, &r) in arg.iter().enumerate() {
                    ga.set(r, k, g.get(0, k));
                }
                accumulate(grads, *a, ga);
            }
            Op::EdgeConv(args) => self.edge_conv_backward(args, &g, grads, &accumulate),
            Op::Rot6d(a, gs) => {
                let Some(gs) = gs else {
                    return;
                };
                accumulate(grads, *a, rot6d_backward(gs, &g));
            }
            Op::Chamfer(pred, target, to_target, to_pred) => {
                let q = self.value(*pred);
                let (m, n) = (q.rows(), target.rows());
                let seed = g.get(0, 0);
                let mut gq = Tensor::zeros(m, 3);
                let wm = 2.0 * seed / m as f64;
                for (j, &i) in to_target.iter().enumerate() {
                    let (qj, pi) = (q.row(j), target.row(i));
                    let d = [qj[0] - pi[0], qj[1] - pi[1], qj[2] - pi[2]];
                    for (o, v) in gq.row_mut(j).iter_mut().zip(d) {
                        *o += wm * v;
                    }
                }
                let wn = 2.0 * seed / n as f64;
                for (i, &j) in to_pred.iter().enumerate() {
                    let (qj, pi) = (q.row(j), target.row(i));
                    let d = [qj[0] - pi[0], qj[1] - pi[1], qj[2] - pi[2]];
                    for (o, v) in gq.row_mut(j).iter_mut().zip(d) {
                        *o += wn * v;
                    }
                }
                accumulate(grads, *pred, gq);
            }
        }
    }
}

pub(crate) fn column_sum(g: &Tensor) -> Tensor {
    let mut s = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in s.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    s
}

/// `X^T 1 / n`: rows summed in order, then divided by the row count.
pub fn column_mean(x: &Tensor) -> Tensor {
    assert!(x.rows() > 0, "mean of an empty tensor");
    let mut s = column_sum(x);
    let n = x.rows() as f64;
    for v in s.data_mut() {
        *v /= n;
    }
    s
}

fn rot6d_backward(gs: &GramSchmidt, g: &Tensor) -> Tensor {
    // g is d loss / d R with R = [b1 b2 b3] as columns.
    let col = |c: usize| [g.get(0, c), g.get(1, c), g.get(2, c)];
    let (gb3, mut gb1, mut gb2) = (col(2), col(0), col(1));
    // b3 = b1 x b2
    let t1 = cross(&gs.b2, &gb3);
    let t2 = cross(&gb3, &gs.b1);
    for k in 0..3 {
        gb1[k] += t1[k];
        gb2[k] += t2[k];
    }
    // b2 = u2 / |u2|
    let s2 = dot(&gs.b2, &gb2);
    let gu2: [f64; 3] = std::array::from_fn(|k| (gb2[k] - gs.b2[k] * s2) / gs.norm2);
    // u2 = a2 - (b1 . a2) b1
    let proj = dot(&gs.b1, &gs.a2);
    let b1_gu2 = dot(&gs.b1, &gu2);
    let ga2: [f64; 3] = std::array::from_fn(|k| gu2[k] - gs.b1[k] * b1_gu2);
    for k in 0..3 {
        gb1[k] -= proj * gu2[k] + gs.a2[k] * b1_gu2;
    }
    // b1 = a1 / |a1|
    let s1 = dot(&gs.b1, &gb1);
    let ga1: [f64; 3] = std::array::from_fn(|k| (gb1[k] - gs.b1[k] * s1) / gs.norm1);
    Tensor::from_vec(1, 6, vec![ga1[0], ga1[1], ga1[2], ga2[0], ga2[1], ga2[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::{Init, ParamSpec};
    use std::collections::BTreeMap;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let map: BTreeMap<String, Tensor> = entries.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        ParamStore::from_map(map)
    }

    fn fd_check(ps: &ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let tape_loss = |p: &ParamStore| {
            let mut t = Tape::new(p);
            let l = f(&mut t);
            t.value(l).get(0, 0)
        };
        let mut t = Tape::new(ps);
        let l = f(&mut t);
        let grads = t.backward(l);
        let h = 1e-6;
        let mut work = ps.clone();
        for id in 0..ps.len() {
            for k in 0..ps.tensor(id).len() {
                let orig = ps.tensor(id).data()[k];
                work.tensor_mut(id).data_mut()[k] = orig + h;
                let up = tape_loss(&work);
                work.tensor_mut(id).data_mut()[k] = orig - h;
                let down = tape_loss(&work);
                work.tensor_mut(id).data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let ad = grads.get(id).data()[k];
                let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
                assert!(rel < 1e-6, "{} [{k}]: ad {ad} fd {fd}", ps.name(id));
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation_from_6d(&[0.3, -1.2, 0.5, 2.0, 0.1, -0.7]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((d - e).abs() < 1e-12);
            }
        }
        assert!(rotation_from_6d(&[0.0; 6]).is_none());
        assert!(rotation_from_6d(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_none());
        assert_eq!(rotation_or_identity(&[0.0; 6])[1], [0.0, 1.0, 0.0]);
    }

    #[test]
    fn rot6d_gradient() {
        let ps = store(&[("r", Tensor::row_vector(vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.7]))]);
        let target = Tensor::from_vec(3, 3, vec![0.2, -0.4, 0.9, 1.1, 0.3, -0.5, 0.7, 0.8, -0.1]);
        fd_check(&ps, |t| {
            let r = t.param(0);
            let rot = t.rot6d(r);
            let c = t.input(target.clone());
            let m = t.matmul(c, rot);
            let s = t.sum_sq_rows(m);
            let tt = t.transpose(s);
            let one = t.input(Tensor::filled(3, 1, 1.0));
            t.matmul(tt, one)
        });
    }

    #[test]
    fn edge_conv_matches_unfused_ops() {
        let edges = Rc::new(EdgeList { nodes: 3, src: vec![1, 2, 0, 2, 0], dst: vec![0, 0, 1, 1, 2] });
        let ps = store(&[
            ("b", Tensor::row_vector(vec![0.05, -0.1, 0.2])),
            ("w", Tensor::row_vector(vec![0.4, -0.6, 0.3])),
            ("z", Tensor::from_vec(3, 3, vec![0.1, 0.5, -0.3, 0.8, 0.9, -0.2, -0.4, 0.25, 0.6])),
        ]);
        let a = Tensor::from_vec(5, 1, vec![0.9, 0.3, 0.7, 0.2, 0.5]);
        let fused = |t: &mut Tape| {
            let (b, w, z) = (t.param(0), t.param(1), t.param(2));
            let av = t.input(a.clone());
            t.edge_conv(z, av, w, b, edges.clone())
        };
        let unfused = |t: &mut Tape| {
            let (b, w, z) = (t.param(0), t.param(1), t.param(2));
            let av = t.input(a.clone());
            let dz = t.edge_diff(z, edges.clone());
            let aw = t.matmul(av, w);
            let pre = t.add(dz, aw);
            let pre = t.add_row(pre, b);
            let r = t.relu(pre);
            t.segment_sum(r, edges.clone())
        };
        let mut t1 = Tape::new(&ps);
        let y1 = fused(&mut t1);
        let mut t2 = Tape::new(&ps);
        let y2 = unfused(&mut t2);
        assert_eq!(t1.value(y1), t2.value(y2));

        let to_scalar = |t: &mut Tape, y: Var| {
            let s = t.sum_sq_rows(y);
            let st = t.transpose(s);
            let one = t.input(Tensor::filled(3, 1, 1.0));
            t.matmul(st, one)
        };
        fd_check(&ps, |t| {
            let y = fused(t);
            to_scalar(t, y)
        });
        // Weights on the tape too: gradient reaches the points through `a`.
        let ps2 = store(&[
            ("b", Tensor::row_vector(vec![0.05, -0.1, 0.2])),
            ("p", Tensor::from_vec(3, 3, vec![0.1, 0.2, 0.3, 0.5, 0.1, 0.0, 0.3, 0.6, 0.2])),
            ("w", Tensor::row_vector(vec![0.4, -0.6, 0.3])),
        ]);
        fd_check(&ps2, |t| {
            let (b, p, w) = (t.param(0), t.param(1), t.param(2));
            let d = t.edge_diff(p, edges.clone());
            let sq = t.sum_sq_rows(d);
            let neg = t.scale(sq, -1.0);
            let av = t.exp(neg);
            let y = t.edge_conv(p, av, w, b, edges.clone());
            to_scalar(t, y)
        });
    }

    #[test]
    fn graph_ops_gradient() {
        let edges = Rc::new(EdgeList { nodes: 3, src: vec![1, 2, 0, 1], dst: vec![0, 0, 1, 2] });
        let ps = store(&[
            ("x", Tensor::from_vec(3, 2, vec![0.1, 0.5, -0.3, 0.8, 0.9, -0.2])),
            ("w", Tensor::from_vec(2, 2, vec![0.4, -0.6, 0.2, 0.7])),
            ("b", Tensor::row_vector(vec![0.05, -0.1])),
        ]);
        fd_check(&ps, |t| {
            let (b, w, x) = (t.param(0), t.param(1), t.param(2));
            let d = t.edge_diff(x, edges.clone());
            let a = t.sum_sq_rows(d);
            let na = t.scale(a, -1.0);
            let wa = t.exp(na);
            let h = t.affine(d, w, b);
            let r = t.relu(h);
            let cat = t.concat_cols(&[r, wa]);
            let s = t.segment_sum(cat, edges.clone());
            let m = t.max_rows(s);
            let mean = t.mean_rows(s);
            let both = t.add(m, mean);
            let rep = t.repeat_rows(both, 2);
            let re = t.reshape(rep, 3, 2);
            let sq = t.mul_row(re, b);
            let tt = t.transpose(sq);
            let z = t.sum_sq_rows(tt);
            t.max_rows(z)
        });
    }

    #[test]
    fn chamfer_gradient_and_value() {
        let ps = store(&[("q", Tensor::from_vec(2, 3, vec![0.15, 0.2, 0.3, 0.9, 0.1, -0.4]))]);
        let target = Rc::new(Tensor::from_vec(3, 3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.2, 0.5, 0.1]));
        fd_check(&ps, |t| {
            let q = t.param(0);
            t.chamfer(q, target.clone())
        });
        let one = store(&[("q", Tensor::from_vec(1, 3, vec![1.0, 0.0, 0.0]))]);
        let mut t = Tape::new(&one);
        let q = t.param(0);
        let l = t.chamfer(q, Rc::new(Tensor::from_vec(1, 3, vec![0.0; 3])));
        assert_eq!(t.value(l).get(0, 0), 2.0);
    }

    #[test]
    fn unused_params_get_zero_gradient() {
        let specs = vec![
            ParamSpec { name: "a".into(), rows: 1, cols: 1, init: Init::Xavier { fan_in: 1, fan_out: 1 } },
            ParamSpec { name: "b".into(), rows: 1, cols: 1, init: Init::Xavier { fan_in: 1, fan_out: 1 } },
        ];
        let ps = ParamStore::initialize(&specs, 0).unwrap();
        let mut t = Tape::new(&ps);
        let a = t.param(0);
        let l = t.matmul(a, a);
        let g = t.backward(l);
        assert_eq!(g.get(0).get(0, 0), 2.0 * ps.tensor(0).get(0, 0));
        assert_eq!(g.get(1).get(0, 0), 0.0);
    }
}
