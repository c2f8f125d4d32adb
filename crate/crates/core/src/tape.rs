//! A small reverse-mode differentiation tape over dense row-major tensors.
//!
//! Every model in this crate builds its forward pass on a [`Graph`]; calling
//! [`Graph::backward`] yields exact analytic gradients for every parameter
//! leaf, which are then collected into a [`Grads`] buffer. Vectors are
//! stored as `n × 1` tensors.

use crate::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Graph nodes of a whole parameter store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<NodeId>);

impl std::ops::Index<ParamId> for Bound {
    type Output = NodeId;
    fn index(&self, id: ParamId) -> &NodeId {
        &self.0[id.0]
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    /// (m×n)·(n) -> (m)
    MatVec(usize, usize),
    /// (m×k)·(k×n) -> (m×n)
    MatMul(usize, usize),
    /// (m×k)·(n×k)ᵀ -> (m×n)
    MatMulNt(usize, usize),
    /// (m)ᵀ·(m×n) -> (n)
    VecMat(usize, usize),
    Add(usize, usize),
    /// matrix (m×n) plus a length-n vector on every row
    AddRowVec(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    OneMinus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Row(usize, usize),
    Stack(Vec<usize>),
    Gather(usize, Vec<usize>),
    /// softmax over contiguous groups of the given length
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Dot(usize, usize),
    Sum(usize),
    Reshape(usize),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(usize, ParamId)>,
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Concat(xs) | Op::Stack(xs) => xs.iter().any(|&i| self.nodes[i].needs_grad),
            Op::MatVec(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::VecMat(a, b)
            | Op::Add(a, b)
            | Op::AddRowVec(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Dot(a, b) => self.nodes[*a].needs_grad || self.nodes[*b].needs_grad,
            Op::Scale(a, _)
            | Op::OneMinus(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Slice(a, _)
            | Op::Row(a, _)
            | Op::Gather(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Sum(a)
            | Op::Reshape(a) => self.nodes[*a].needs_grad,
        };
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; gradients are not propagated into it.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<T>) -> NodeId {
        assert_eq!(rows * cols, value.len(), "constant shape mismatch");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn vector(&mut self, value: Vec<T>) -> NodeId {
        let n = value.len();
        self.constant(n, 1, value)
    }

    pub fn zeros(&mut self, n: usize) -> NodeId {
        self.vector(vec![T::zero(); n])
    }

    /// A differentiable leaf that is not a parameter (used to check gradients
    /// with respect to inputs).
    pub fn variable(&mut self, rows: usize, cols: usize, value: Vec<T>) -> NodeId {
        let id = self.constant(rows, cols, value);
        self.nodes[id.0].needs_grad = true;
        id
    }

    /// Registers a parameter tensor as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let t = store.get(id);
        let node = self.constant(t.rows, t.cols, t.data.clone());
        self.nodes[node.0].needs_grad = true;
        self.params.push((node.0, id));
        node
    }

    /// Registers every tensor of `store` as a parameter leaf.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Bound {
        Bound(store.ids().map(|id| self.param(store, id)).collect())
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value[0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn size(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.len()
    }

    /// Gradient of the last `backward` root with respect to `id`, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).filter(|g| !g.is_empty()).map(|g| g.as_slice())
    }

    // ---- forward ops ------------------------------------------------------

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (m, n) = self.shape(w);
        assert_eq!(self.size(x), n, "matvec: {}x{} · {}", m, n, self.size(x));
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let out = (0..m)
            .map(|i| {
                let row = &wv[i * n..(i + 1) * n];
                let mut acc = T::zero();
                for (a, b) in row.iter().zip(xv) {
                    acc += *a * *b;
                }
                acc
            })
            .collect();
        self.push(m, 1, out, Op::MatVec(w.0, x.0))
    }

    /// `w·x + b`
    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> NodeId {
        let y = self.matvec(w, x);
        self.add(y, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bb) in orow.iter_mut().zip(brow) {
                    *o += aip * *bb;
                }
            }
        }
        self.push(m, n, out, Op::MatMul(a.0, b.0))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dims");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (x, y) in arow.iter().zip(brow) {
                    acc += *x * *y;
                }
                out[i * n + j] = acc;
            }
        }
        self.push(m, n, out, Op::MatMulNt(a.0, b.0))
    }

    pub fn vecmat(&mut self, x: NodeId, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.size(x), m, "vecmat dims");
        let av = &self.nodes[a.0].value;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            let xi = xv[i];
            for (o, v) in out.iter_mut().zip(&av[i * n..(i + 1) * n]) {
                *o += xi * *v;
            }
        }
        self.push(n, 1, out, Op::VecMat(x.0, a.0))
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.size(a), self.size(b), "elementwise size mismatch");
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(r, c, out, op)
    }

    fn map(&mut self, a: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        self.push(r, c, out, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn add_row_vec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (r, c) = self.shape(m);
        assert_eq!(self.size(v), c, "add_row_vec width");
        let vv = &self.nodes[v.0].value;
        let out = self.nodes[m.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| *x + vv[i % c])
            .collect();
        self.push(r, c, out, Op::AddRowVec(m.0, v.0))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        self.map(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| T::one() - x, Op::OneMinus(a.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| x.tanh(), Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a.0))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.map(a, softplus, Op::Softplus(a.0))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut out = Vec::with_capacity(parts.iter().map(|p| self.size(*p)).sum());
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let n = out.len();
        self.push(n, 1, out, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.nodes[a.0].value[start..start + len].to_vec();
        self.push(len, 1, out, Op::Slice(a.0, start))
    }

    pub fn row(&mut self, m: NodeId, i: usize) -> NodeId {
        let (r, c) = self.shape(m);
        assert!(i < r, "row {} out of {}", i, r);
        let out = self.nodes[m.0].value[i * c..(i + 1) * c].to_vec();
        self.push(c, 1, out, Op::Row(m.0, i))
    }

    /// Stacks equally sized vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[NodeId]) -> NodeId {
        assert!(!rows.is_empty(), "stack of nothing");
        let c = self.size(rows[0]);
        let mut out = Vec::with_capacity(rows.len() * c);
        for r in rows {
            assert_eq!(self.size(*r), c, "stack width mismatch");
            out.extend_from_slice(&self.nodes[r.0].value);
        }
        self.push(rows.len(), c, out, Op::Stack(rows.iter().map(|r| r.0).collect()))
    }

    /// Picks elements by flat index into a vector.
    pub fn gather(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let v = &self.nodes[a.0].value;
        let out: Vec<T> = idx.iter().map(|&i| v[i]).collect();
        self.push(idx.len(), 1, out, Op::Gather(a.0, idx.to_vec()))
    }

    pub fn pick(&mut self, a: NodeId, i: usize) -> NodeId {
        self.gather(a, &[i])
    }

    fn group_len(&self, a: NodeId, rows: bool) -> usize {
        let (r, c) = self.shape(a);
        if rows {
            c
        } else {
            r * c
        }
    }

    fn softmax_impl(&mut self, a: NodeId, group: usize, log: bool) -> NodeId {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut out = vec![T::zero(); src.len()];
        for (o, s) in out.chunks_mut(group).zip(src.chunks(group)) {
            let mx = s.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut z = T::zero();
            for (oo, &x) in o.iter_mut().zip(s) {
                *oo = (x - mx).exp();
                z += *oo;
            }
            if log {
                let lz = z.ln();
                for (oo, &x) in o.iter_mut().zip(s) {
                    *oo = x - mx - lz;
                }
            } else {
                for oo in o.iter_mut() {
                    *oo /= z;
                }
            }
        }
        let op = if log { Op::LogSoftmax(a.0, group) } else { Op::Softmax(a.0, group) };
        self.push(r, c, out, op)
    }

    /// Softmax over all elements.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let g = self.group_len(a, false);
        self.softmax_impl(a, g, false)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let g = self.group_len(a, false);
        self.softmax_impl(a, g, true)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let g = self.group_len(a, true);
        self.softmax_impl(a, g, false)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.size(a), self.size(b), "dot size");
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .fold(T::zero(), |acc, (x, y)| acc + *x * *y);
        self.push(1, 1, vec![v], Op::Dot(a.0, b.0))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.iter().copied().sum();
        self.push(1, 1, vec![v], Op::Sum(a.0))
    }

    /// Sum of a list of scalars (or equally shaped tensors).
    pub fn add_all(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "add_all of nothing");
        let mut acc = xs[0];
        for x in &xs[1..] {
            acc = self.add(acc, *x);
        }
        acc
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.size(a), rows * cols, "reshape size");
        let v = self.nodes[a.0].value.clone();
        self.push(rows, cols, v, Op::Reshape(a.0))
    }

    // ---- backward ---------------------------------------------------------

    /// Backpropagates from a scalar root (seeded with 1).
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.size(root), 1, "backward from non-scalar");
        self.backward_seeded(root, vec![T::one()]);
    }

    /// Backpropagates from `root` with an explicit upstream gradient.
    pub fn backward_seeded(&mut self, root: NodeId, seed: Vec<T>) {
        assert_eq!(seed.len(), self.size(root));
        self.grads = vec![Vec::new(); self.nodes.len()];
        self.grads[root.0] = seed;
        for i in (0..=root.0).rev() {
            if self.grads[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.propagate(i, &g);
            self.grads[i] = g;
        }
    }

    fn acc(&mut self, target: usize, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.nodes[target].needs_grad {
            return;
        }
        if self.grads[target].is_empty() {
            self.grads[target] = vec![T::zero(); self.nodes[target].value.len()];
        }
        let mut buf = std::mem::take(&mut self.grads[target]);
        f(&mut buf, &self.nodes);
        self.grads[target] = buf;
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatVec(w, x) => {
                let (m, n) = (self.nodes[w].rows, self.nodes[w].cols);
                self.acc(w, |dw, nodes| {
                    let xv = &nodes[x].value;
                    for r in 0..m {
                        let gr = g[r];
                        if gr == T::zero() {
                            continue;
                        }
                        for (d, xx) in dw[r * n..(r + 1) * n].iter_mut().zip(xv) {
                            *d += gr * *xx;
                        }
                    }
                });
                self.acc(x, |dx, nodes| {
                    let wv = &nodes[w].value;
                    for r in 0..m {
                        let gr = g[r];
                        if gr == T::zero() {
                            continue;
                        }
                        for (d, ww) in dx.iter_mut().zip(&wv[r * n..(r + 1) * n]) {
                            *d += gr * *ww;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                let n = self.nodes[b].cols;
                // dA = G Bᵀ
                self.acc(a, |da, nodes| {
                    let bv = &nodes[b].value;
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s += g[r * n + j] * bv[p * n + j];
                            }
                            da[r * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ G
                self.acc(b, |db, nodes| {
                    let av = &nodes[a].value;
                    for r in 0..m {
                        for p in 0..k {
                            let arp = av[r * k + p];
                            if arp == T::zero() {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += arp * g[r * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                let n = self.nodes[b].rows;
                // dA = G B
                self.acc(a, |da, nodes| {
                    let bv = &nodes[b].value;
                    for r in 0..m {
                        for j in 0..n {
                            let grj = g[r * n + j];
                            if grj == T::zero() {
                                continue;
                            }
                            for p in 0..k {
                                da[r * k + p] += grj * bv[j * k + p];
                            }
                        }
                    }
                });
                // dB = Gᵀ A
                self.acc(b, |db, nodes| {
                    let av = &nodes[a].value;
                    for r in 0..m {
                        for j in 0..n {
                            let grj = g[r * n + j];
                            if grj == T::zero() {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += grj * av[r * k + p];
                            }
                        }
                    }
                });
            }
            Op::VecMat(x, a) => {
                let (m, n) = (self.nodes[a].rows, self.nodes[a].cols);
                self.acc(x, |dx, nodes| {
                    let av = &nodes[a].value;
                    for r in 0..m {
                        let mut s = T::zero();
                        for j in 0..n {
                            s += av[r * n + j] * g[j];
                        }
                        dx[r] += s;
                    }
                });
                self.acc(a, |da, nodes| {
                    let xv = &nodes[x].value;
                    for r in 0..m {
                        for j in 0..n {
                            da[r * n + j] += xv[r] * g[j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(a, |d, _| add_into(d, g));
                self.acc(b, |d, _| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(a, |d, _| add_into(d, g));
                self.acc(b, |d, _| {
                    for (dd, gg) in d.iter_mut().zip(g) {
                        *dd -= *gg;
                    }
                });
            }
            Op::Mul(a, b) => {
                self.acc(a, |d, nodes| {
                    for ((dd, gg), bb) in d.iter_mut().zip(g).zip(&nodes[b].value) {
                        *dd += *gg * *bb;
                    }
                });
                self.acc(b, |d, nodes| {
                    for ((dd, gg), aa) in d.iter_mut().zip(g).zip(&nodes[a].value) {
                        *dd += *gg * *aa;
                    }
                });
            }
            Op::AddRowVec(m, v) => {
                let c = self.nodes[m].cols;
                self.acc(m, |d, _| add_into(d, g));
                self.acc(v, |d, _| {
                    for (k, gg) in g.iter().enumerate() {
                        d[k % c] += *gg;
                    }
                });
            }
            Op::Scale(a, s) => self.acc(a, |d, _| {
                for (dd, gg) in d.iter_mut().zip(g) {
                    *dd += *gg * s;
                }
            }),
            Op::OneMinus(a) => self.acc(a, |d, _| {
                for (dd, gg) in d.iter_mut().zip(g) {
                    *dd -= *gg;
                }
            }),
            Op::Sigmoid(a) => self.acc(a, |d, nodes| {
                for ((dd, gg), y) in d.iter_mut().zip(g).zip(&nodes[i].value) {
                    *dd += *gg * *y * (T::one() - *y);
                }
            }),
            Op::Tanh(a) => self.acc(a, |d, nodes| {
                for ((dd, gg), y) in d.iter_mut().zip(g).zip(&nodes[i].value) {
                    *dd += *gg * (T::one() - *y * *y);
                }
            }),
            Op::Relu(a) => self.acc(a, |d, nodes| {
                for ((dd, gg), x) in d.iter_mut().zip(g).zip(&nodes[a].value) {
                    if *x > T::zero() {
                        *dd += *gg;
                    }
                }
            }),
            Op::Softplus(a) => self.acc(a, |d, nodes| {
                for ((dd, gg), x) in d.iter_mut().zip(g).zip(&nodes[a].value) {
                    *dd += *gg * sigmoid(*x);
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p].value.len();
                    self.acc(p, |d, _| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Stack(parts) => {
                let c = self.nodes[i].cols;
                for (r, p) in parts.into_iter().enumerate() {
                    self.acc(p, |d, _| add_into(d, &g[r * c..(r + 1) * c]));
                }
            }
            Op::Slice(a, start) => {
                self.acc(a, |d, _| add_into(&mut d[start..start + g.len()], g));
            }
            Op::Row(m, r) => {
                let c = self.nodes[m].cols;
                self.acc(m, |d, _| add_into(&mut d[r * c..(r + 1) * c], g));
            }
            Op::Gather(a, idx) => self.acc(a, |d, _| {
                for (k, &j) in idx.iter().enumerate() {
                    d[j] += g[k];
                }
            }),
            Op::Softmax(a, group) => self.acc(a, |d, nodes| {
                let y = &nodes[i].value;
                for ((dc, gc), yc) in d.chunks_mut(group).zip(g.chunks(group)).zip(y.chunks(group)) {
                    let inner: T = gc.iter().zip(yc).fold(T::zero(), |s, (a, b)| s + *a * *b);
                    for ((dd, gg), yy) in dc.iter_mut().zip(gc).zip(yc) {
                        *dd += *yy * (*gg - inner);
                    }
                }
            }),
            Op::LogSoftmax(a, group) => self.acc(a, |d, nodes| {
                let y = &nodes[i].value;
                for ((dc, gc), yc) in d.chunks_mut(group).zip(g.chunks(group)).zip(y.chunks(group)) {
                    let gsum: T = gc.iter().copied().sum();
                    for ((dd, gg), yy) in dc.iter_mut().zip(gc).zip(yc) {
                        *dd += *gg - yy.exp() * gsum;
                    }
                }
            }),
            Op::Dot(a, b) => {
                let s = g[0];
                self.acc(a, |d, nodes| {
                    for (dd, bb) in d.iter_mut().zip(&nodes[b].value) {
                        *dd += s * *bb;
                    }
                });
                self.acc(b, |d, nodes| {
                    for (dd, aa) in d.iter_mut().zip(&nodes[a].value) {
                        *dd += s * *aa;
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.acc(a, |d, _| {
                    for dd in d.iter_mut() {
                        *dd += s;
                    }
                });
            }
            Op::Reshape(a) => self.acc(a, |d, _| add_into(d, g)),
        }
    }

    /// Adds the parameter gradients of the last backward pass into `out`.
    pub fn accumulate_param_grads(&self, out: &mut Grads<T>) {
        for (node, pid) in &self.params {
            if let Some(g) = self.grads.get(*node).filter(|g| !g.is_empty()) {
                add_into(out.get_mut(*pid), g);
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check<F>(x: Vec<f64>, rows: usize, cols: usize, build: F)
    where
        F: Fn(&mut Graph<f64>, NodeId) -> NodeId,
    {
        let mut g = Graph::new();
        let v = g.variable(rows, cols, x.clone());
        let out = build(&mut g, v);
        g.backward(out);
        let analytic = g.grad(v).unwrap().to_vec();
        let numeric = fd(
            |p| {
                let mut g = Graph::new();
                let v = g.variable(rows, cols, p.to_vec());
                let out = build(&mut g, v);
                g.scalar(out)
            },
            &x,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{} vs {}", a, n);
        }
    }

    #[test]
    fn elementwise_and_softmax_grads() {
        let x = vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.1];
        check(x.clone(), 6, 1, |g, v| {
            let s = g.sigmoid(v);
            let t = g.tanh(v);
            let m = g.mul(s, t);
            let ls = g.log_softmax(m);
            let p = g.pick(ls, 2);
            let sp = g.softplus(v);
            let q = g.dot(sp, s);
            g.add(p, q)
        });
        check(x.clone(), 2, 3, |g, v| {
            let sm = g.softmax_rows(v);
            let w = g.constant(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]);
            let m = g.mul(sm, w);
            g.sum(m)
        });
    }

    #[test]
    fn matrix_op_grads() {
        let x = vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.1];
        check(x.clone(), 2, 3, |g, v| {
            let b = g.constant(3, 2, vec![0.5, -0.1, 0.2, 0.9, -0.7, 0.3]);
            let c = g.matmul(v, b);
            let d = g.matmul(c, v);
            let e = g.tanh(d);
            let f = g.matmul_nt(e, v);
            let h = g.sigmoid(f);
            g.sum(h)
        });
        check(x.clone(), 2, 3, |g, v| {
            let u = g.constant(2, 1, vec![0.4, -0.6]);
            let y = g.vecmat(u, v);
            let z = g.matvec(v, y);
            let r = g.row(v, 1);
            let s = g.stack(&[r, y]);
            let b = g.constant(3, 1, vec![1.0, 2.0, -1.0]);
            let t = g.add_row_vec(s, b);
            let tt = g.sigmoid(t);
            let a = g.sum(tt);
            let zz = g.dot(z, z);
            g.add(a, zz)
        });
        check(x, 6, 1, |g, v| {
            let a = g.slice(v, 1, 3);
            let b = g.gather(v, &[5, 0, 0]);
            let c = g.concat(&[a, b]);
            let d = g.one_minus(c);
            let e = g.scale(d, 3.0);
            let f = g.relu(e);
            let h = g.reshape(f, 2, 3);
            let k = g.softmax(h);
            let w = g.constant(2, 3, vec![1.0, 0.0, 2.0, 0.5, -1.0, 0.3]);
            let kk = g.mul(k, w);
            g.sum(kk)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let c = g.vector(vec![1.0, 2.0]);
        let v = g.variable(2, 1, vec![3.0, 4.0]);
        let d = g.dot(c, v);
        g.backward(d);
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(v).unwrap(), &[1.0, 2.0]);
    }
}
