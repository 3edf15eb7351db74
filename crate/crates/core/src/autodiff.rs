//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every differentiable operation appends one node to the [`Tape`]; a
//! [`Var`] is a cheap handle to a node. [`Tape::backward`] walks the nodes in
//! exact reverse execution order and accumulates gradients into every leaf
//! that was registered with `requires_grad = true`. Leaves registered
//! without it never receive a gradient, and no gradient work is done for
//! sub-graphs that only depend on such leaves.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        // (a offset, b offset) per output batch entry, in units of matrices
        pairs: Vec<(usize, usize)>,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    MulConst {
        x: usize,
        factors: Vec<T>,
    },
    Gelu {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    generation: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients of one backward pass, keyed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    generation: u64,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient accumulated into `var`; `None` for leaves without `requires_grad`
    /// or leaves that were not on the path to the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        assert_eq!(
            var.tape.generation, self.generation,
            "gradients queried with a variable from another tape generation"
        );
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            generation: 0,
        }
    }

    /// Drops every recorded node. Outstanding [`Var`]s borrow the tape, so
    /// none can survive a reset.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.generation += 1;
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Populates gradients for every `requires_grad` leaf reachable from `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let numel = nodes[loss.id].value.numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, &mut grads, id, &g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(
                    Tensor::new(node.value.shape().to_vec(), g)
                        .expect("gradient matches its leaf's shape"),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            generation: self.generation,
        })
    }
}

/// Returns the gradient buffer for `id`, allocating it on first use, or
/// `None` when the node does not participate in differentiation.
fn slot<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn propagate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: &[T]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            m,
            k,
            n,
            pairs,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if let Some(da) = slot(nodes, grads, *a) {
                for (i, &(ao, bo)) in pairs.iter().enumerate() {
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        &bv[bo * k * n..(bo + 1) * k * n],
                        &mut da[ao * m * k..(ao + 1) * m * k],
                    );
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for (i, &(ao, bo)) in pairs.iter().enumerate() {
                    gemm_tn(
                        m,
                        k,
                        n,
                        &av[ao * m * k..(ao + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut db[bo * k * n..(bo + 1) * k * n],
                    );
                }
            }
        }
        Op::Add { a, b } => {
            for input in [*a, *b] {
                if let Some(d) = slot(nodes, grads, input) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::AddBias { x, bias } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                let width = db.len();
                for row in g.chunks(width) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut()
                    .zip(g)
                    .for_each(|(d, &g)| *d = *d + g * *factor);
            }
        }
        Op::MulConst { x, factors } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &g), &f) in dx.iter_mut().zip(g).zip(factors) {
                    *d = *d + g * f;
                }
            }
        }
        Op::Gelu { x } => {
            let xv = nodes[*x].value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &g), &x) in dx.iter_mut().zip(g).zip(xv) {
                    *d = *d + g * gelu_grad(x);
                }
            }
        }
        Op::Tanh { x } => {
            let y = node.value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &g), &y) in dx.iter_mut().zip(g).zip(y) {
                    *d = *d + g * (T::one() - y * y);
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = node.value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..*len {
                            let p = base + j * inner;
                            dot = dot + g[p] * y[p];
                        }
                        for j in 0..*len {
                            let p = base + j * inner;
                            dx[p] = dx[p] + y[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = nodes[*gamma].value.data();
            let h = gv.len();
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for (grow, xrow) in g.chunks(h).zip(xhat.chunks(h)) {
                    for ((d, &g), &xh) in dg.iter_mut().zip(grow).zip(xrow) {
                        *d = *d + g * xh;
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for grow in g.chunks(h) {
                    db.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let hn = T::from_usize(h).expect("width fits in scalar");
                let mut dxhat = vec![T::zero(); h];
                for (r, ((drow, grow), xrow)) in dx
                    .chunks_mut(h)
                    .zip(g.chunks(h))
                    .zip(xhat.chunks(h))
                    .enumerate()
                {
                    let mut sum = T::zero();
                    let mut sum_x = T::zero();
                    for c in 0..h {
                        dxhat[c] = grow[c] * gv[c];
                        sum = sum + dxhat[c];
                        sum_x = sum_x + dxhat[c] * xrow[c];
                    }
                    let scale = inv_std[r] / hn;
                    for c in 0..h {
                        drow[c] = drow[c] + scale * (hn * dxhat[c] - sum - xrow[c] * sum_x);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            if let Some(dl) = slot(nodes, grads, *logits) {
                let c = nodes[*logits].value.last_dim();
                let scale = g[0] / T::from_usize(*count).expect("count fits in scalar");
                for (row, (&t, &keep)) in targets.iter().zip(mask).enumerate() {
                    if !keep {
                        continue;
                    }
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        let p = row * c + j;
                        dl[p] = dl[p] + scale * (probs[p] - onehot);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(dt) = slot(nodes, grads, *table) {
                let h = nodes[*table].value.last_dim();
                for (pos, &id) in ids.iter().enumerate() {
                    let src = &g[pos * h..(pos + 1) * h];
                    let dst = &mut dt[id * h..(id + 1) * h];
                    dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        } => attention_backward(nodes, grads, [*q, *k, *v], *batch, *seq, *heads, probs, g),
        Op::GatherRows { x, rows } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let width = node.value.last_dim();
                for (i, &r) in rows.iter().enumerate() {
                    let src = &g[i * width..(i + 1) * width];
                    let dst = &mut dx[r * width..(r + 1) * width];
                    dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    [q, k, v]: [usize; 3],
    batch: usize,
    seq: usize,
    heads: usize,
    probs: &[T],
    g: &[T],
) {
    let hidden = nodes[q].value.last_dim();
    let d = hidden / heads;
    let scale = T::one() / T::from_usize(d).expect("head dim fits").sqrt();
    let qv = nodes[q].value.data();
    let kv = nodes[k].value.data();
    let vv = nodes[v].value.data();
    let want = [
        nodes[q].requires_grad,
        nodes[k].requires_grad,
        nodes[v].requires_grad,
    ];
    if !want.iter().any(|&w| w) {
        return;
    }
    let mut dq = vec![T::zero(); qv.len()];
    let mut dk = vec![T::zero(); kv.len()];
    let mut dv = vec![T::zero(); vv.len()];
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let pbase = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let gi = (b * seq + i) * hidden + h * d;
                let prow = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                let mut dot = T::zero();
                for j in 0..seq {
                    let vj = (b * seq + j) * hidden + h * d;
                    let mut s = T::zero();
                    for c in 0..d {
                        s = s + g[gi + c] * vv[vj + c];
                        dv[vj + c] = dv[vj + c] + prow[j] * g[gi + c];
                    }
                    dp[j] = s;
                    dot = dot + prow[j] * s;
                }
                for j in 0..seq {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = (b * seq + j) * hidden + h * d;
                    for c in 0..d {
                        dq[gi + c] = dq[gi + c] + ds * kv[kj + c];
                        dk[kj + c] = dk[kj + c] + ds * qv[gi + c];
                    }
                }
            }
        }
    }
    for (id, local) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(dst) = slot(nodes, grads, id) {
            dst.iter_mut().zip(&local).for_each(|(d, &l)| *d = *d + l);
        }
    }
}

/// `c += a · b` with `a: [m,k]`, `b: [k,n]`.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut()
                .zip(brow)
                .for_each(|(c, &b)| *c = *c + aip * b);
        }
    }
}

/// `c += a · bᵀ` with `a: [m,n]`, `b: [k,n]`, `c: [m,k]`.
fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let s: T = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            c[i * k + p] = c[i * k + p] + s;
        }
    }
}

/// `c += aᵀ · b` with `a: [m,k]`, `b: [m,n]`, `c: [k,n]`.
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            crow.iter_mut()
                .zip(brow)
                .for_each(|(c, &b)| *c = *c + aip * b);
        }
    }
}

fn inv_sqrt_2pi<T: Scalar>() -> T {
    T::from_f64_lossy(0.398_942_280_401_432_7)
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    x * half * (T::one() + (x / T::from_f64_lossy(std::f64::consts::SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x / T::from_f64_lossy(std::f64::consts::SQRT_2)).erf());
    let pdf = inv_sqrt_2pi::<T>() * (-(x * x) * half).exp();
    cdf + x * pdf
}

/// Broadcasts two batch shapes, numpy-style.
fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat offset (in matrices) of `index` in a batch of shape `shape`, after
/// broadcasting to `full`.
fn batch_offset(index: &[usize], shape: &[usize]) -> usize {
    let skip = index.len() - shape.len();
    let mut off = 0;
    for (i, &dim) in shape.iter().enumerate() {
        let idx = if dim == 1 { 0 } else { index[skip + i] };
        off = off * dim + idx;
    }
    off
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Fails with [`Error::NonFinite`] naming `what` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.value().is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, self.requires_grad(), op)
    }

    /// Batched matrix product `[.., M, K] · [.., K, N]` with broadcast batch axes.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (value, m, k, n, pairs) = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            let mismatch = || {
                Error::Shape(format!(
                    "matmul operands {sa:?} and {sb:?} are incompatible"
                ))
            };
            if sa.len() < 2 || sb.len() < 2 {
                return Err(mismatch());
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            if k != k2 {
                return Err(mismatch());
            }
            let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
            let full = broadcast_batch(ba, bb).ok_or_else(mismatch)?;

            let (m, pairs, out_shape) = if bb.iter().all(|&d| d == 1) && ba == full.as_slice() {
                // shared right operand: fold the batch into the row count
                let rows: usize = ba.iter().product::<usize>() * m;
                let mut shape = full.clone();
                shape.extend([m, n]);
                (rows, vec![(0, 0)], shape)
            } else {
                let count: usize = full.iter().product();
                let mut pairs = Vec::with_capacity(count);
                let mut index = vec![0; full.len()];
                for _ in 0..count {
                    pairs.push((batch_offset(&index, ba), batch_offset(&index, bb)));
                    for axis in (0..full.len()).rev() {
                        index[axis] += 1;
                        if index[axis] < full[axis] {
                            break;
                        }
                        index[axis] = 0;
                    }
                }
                let mut shape = full.clone();
                shape.extend([m, n]);
                (m, pairs, shape)
            };

            let mut out = vec![T::zero(); pairs.len() * m * n];
            for (i, &(ao, bo)) in pairs.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[ao * m * k..(ao + 1) * m * k],
                    &b.data()[bo * k * n..(bo + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            (Tensor::new(out_shape, out)?, m, k, n, pairs)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            value,
            rg,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
                pairs,
            },
        ))
    }

    /// Elementwise sum of equal-shape tensors.
    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            let b = other.value();
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "add operands {:?} and {:?} differ",
                    a.shape(),
                    b.shape()
                )));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| x + y)
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            value,
            rg,
            Op::Add {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Adds a `[N]` vector to every row of a `[.., N]` tensor.
    pub fn add_bias(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            let b = bias.value();
            if b.shape().len() != 1 || b.numel() != x.last_dim() {
                return Err(Error::Shape(format!(
                    "bias {:?} does not match trailing axis of {:?}",
                    b.shape(),
                    x.shape()
                )));
            }
            let w = b.numel();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(w) {
                row.iter_mut().zip(b.data()).for_each(|(v, &b)| *v = *v + b);
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            value,
            rg,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    /// `x · W + b` over the trailing axis, with `W: [K, N]` and `b: [N]`.
    pub fn linear(&self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(weight)?.add_bias(bias)
    }

    pub fn scale(&self, factor: T) -> Var<'t, T> {
        let value = {
            let x = self.value();
            let data = x.data().iter().map(|&v| v * factor).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        self.unary(value, Op::Scale { x: self.id, factor })
    }

    /// Elementwise product with a constant of the same shape (e.g. a dropout mask).
    pub fn mul_const(&self, factors: Tensor<T>) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            if x.shape() != factors.shape() {
                return Err(Error::Shape(format!(
                    "mul_const operands {:?} and {:?} differ",
                    x.shape(),
                    factors.shape()
                )));
            }
            let data = x
                .data()
                .iter()
                .zip(factors.data())
                .map(|(&a, &b)| a * b)
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.unary(
            value,
            Op::MulConst {
                x: self.id,
                factors: factors.into_data(),
            },
        ))
    }

    pub fn gelu(&self) -> Var<'t, T> {
        let value = {
            let x = self.value();
            let data = x.data().iter().map(|&v| gelu(v)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        self.unary(value, Op::Gelu { x: self.id })
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let value = {
            let x = self.value();
            let data = x.data().iter().map(|&v| v.tanh()).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        self.unary(value, Op::Tanh { x: self.id })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let (value, outer, len, inner) = {
            let x = self.value();
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(Error::Shape(format!(
                    "softmax axis {axis} out of range for {shape:?}"
                )));
            }
            let outer: usize = shape[..axis].iter().product();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let idx = |j: usize| base + j * inner;
                    let max = (0..len)
                        .map(|j| data[idx(j)])
                        .fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for j in 0..len {
                        let e = (data[idx(j)] - max).exp();
                        data[idx(j)] = e;
                        total = total + e;
                    }
                    for j in 0..len {
                        data[idx(j)] = data[idx(j)] / total;
                    }
                }
            }
            (Tensor::new(shape.to_vec(), data)?, outer, len, inner)
        };
        Ok(self.unary(
            value,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalizes each trailing-axis row to zero mean and unit (biased)
    /// variance, then applies `gamma` and `beta`.
    pub fn layer_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (value, xhat, inv_std) = {
            let x = self.value();
            let gv = gamma.value();
            let bv = beta.value();
            let h = x.last_dim();
            if h < 2 || gv.numel() != h || bv.numel() != h {
                return Err(Error::Shape(format!(
                    "layer_norm over {:?} with gamma {:?} and beta {:?}",
                    x.shape(),
                    gv.shape(),
                    bv.shape()
                )));
            }
            let hn = T::from_usize(h).expect("width fits");
            let rows = x.numel() / h;
            let mut out = vec![T::zero(); x.numel()];
            let mut xhat = vec![T::zero(); x.numel()];
            let mut inv_std = Vec::with_capacity(rows);
            for (r, row) in x.data().chunks(h).enumerate() {
                let mean = row.iter().copied().sum::<T>() / hn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
                let inv = T::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for c in 0..h {
                    let xh = (row[c] - mean) * inv;
                    xhat[r * h + c] = xh;
                    out[r * h + c] = gv.data()[c] * xh + bv.data()[c];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            value,
            rg,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[N, C]` logits, over rows where `mask` is true (all rows if `None`).
    pub fn cross_entropy(&self, targets: &[usize], mask: Option<&[bool]>) -> Result<Var<'t, T>> {
        let (value, probs, mask, count) = {
            let x = self.value();
            let shape = x.shape();
            if shape.len() != 2 || shape[0] != targets.len() {
                return Err(Error::Shape(format!(
                    "cross_entropy logits {shape:?} with {} targets",
                    targets.len()
                )));
            }
            let mask: Vec<bool> = match mask {
                Some(m) if m.len() != targets.len() => {
                    return Err(Error::Shape(format!(
                        "cross_entropy mask has {} entries for {} targets",
                        m.len(),
                        targets.len()
                    )))
                }
                Some(m) => m.to_vec(),
                None => vec![true; targets.len()],
            };
            let c = shape[1];
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::EmptyLoss);
            }
            let mut probs = vec![T::zero(); x.numel()];
            let mut total = T::zero();
            for (row, (&t, &keep)) in targets.iter().zip(&mask).enumerate() {
                if !keep {
                    continue;
                }
                if t >= c {
                    return Err(Error::Data(format!(
                        "target {t} at row {row} is outside {c} classes"
                    )));
                }
                let logits = &x.data()[row * c..(row + 1) * c];
                let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                let sum_exp: T = logits.iter().map(|&l| (l - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                total = total + (log_z - logits[t]);
                for j in 0..c {
                    probs[row * c + j] = (logits[j] - log_z).exp();
                }
            }
            let n = T::from_usize(count).expect("count fits");
            (Tensor::scalar(total / n), probs, mask, count)
        };
        Ok(self.unary(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                mask,
                probs,
                count,
            },
        ))
    }

    /// Row lookup into a `[V, H]` table; the result has shape `out_shape ++ [H]`.
    pub fn embedding(&self, ids: &[usize], out_shape: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let table = self.value();
            let shape = table.shape();
            if shape.len() != 2 {
                return Err(Error::Shape(format!(
                    "embedding table must be 2-D, got {shape:?}"
                )));
            }
            if out_shape.iter().product::<usize>() != ids.len() {
                return Err(Error::Shape(format!(
                    "{} ids cannot fill shape {out_shape:?}",
                    ids.len()
                )));
            }
            let (vocab, h) = (shape[0], shape[1]);
            let mut data = Vec::with_capacity(ids.len() * h);
            for (pos, &id) in ids.iter().enumerate() {
                if id >= vocab {
                    return Err(Error::Data(format!(
                        "token id {id} at flat position {pos} exceeds vocabulary size {vocab}"
                    )));
                }
                data.extend_from_slice(&table.data()[id * h..(id + 1) * h]);
            }
            let mut s = out_shape.to_vec();
            s.push(h);
            Tensor::new(s, data)?
        };
        Ok(self.unary(
            value,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention over `[B, T, H]` projections.
    /// `key_mask[b * T + j]` marks key position `j` of row `b` as attendable.
    pub fn attention(
        &self,
        keys: Var<'t, T>,
        values: Var<'t, T>,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var<'t, T>> {
        let (value, batch, seq, probs) = {
            let q = self.value();
            let k = keys.value();
            let v = values.value();
            let shape = q.shape();
            if shape.len() != 3 || k.shape() != shape || v.shape() != shape {
                return Err(Error::Shape(format!(
                    "attention needs equal [B,T,H] inputs, got {:?} {:?} {:?}",
                    shape,
                    k.shape(),
                    v.shape()
                )));
            }
            let (batch, seq, hidden) = (shape[0], shape[1], shape[2]);
            if heads == 0 || hidden % heads != 0 {
                return Err(Error::Shape(format!(
                    "{heads} heads do not divide hidden size {hidden}"
                )));
            }
            if key_mask.len() != batch * seq {
                return Err(Error::Shape(format!(
                    "key mask has {} entries for {batch}x{seq} positions",
                    key_mask.len()
                )));
            }
            let d = hidden / heads;
            let scale = T::one() / T::from_usize(d).expect("head dim fits").sqrt();
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            let mut probs = vec![T::zero(); batch * heads * seq * seq];
            let mut out = vec![T::zero(); q.numel()];
            for b in 0..batch {
                let keymask = &key_mask[b * seq..(b + 1) * seq];
                if !keymask.iter().any(|&m| m) {
                    return Err(Error::Contract(format!(
                        "row {b} has no attendable positions"
                    )));
                }
                for h in 0..heads {
                    let pbase = (b * heads + h) * seq * seq;
                    for i in 0..seq {
                        let qi = (b * seq + i) * hidden + h * d;
                        let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                        let mut max = T::neg_infinity();
                        for j in 0..seq {
                            if !keymask[j] {
                                continue;
                            }
                            let kj = (b * seq + j) * hidden + h * d;
                            let mut s = T::zero();
                            for c in 0..d {
                                s = s + qd[qi + c] * kd[kj + c];
                            }
                            prow[j] = s * scale;
                            max = max.max(prow[j]);
                        }
                        let mut total = T::zero();
                        for j in 0..seq {
                            if keymask[j] {
                                prow[j] = (prow[j] - max).exp();
                                total = total + prow[j];
                            }
                        }
                        for j in 0..seq {
                            if keymask[j] {
                                prow[j] = prow[j] / total;
                                let vj = (b * seq + j) * hidden + h * d;
                                for c in 0..d {
                                    out[qi + c] = out[qi + c] + prow[j] * vd[vj + c];
                                }
                            }
                        }
                    }
                }
            }
            (Tensor::new(shape.to_vec(), out)?, batch, seq, probs)
        };
        let rg = self.requires_grad() || keys.requires_grad() || values.requires_grad();
        Ok(self.tape.push(
            value,
            rg,
            Op::Attention {
                q: self.id,
                k: keys.id,
                v: values.id,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Selects rows of the tensor viewed as `[N, D]` (D = trailing axis).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            let w = x.last_dim();
            let n = x.numel() / w;
            let mut data = Vec::with_capacity(rows.len() * w);
            for &r in rows {
                if r >= n {
                    return Err(Error::Shape(format!("row {r} out of range for {n} rows")));
                }
                data.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
            }
            Tensor::new(vec![rows.len(), w], data)?
        };
        Ok(self.unary(
            value,
            Op::GatherRows {
                x: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape { x: self.id }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let total = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(total), Op::Sum { x: self.id })
    }
}
