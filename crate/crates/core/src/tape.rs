//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The tape is rebuilt per forward pass (define-by-run): every operation
//! records its output tensor plus parent indices, and `backward` walks the
//! nodes in reverse, which is automatically a reverse topological order.
//! Tensors on the tape are immutable once recorded.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Relu,
    Softplus,
    Softmax,
    Sum,
    Mean,
    MeanAxis0,
    Concat { axis: usize },
    Reshape,
    Slice { axis: usize, start: usize },
    Broadcast { axis: usize, n: usize },
}

struct Node {
    op: OpKind,
    parents: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// How the rhs of a binary elementwise op lines up with the lhs.
enum Align {
    Same,
    ScalarRhs,
    /// rhs shape equals a suffix of lhs shape; rhs repeats over the leading axes.
    TrailingRhs,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(OpKind::Leaf, vec![], value, requires_grad)
    }

    /// Leaf that never takes gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: OpKind, parents: Vec<usize>, value: Tensor, rg: bool) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite output of {:?} with shape {:?}",
            op,
            value.shape()
        );
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, op: OpKind, a: Var, data: Vec<f64>) -> Var {
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.nodes[a.0].requires_grad;
        let value = Tensor::new(&shape, data).expect("unary preserves shape");
        self.push(op, vec![a.0], value, rg)
    }

    // ---- elementwise binary ----------------------------------------------

    fn align(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Align> {
        if lhs == rhs {
            return Ok(Align::Same);
        }
        let rn: usize = rhs.iter().product();
        if rn == 1 {
            return Ok(Align::ScalarRhs);
        }
        if rhs.len() <= lhs.len() && &lhs[lhs.len() - rhs.len()..] == rhs {
            return Ok(Align::TrailingRhs);
        }
        Err(Error::shape(op, lhs, rhs))
    }

    fn binary(
        &mut self,
        kind: OpKind,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (la, lb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let align = Self::align(name, la.shape(), lb.shape())?;
        let out = match align {
            Align::Same => la
                .data()
                .iter()
                .zip(lb.data())
                .map(|(x, y)| f(*x, *y))
                .collect::<Vec<_>>(),
            Align::ScalarRhs => {
                let y = lb.data()[0];
                la.data().iter().map(|x| f(*x, y)).collect()
            }
            Align::TrailingRhs => {
                let bn = lb.len();
                la.data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| f(*x, lb.data()[i % bn]))
                    .collect()
            }
        };
        let shape = la.shape().to_vec();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let value = Tensor::new(&shape, out).expect("binary preserves lhs shape");
        Ok(self.push(kind, vec![a.0, b.0], value, rg))
    }

    /// Elementwise sum; rhs may be a scalar or a trailing-shape broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Div, "div", a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].value.data().iter().map(|x| c * x).collect();
        self.unary(OpKind::Scale(c), a, data)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].value.data().iter().map(|x| x + c).collect();
        self.unary(OpKind::AddScalar, a, data)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ---- unary maps ------------------------------------------------------

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data().iter().map(|x| x.tanh()).collect();
        self.unary(OpKind::Tanh, a, data)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data().iter().map(|x| x.exp()).collect();
        self.unary(OpKind::Exp, a, data)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data().iter().map(|x| x.ln()).collect();
        self.unary(OpKind::Log, a, data)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data().iter().map(|x| x.sqrt()).collect();
        self.unary(OpKind::Sqrt, a, data)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self
            .nodes[a.0]
            .value
            .data()
            .iter()
            .map(|x| x.max(0.0))
            .collect();
        self.unary(OpKind::Relu, a, data)
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: Var) -> Var {
        let data = self
            .nodes[a.0]
            .value
            .data()
            .iter()
            .map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        self.unary(OpKind::Softplus, a, data)
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let last = *t
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("softmax", "zero-dim input"))?;
        if last == 0 {
            return Err(Error::invalid("softmax", "empty last axis"));
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(last) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.unary(OpKind::Softmax, a, data))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(OpKind::Sum, vec![a.0], Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(OpKind::Mean, vec![a.0], Tensor::scalar(m), rg)
    }

    /// Per-column mean of a 2-D tensor: [B, D] -> [D].
    #[allow(clippy::needless_range_loop)]
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.ndim() != 2 {
            return Err(Error::invalid("mean_axis0", "input must be 2-D"));
        }
        let (b, d) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; d];
        for r in 0..b {
            for c in 0..d {
                out[c] += t.data()[r * d + c];
            }
        }
        for v in out.iter_mut() {
            *v /= b as f64;
        }
        let rg = self.nodes[a.0].requires_grad;
        let value = Tensor::new(&[d], out).expect("mean_axis0 shape");
        Ok(self.push(OpKind::MeanAxis0, vec![a.0], value, rg))
    }

    // ---- shape ops -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        if n != t.len() {
            return Err(Error::shape("reshape", t.shape(), shape));
        }
        let value = Tensor::new(shape, t.data().to_vec()).expect("reshape checked");
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(OpKind::Reshape, vec![a.0], value, rg))
    }

    /// Take `len` indices starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let shape = t.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} out of axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let rg = self.nodes[a.0].requires_grad;
        let value = Tensor::new(&new_shape, out).expect("slice shape");
        Ok(self.push(OpKind::Slice { axis, start }, vec![a.0], value, rg))
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let mid = t.shape()[axis];
                let base = o * mid * inner;
                out.extend_from_slice(&t.data()[base..base + mid * inner]);
            }
        }
        let mut new_shape = first.clone();
        new_shape[axis] = axis_total;
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        let value = Tensor::new(&new_shape, out).expect("concat shape");
        Ok(self.push(
            OpKind::Concat { axis },
            parts.iter().map(|p| p.0).collect(),
            value,
            rg,
        ))
    }

    /// Insert a new axis of size `n` at `axis`, replicating the input.
    pub fn broadcast(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let shape = t.shape();
        if axis > shape.len() {
            return Err(Error::invalid("broadcast", format!("axis {axis} out of range")));
        }
        if n == 0 {
            return Err(Error::invalid("broadcast", "zero copies"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let block = &t.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(block);
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.insert(axis, n);
        let rg = self.nodes[a.0].requires_grad;
        let value = Tensor::new(&new_shape, out).expect("broadcast shape");
        Ok(self.push(OpKind::Broadcast { axis, n }, vec![a.0], value, rg))
    }

    // ---- matmul ----------------------------------------------------------

    /// Matrix product. Supported layouts:
    /// [m,k]x[k,n], [B,m,k]x[k,n], [B,m,k]x[B,k,n], [m,k]x[B,k,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let value = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
                if k != k2 {
                    return Err(Error::shape("matmul", sa, sb));
                }
                let mut out = vec![0.0; m * n];
                mm(ta.data(), tb.data(), m, k, n, &mut out);
                Tensor::new(&[m, n], out).expect("matmul shape")
            }
            (3, 2) => {
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let (k2, n) = (sb[0], sb[1]);
                if k != k2 {
                    return Err(Error::shape("matmul", sa, sb));
                }
                let mut out = vec![0.0; bt * m * n];
                for i in 0..bt {
                    mm(
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        tb.data(),
                        m,
                        k,
                        n,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                Tensor::new(&[bt, m, n], out).expect("matmul shape")
            }
            (3, 3) => {
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let (bt2, k2, n) = (sb[0], sb[1], sb[2]);
                if k != k2 || bt != bt2 {
                    return Err(Error::shape("matmul", sa, sb));
                }
                let mut out = vec![0.0; bt * m * n];
                for i in 0..bt {
                    mm(
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                Tensor::new(&[bt, m, n], out).expect("matmul shape")
            }
            (2, 3) => {
                let (m, k) = (sa[0], sa[1]);
                let (bt, k2, n) = (sb[0], sb[1], sb[2]);
                if k != k2 {
                    return Err(Error::shape("matmul", sa, sb));
                }
                let mut out = vec![0.0; bt * m * n];
                for i in 0..bt {
                    mm(
                        ta.data(),
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                Tensor::new(&[bt, m, n], out).expect("matmul shape")
            }
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(OpKind::MatMul, vec![a.0, b.0], value, rg))
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagate from a scalar loss. Returns per-node gradients for every
    /// node that requires grad and is reachable from the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let parent_rg: Vec<bool> = node
            .parents
            .iter()
            .map(|&p| self.nodes[p].requires_grad)
            .collect();
        let mut add_to = |slot: usize, p: usize, contrib: Vec<f64>| {
            if !parent_rg[slot] {
                return;
            }
            match &mut grads[p] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                None => grads[p] = Some(contrib),
            }
        };

        match &node.op {
            OpKind::Leaf => {}
            OpKind::Add | OpKind::Sub => {
                let (pa, pb) = (node.parents[0], node.parents[1]);
                if parent_rg[0] {
                    add_to(0, pa, g.to_vec());
                }
                if parent_rg[1] {
                    let sign = if matches!(node.op, OpKind::Sub) { -1.0 } else { 1.0 };
                    let contrib = reduce_to_rhs(g, self.nodes[pb].value.len(), sign);
                    add_to(1, pb, contrib);
                }
            }
            OpKind::Mul => {
                let (pa, pb) = (node.parents[0], node.parents[1]);
                let (xa, xb) = (self.nodes[pa].value.data(), self.nodes[pb].value.data());
                if parent_rg[0] {
                    let bn = xb.len();
                    let contrib = g.iter().enumerate().map(|(i, gi)| gi * xb[i % bn]).collect();
                    add_to(0, pa, contrib);
                }
                if parent_rg[1] {
                    let bn = xb.len();
                    let mut contrib = vec![0.0; bn];
                    for (i, gi) in g.iter().enumerate() {
                        contrib[i % bn] += gi * xa[i];
                    }
                    add_to(1, pb, contrib);
                }
            }
            OpKind::Div => {
                let (pa, pb) = (node.parents[0], node.parents[1]);
                let (xa, xb) = (self.nodes[pa].value.data(), self.nodes[pb].value.data());
                let bn = xb.len();
                if parent_rg[0] {
                    let contrib = g.iter().enumerate().map(|(i, gi)| gi / xb[i % bn]).collect();
                    add_to(0, pa, contrib);
                }
                if parent_rg[1] {
                    let mut contrib = vec![0.0; bn];
                    for (i, gi) in g.iter().enumerate() {
                        let b = xb[i % bn];
                        contrib[i % bn] -= gi * xa[i] / (b * b);
                    }
                    add_to(1, pb, contrib);
                }
            }
            OpKind::Scale(c) => {
                let contrib = g.iter().map(|gi| gi * c).collect();
                add_to(0, node.parents[0], contrib);
            }
            OpKind::AddScalar | OpKind::Reshape => {
                add_to(0, node.parents[0], g.to_vec());
            }
            OpKind::Tanh => {
                let y = node.value.data();
                let contrib = g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                add_to(0, node.parents[0], contrib);
            }
            OpKind::Exp => {
                let y = node.value.data();
                let contrib = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                add_to(0, node.parents[0], contrib);
            }
            OpKind::Log => {
                let x = self.nodes[node.parents[0]].value.data();
                let contrib = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
                add_to(0, node.parents[0], contrib);
            }
            OpKind::Sqrt => {
                // Guarded at zero so sqrt(0) on a distance path cannot poison
                // the whole gradient with infinities.
                let y = node.value.data();
                let contrib = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| gi * 0.5 / yi.max(1e-12))
                    .collect();
                add_to(0, node.parents[0], contrib);
            }
            OpKind::Relu => {
                let x = self.nodes[node.parents[0]].value.data();
                let contrib = g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                add_to(0, node.parents[0], contrib);
            }
            OpKind::Softplus => {
                let x = self.nodes[node.parents[0]].value.data();
                let contrib = g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| gi / (1.0 + (-xi).exp()))
                    .collect();
                add_to(0, node.parents[0], contrib);
            }
            OpKind::Softmax => {
                let y = node.value.data();
                let last = *node.value.shape().last().unwrap();
                let mut contrib = vec![0.0; y.len()];
                for r in 0..y.len() / last {
                    let ys = &y[r * last..(r + 1) * last];
                    let gs = &g[r * last..(r + 1) * last];
                    let dot: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
                    for i in 0..last {
                        contrib[r * last + i] = ys[i] * (gs[i] - dot);
                    }
                }
                add_to(0, node.parents[0], contrib);
            }
            OpKind::Sum => {
                let n = self.nodes[node.parents[0]].value.len();
                add_to(0, node.parents[0], vec![g[0]; n]);
            }
            OpKind::Mean => {
                let n = self.nodes[node.parents[0]].value.len();
                add_to(0, node.parents[0], vec![g[0] / n as f64; n]);
            }
            OpKind::MeanAxis0 => {
                let shape = self.nodes[node.parents[0]].value.shape();
                let (b, d) = (shape[0], shape[1]);
                let mut contrib = vec![0.0; b * d];
                for r in 0..b {
                    for c in 0..d {
                        contrib[r * d + c] = g[c] / b as f64;
                    }
                }
                add_to(0, node.parents[0], contrib);
            }
            OpKind::Concat { axis } => {
                let axis = *axis;
                let out_shape = node.value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_mid = out_shape[axis];
                let mut offset = 0;
                for (slot, &p) in node.parents.iter().enumerate() {
                    let mid = self.nodes[p].value.shape()[axis];
                    if parent_rg[slot] {
                        let mut contrib = vec![0.0; outer * mid * inner];
                        for o in 0..outer {
                            let src = (o * total_mid + offset) * inner;
                            let dst = o * mid * inner;
                            contrib[dst..dst + mid * inner]
                                .copy_from_slice(&g[src..src + mid * inner]);
                        }
                        add_to(slot, p, contrib);
                    }
                    offset += mid;
                }
            }
            OpKind::Slice { axis, start } => {
                let (axis, start) = (*axis, *start);
                let in_shape = self.nodes[node.parents[0]].value.shape().to_vec();
                let outer: usize = in_shape[..axis].iter().product();
                let mid = in_shape[axis];
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = node.value.shape()[axis];
                let mut contrib = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    contrib[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                add_to(0, node.parents[0], contrib);
            }
            OpKind::Broadcast { axis, n } => {
                let (axis, n) = (*axis, *n);
                let in_shape = self.nodes[node.parents[0]].value.shape().to_vec();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis..].iter().product();
                let mut contrib = vec![0.0; outer * inner];
                for o in 0..outer {
                    for c in 0..n {
                        let src = (o * n + c) * inner;
                        for i in 0..inner {
                            contrib[o * inner + i] += g[src + i];
                        }
                    }
                }
                add_to(0, node.parents[0], contrib);
            }
            OpKind::MatMul => {
                let (pa, pb) = (node.parents[0], node.parents[1]);
                let (ta, tb) = (&self.nodes[pa].value, &self.nodes[pb].value);
                let (sa, sb) = (ta.shape(), tb.shape());
                match (sa.len(), sb.len()) {
                    (2, 2) => {
                        let (m, k, n) = (sa[0], sa[1], sb[1]);
                        if parent_rg[0] {
                            let mut da = vec![0.0; m * k];
                            mm_nt(g, tb.data(), m, n, k, &mut da);
                            add_to(0, pa, da);
                        }
                        if parent_rg[1] {
                            let mut db = vec![0.0; k * n];
                            mm_tn(ta.data(), g, m, k, n, &mut db);
                            add_to(1, pb, db);
                        }
                    }
                    (3, 2) => {
                        let (bt, m, k) = (sa[0], sa[1], sa[2]);
                        let n = sb[1];
                        if parent_rg[0] {
                            let mut da = vec![0.0; bt * m * k];
                            for i in 0..bt {
                                mm_nt(
                                    &g[i * m * n..(i + 1) * m * n],
                                    tb.data(),
                                    m,
                                    n,
                                    k,
                                    &mut da[i * m * k..(i + 1) * m * k],
                                );
                            }
                            add_to(0, pa, da);
                        }
                        if parent_rg[1] {
                            let mut db = vec![0.0; k * n];
                            for i in 0..bt {
                                mm_tn(
                                    &ta.data()[i * m * k..(i + 1) * m * k],
                                    &g[i * m * n..(i + 1) * m * n],
                                    m,
                                    k,
                                    n,
                                    &mut db,
                                );
                            }
                            add_to(1, pb, db);
                        }
                    }
                    (3, 3) => {
                        let (bt, m, k) = (sa[0], sa[1], sa[2]);
                        let n = sb[2];
                        if parent_rg[0] {
                            let mut da = vec![0.0; bt * m * k];
                            for i in 0..bt {
                                mm_nt(
                                    &g[i * m * n..(i + 1) * m * n],
                                    &tb.data()[i * k * n..(i + 1) * k * n],
                                    m,
                                    n,
                                    k,
                                    &mut da[i * m * k..(i + 1) * m * k],
                                );
                            }
                            add_to(0, pa, da);
                        }
                        if parent_rg[1] {
                            let mut db = vec![0.0; bt * k * n];
                            for i in 0..bt {
                                mm_tn(
                                    &ta.data()[i * m * k..(i + 1) * m * k],
                                    &g[i * m * n..(i + 1) * m * n],
                                    m,
                                    k,
                                    n,
                                    &mut db[i * k * n..(i + 1) * k * n],
                                );
                            }
                            add_to(1, pb, db);
                        }
                    }
                    (2, 3) => {
                        let (m, k) = (sa[0], sa[1]);
                        let (bt, n) = (sb[0], sb[2]);
                        if parent_rg[0] {
                            let mut da = vec![0.0; m * k];
                            for i in 0..bt {
                                mm_nt(
                                    &g[i * m * n..(i + 1) * m * n],
                                    &tb.data()[i * k * n..(i + 1) * k * n],
                                    m,
                                    n,
                                    k,
                                    &mut da,
                                );
                            }
                            add_to(0, pa, da);
                        }
                        if parent_rg[1] {
                            let mut db = vec![0.0; bt * k * n];
                            for i in 0..bt {
                                mm_tn(
                                    ta.data(),
                                    &g[i * m * n..(i + 1) * m * n],
                                    m,
                                    k,
                                    n,
                                    &mut db[i * k * n..(i + 1) * k * n],
                                );
                            }
                            add_to(1, pb, db);
                        }
                    }
                    _ => unreachable!("matmul recorded with unsupported shapes"),
                }
            }
        }
    }
}

/// Gradient results from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node, zeros if unreached.
    pub fn tensor(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(&shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

/// C[m,n] += A[m,k] * B[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// C[m,k] += G[m,n] * B[k,n]^T  (dot products of rows)
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let crow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            crow[p] += s;
        }
    }
}

/// C[k,n] += A[m,k]^T * G[m,n]
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let crow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * grow[j];
            }
        }
    }
}

/// Fold an output-shaped gradient back onto a broadcast rhs of `rhs_len`
/// elements (scalar or trailing-shape broadcast), with an optional sign flip.
fn reduce_to_rhs(g: &[f64], rhs_len: usize, sign: f64) -> Vec<f64> {
    let mut out = vec![0.0; rhs_len];
    for (i, gi) in g.iter().enumerate() {
        out[i % rhs_len] += sign * gi;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "tape-test");
        (0..n).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let m = Tensor::new(&[3, 3], rand_vec(9, 1)).unwrap();
        let i = tape.constant(Tensor::eye(3));
        let mv = tape.constant(m.clone());
        let out = tape.matmul(i, mv).unwrap();
        assert!(tape.value(out).max_abs_diff(&m) < 1e-15);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4, 7], rand_vec(28, 2)).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn tanh_reference_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1], vec![0.5]).unwrap());
        let y = tape.tanh(x);
        assert!((tape.value(y).data()[0] - 0.46211715726000974).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(&[4], rand_vec(4, 3)).unwrap(), true);
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_two_w() {
        let mut tape = Tape::new();
        let data = rand_vec(5, 4);
        let w = tape.leaf(Tensor::new(&[5], data.clone()).unwrap(), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        for (g, x) in grads.get(w).unwrap().iter().zip(&data) {
            assert!((g - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(tape.backward(w).is_err());
    }

    /// Three-layer tanh MLP gradient vs central finite differences.
    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let sizes = [(4usize, 5usize), (5, 3), (3, 2)];
        let x = Tensor::new(&[2, 4], rand_vec(8, 5)).unwrap();
        let weights: Vec<Tensor> = sizes
            .iter()
            .enumerate()
            .map(|(i, (a, b))| Tensor::new(&[*a, *b], rand_vec(a * b, 10 + i as u64)).unwrap())
            .collect();

        let run = |ws: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let mut h = tape.constant(x.clone());
            let mut wvars = Vec::new();
            for w in ws {
                let wv = tape.leaf(w.clone(), true);
                wvars.push(wv);
                h = tape.matmul(h, wv).unwrap();
                h = tape.tanh(h);
            }
            let loss = tape.sum(h);
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).item(),
                wvars.iter().map(|v| grads.get(*v).unwrap().to_vec()).collect(),
            )
        };

        let (_, ad) = run(&weights);
        for li in 0..weights.len() {
            let base = weights[li].clone();
            let fd = gradcheck::central_diff(
                |vals| {
                    let mut ws = weights.clone();
                    ws[li] = Tensor::new(base.shape(), vals.to_vec()).unwrap();
                    run(&ws).0
                },
                base.data(),
                1e-5,
            );
            let err = gradcheck::max_rel_err(&ad[li], &fd);
            assert!(err < 1e-4, "layer {li}: max rel err {err}");
        }
    }

    /// Every differentiable op against finite differences on random input.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        type Build = fn(&mut Tape, Var) -> Var;
        let unary_cases: Vec<(&str, Build)> = vec![
            ("tanh", |t, v| t.tanh(v)),
            ("exp", |t, v| t.exp(v)),
            ("sqrt", |t, v| t.sqrt(v)),
            ("softplus", |t, v| t.softplus(v)),
            ("relu", |t, v| t.relu(v)),
            ("scale", |t, v| t.scale(v, -2.5)),
            ("add_scalar", |t, v| t.add_scalar(v, 0.7)),
            ("softmax", |t, v| t.softmax(v).unwrap()),
            ("mean", |t, v| t.mean(v)),
            ("neg", |t, v| t.neg(v)),
        ];
        for (name, build) in unary_cases {
            // keep inputs positive for sqrt; shift others harmlessly
            let data: Vec<f64> = rand_vec(6, 42).iter().map(|v| v.abs() + 0.5).collect();
            let run = |vals: &[f64]| -> (f64, Vec<f64>) {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::new(&[2, 3], vals.to_vec()).unwrap(), true);
                let y = build(&mut tape, x);
                let loss = if tape.value(y).is_scalar() {
                    y
                } else {
                    let w = tape.constant(Tensor::new(&[2, 3], rand_vec(6, 99)).unwrap());
                    let prod = tape.mul(y, w).unwrap();
                    tape.sum(prod)
                };
                let g = tape.backward(loss).unwrap();
                (tape.value(loss).item(), g.get(x).unwrap().to_vec())
            };
            let (_, ad) = run(&data);
            let fd = gradcheck::central_diff(|vals| run(vals).0, &data, 1e-6);
            let err = gradcheck::max_rel_err(&ad, &fd);
            assert!(err < 1e-4, "{name}: max rel err {err}");
        }

        // log needs strictly positive input
        {
            let data: Vec<f64> = rand_vec(6, 43).iter().map(|v| v.abs() + 0.5).collect();
            let run = |vals: &[f64]| -> (f64, Vec<f64>) {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::new(&[6], vals.to_vec()).unwrap(), true);
                let y = tape.log(x);
                let loss = tape.sum(y);
                let g = tape.backward(loss).unwrap();
                (tape.value(loss).item(), g.get(x).unwrap().to_vec())
            };
            let (_, ad) = run(&data);
            let fd = gradcheck::central_diff(|vals| run(vals).0, &data, 1e-6);
            assert!(gradcheck::max_rel_err(&ad, &fd) < 1e-4, "log gradient");
        }
    }

    /// Binary ops with broadcasting, both sides, against finite differences.
    #[test]
    fn binary_op_gradients_with_broadcast() {
        type Build2 = fn(&mut Tape, Var, Var) -> Var;
        let cases: Vec<(&str, Build2)> = vec![
            ("add", |t, a, b| t.add(a, b).unwrap()),
            ("sub", |t, a, b| t.sub(a, b).unwrap()),
            ("mul", |t, a, b| t.mul(a, b).unwrap()),
            ("div", |t, a, b| t.div(a, b).unwrap()),
        ];
        for rhs_shape in [vec![2usize, 3], vec![3], vec![1]] {
            for (name, build) in &cases {
                let na = 6;
                let nb: usize = rhs_shape.iter().product();
                let a0: Vec<f64> = rand_vec(na, 50).iter().map(|v| v + 2.0).collect();
                let b0: Vec<f64> = rand_vec(nb, 51).iter().map(|v| v + 2.0).collect();
                let run = |av: &[f64], bv: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
                    let mut tape = Tape::new();
                    let a = tape.leaf(Tensor::new(&[2, 3], av.to_vec()).unwrap(), true);
                    let b = tape.leaf(Tensor::new(&rhs_shape, bv.to_vec()).unwrap(), true);
                    let y = build(&mut tape, a, b);
                    let w = tape.constant(Tensor::new(&[2, 3], rand_vec(6, 52)).unwrap());
                    let prod = tape.mul(y, w).unwrap();
                    let loss = tape.sum(prod);
                    let g = tape.backward(loss).unwrap();
                    (
                        tape.value(loss).item(),
                        g.get(a).unwrap().to_vec(),
                        g.get(b).unwrap().to_vec(),
                    )
                };
                let (_, ga, gb) = run(&a0, &b0);
                let fa = gradcheck::central_diff(|v| run(v, &b0).0, &a0, 1e-6);
                let fb = gradcheck::central_diff(|v| run(&a0, v).0, &b0, 1e-6);
                assert!(
                    gradcheck::max_rel_err(&ga, &fa) < 1e-4,
                    "{name} lhs rhs_shape={rhs_shape:?}"
                );
                assert!(
                    gradcheck::max_rel_err(&gb, &fb) < 1e-4,
                    "{name} rhs rhs_shape={rhs_shape:?}"
                );
            }
        }
    }

    /// Shape ops (concat, slice, broadcast, reshape, mean_axis0) and all four
    /// matmul layouts against finite differences.
    #[test]
    fn structural_op_gradients() {
        // concat + slice
        {
            let a0 = rand_vec(6, 60);
            let b0 = rand_vec(4, 61);
            let run = |av: &[f64], bv: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
                let mut tape = Tape::new();
                let a = tape.leaf(Tensor::new(&[2, 3], av.to_vec()).unwrap(), true);
                let b = tape.leaf(Tensor::new(&[2, 2], bv.to_vec()).unwrap(), true);
                let cat = tape.concat(&[a, b], 1).unwrap();
                let sl = tape.slice(cat, 1, 1, 3).unwrap();
                let sq = tape.mul(sl, sl).unwrap();
                let loss = tape.sum(sq);
                let g = tape.backward(loss).unwrap();
                (
                    tape.value(loss).item(),
                    g.get(a).unwrap().to_vec(),
                    g.get(b).unwrap().to_vec(),
                )
            };
            let (_, ga, gb) = run(&a0, &b0);
            let fa = gradcheck::central_diff(|v| run(v, &b0).0, &a0, 1e-6);
            let fb = gradcheck::central_diff(|v| run(&a0, v).0, &b0, 1e-6);
            assert!(gradcheck::max_rel_err(&ga, &fa) < 1e-4, "concat/slice lhs");
            assert!(gradcheck::max_rel_err(&gb, &fb) < 1e-4, "concat/slice rhs");
        }
        // broadcast + mean_axis0 + reshape
        {
            let a0 = rand_vec(6, 62);
            let run = |av: &[f64]| -> (f64, Vec<f64>) {
                let mut tape = Tape::new();
                let a = tape.leaf(Tensor::new(&[2, 3], av.to_vec()).unwrap(), true);
                let bc = tape.broadcast(a, 1, 4).unwrap(); // [2,4,3]
                let r = tape.reshape(bc, &[8, 3]).unwrap();
                let m = tape.mean_axis0(r).unwrap(); // [3]
                let sq = tape.mul(m, m).unwrap();
                let loss = tape.sum(sq);
                let g = tape.backward(loss).unwrap();
                (tape.value(loss).item(), g.get(a).unwrap().to_vec())
            };
            let (_, ad) = run(&a0);
            let fd = gradcheck::central_diff(|v| run(v).0, &a0, 1e-6);
            assert!(gradcheck::max_rel_err(&ad, &fd) < 1e-4, "broadcast chain");
        }
        // matmul layouts
        let layouts: Vec<(Vec<usize>, Vec<usize>)> = vec![
            (vec![2, 3], vec![3, 4]),
            (vec![2, 3, 4], vec![4, 2]),
            (vec![2, 3, 4], vec![2, 4, 2]),
            (vec![3, 4], vec![2, 4, 2]),
        ];
        for (sa, sb) in layouts {
            let na: usize = sa.iter().product();
            let nb: usize = sb.iter().product();
            let a0 = rand_vec(na, 70);
            let b0 = rand_vec(nb, 71);
            let run = |av: &[f64], bv: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
                let mut tape = Tape::new();
                let a = tape.leaf(Tensor::new(&sa, av.to_vec()).unwrap(), true);
                let b = tape.leaf(Tensor::new(&sb, bv.to_vec()).unwrap(), true);
                let y = tape.matmul(a, b).unwrap();
                let sq = tape.mul(y, y).unwrap();
                let loss = tape.sum(sq);
                let g = tape.backward(loss).unwrap();
                (
                    tape.value(loss).item(),
                    g.get(a).unwrap().to_vec(),
                    g.get(b).unwrap().to_vec(),
                )
            };
            let (_, ga, gb) = run(&a0, &b0);
            let fa = gradcheck::central_diff(|v| run(v, &b0).0, &a0, 1e-6);
            let fb = gradcheck::central_diff(|v| run(&a0, v).0, &b0, 1e-6);
            assert!(gradcheck::max_rel_err(&ga, &fa) < 1e-4, "matmul {sa:?}x{sb:?} lhs");
            assert!(gradcheck::max_rel_err(&gb, &fb) < 1e-4, "matmul {sa:?}x{sb:?} rhs");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[3, 3], rand_vec(9, 80)).unwrap());
            let y = tape.tanh(x);
            let s = tape.softmax(y).unwrap();
            let loss = tape.sum(s);
            tape.value(loss).item().to_bits()
        };
        assert_eq!(build(), build());
    }
}
