//! Define-by-run tape. Every op evaluates eagerly and records what its
//! backward rule needs; `backward` walks the node list once in reverse.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    TransposeLast2 { x: Var },
    Binary { kind: BinKind, a: Var, b: Var, a_strides: Vec<usize>, b_strides: Vec<usize> },
    Scale { x: Var, c: f64 },
    Exp { x: Var },
    Log { x: Var },
    Relu { x: Var },
    Softmax { x: Var },
    LogSumExp { x: Var },
    SumAll { x: Var },
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    MaxLast { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    GradReverse { x: Var, gamma: f64 },
    StraightThrough { soft: Var },
    Normalize { x: Var, norms: Vec<f64>, floor: f64 },
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<i64>, row_weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. `None` if `v` does not require grad
    /// or is not an ancestor of the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros for an unreachable node.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Computation graph for one forward pass.
///
/// Calling [`Tape::backward`] a second time on the same tape is an error;
/// build a fresh tape per step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[..., k] × b[k, n] -> [..., n]`; leading dims of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        kernels::gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `a[B, m, k] × b[B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(
            "batch_matmul",
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, batch, m, k, n },
            &[a, b],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = kernels::transpose_last2(self.value(x).data(), r, c);
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        self.push("transpose", Tensor::new(shape, out)?, Op::TransposeLast2 { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = kernels::broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let a_strides = kernels::broadcast_strides(sa, &out_shape);
        let b_strides = kernels::broadcast_strides(sb, &out_shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if kind == BinKind::Div && bv.iter().any(|&x| x == 0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let numel: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        if sa == sb {
            out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        } else {
            kernels::for_each_broadcast(&out_shape, &a_strides, &b_strides, |_, ia, ib| {
                out.push(f(av[ia], bv[ib]));
            });
        }
        self.push(
            name,
            Tensor::new(out_shape, out)?,
            Op::Binary { kind, a, b, a_strides, b_strides },
            &[a, b],
        )
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", Tensor::new(shape, out)?, Op::Scale { x, c }, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push("exp", Tensor::new(shape, out)?, Op::Exp { x }, &[x])
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).data();
        if let Some(bad) = xs.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let out: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push("log", Tensor::new(shape, out)?, Op::Log { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", Tensor::new(shape, out)?, Op::Relu { x }, &[x])
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape, "softmax")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { x }, &[x])
    }

    /// `log Σ exp` over the last axis; keeps that axis with size 1.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let n = last_dim(&shape, "logsumexp")?;
        let out: Vec<f64> = self.value(x).data().chunks(n).map(kernels::logsumexp).collect();
        *shape.last_mut().unwrap() = 1;
        self.push("logsumexp", Tensor::new(shape, out)?, Op::LogSumExp { x }, &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = kernels::sum(self.value(x).data());
        self.push("sum", Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xs[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        shape[axis] = 1;
        self.push("sum_axis", Tensor::new(shape, out)?, Op::SumAxis { x, outer, len, inner }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", self.shape(x), &[axis]))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Max over the last axis (kept with size 1). The gradient goes to the
    /// first maximal entry.
    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let n = last_dim(&shape, "max_last")?;
        let mut argmax = Vec::new();
        let mut out = Vec::new();
        for row in self.value(x).data().chunks(n) {
            let (idx, v) = kernels::argmax(row);
            argmax.push(idx);
            out.push(v);
        }
        *shape.last_mut().unwrap() = 1;
        self.push("max_last", Tensor::new(shape, out)?, Op::MaxLast { x, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", self.shape(x), shape))?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Identity forward; backward multiplies the incoming gradient by `-gamma`.
    pub fn gradient_reversal(&mut self, x: Var, gamma: f64) -> Result<Var> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::Config(format!(
                "gradient reversal needs gamma >= 0, got {gamma}"
            )));
        }
        let value = self.value(x).clone();
        self.push("gradient_reversal", value, Op::GradReverse { x, gamma }, &[x])
    }

    /// Copy of `x` that blocks all gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Forward value is `hard`; the gradient is passed to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", self.shape(soft), hard.shape()));
        }
        self.push("straight_through", hard, Op::StraightThrough { soft }, &[soft])
    }

    /// Divides each last-axis row by `max(‖row‖, floor)`. With `floor == 0`,
    /// a zero row is a domain error.
    pub fn l2_normalize(&mut self, x: Var, floor: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape, "l2_normalize")?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 && floor <= 0.0 {
                return Err(Error::Domain {
                    op: "l2_normalize",
                    msg: "zero-norm row and no norm floor".into(),
                });
            }
            let denom = norm.max(floor);
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(norm);
        }
        self.push("l2_normalize", Tensor::new(shape, out)?, Op::Normalize { x, norms, floor }, &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits[B, C]`. Rows whose target equals `ignore_index` contribute
    /// neither loss nor gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        self.weighted_cross_entropy(logits, targets, None, ignore_index)
    }

    /// Cross-entropy with optional non-negative per-row weights; the loss is
    /// the weighted mean over non-ignored rows.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[i64],
        weights: Option<&[f64]>,
        ignore_index: i64,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(w) = weights {
            if w.len() != targets.len() || w.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Domain {
                    op: "cross_entropy",
                    msg: "row weights must be non-negative, one per row".into(),
                });
            }
        }
        let c = shape[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut row_weights = vec![0.0; targets.len()];
        let mut total_w = 0.0;
        let mut loss = 0.0;
        for (r, (&t, row)) in targets.iter().zip(probs.chunks_mut(c)).enumerate() {
            if t == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= c {
                return Err(Error::Domain {
                    op: "cross_entropy",
                    msg: format!("target {t} outside 0..{c}"),
                });
            }
            let lse = kernels::logsumexp(row);
            let w = weights.map_or(1.0, |w| w[r]);
            loss += w * (lse - row[t as usize]);
            kernels::softmax_in_place(row);
            row_weights[r] = w;
            total_w += w;
        }
        if total_w <= 0.0 {
            return Err(Error::EmptyBatch);
        }
        row_weights.iter_mut().for_each(|w| *w /= total_w);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / total_w),
            Op::CrossEntropy { logits, probs, targets: targets.to_vec(), row_weights },
            &[logits],
        )
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::gemm_nt_acc(g, bv, ga, *m, *n, *k);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::gemm_tn_acc(av, g, gb, *m, *k, *n);
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (mk, kn, mn) = (m * k, k * n, m * n);
                if needs(*a) {
                    let ga = slot(grads, *a, batch * mk);
                    for i in 0..*batch {
                        kernels::gemm_nt_acc(
                            &g[i * mn..(i + 1) * mn],
                            &bv[i * kn..(i + 1) * kn],
                            &mut ga[i * mk..(i + 1) * mk],
                            *m,
                            *n,
                            *k,
                        );
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, batch * kn);
                    for i in 0..*batch {
                        kernels::gemm_tn_acc(
                            &av[i * mk..(i + 1) * mk],
                            &g[i * mn..(i + 1) * mn],
                            &mut gb[i * kn..(i + 1) * kn],
                            *m,
                            *k,
                            *n,
                        );
                    }
                }
            }
            Op::TransposeLast2 { x } => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = kernels::transpose_last2(g, r, c);
                add_into(slot(grads, *x, back.len()), &back);
            }
            Op::Binary { kind, a, b, a_strides, b_strides } => {
                self.binary_backward(*kind, *a, *b, a_strides, b_strides, node.value.shape(), g, grads);
            }
            Op::Scale { x, c } => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c);
            }
            Op::Exp { x } => {
                let y = node.value.data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i];
                }
            }
            Op::Log { x } => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] / xv[i];
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let gx = slot(grads, *x, g.len());
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        dr[i] += yr[i] * (gr[i] - dot);
                    }
                }
            }
            Op::LogSumExp { x } => {
                let xv = self.value(*x).data();
                let n = *self.shape(*x).last().unwrap();
                let out = node.value.data();
                let gx = slot(grads, *x, xv.len());
                for (r, (xr, dr)) in xv.chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                    for i in 0..n {
                        dr[i] += g[r] * (xr[i] - out[r]).exp();
                    }
                }
            }
            Op::SumAll { x } => {
                let len = self.value(*x).numel();
                let gx = slot(grads, *x, len);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumAxis { x, outer, len, inner } => {
                let gx = slot(grads, *x, outer * len * inner);
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        add_into(dst, src);
                    }
                }
            }
            Op::MaxLast { x, argmax } => {
                let n = *self.shape(*x).last().unwrap();
                let gx = slot(grads, *x, argmax.len() * n);
                for (r, &j) in argmax.iter().enumerate() {
                    gx[r * n + j] += g[r];
                }
            }
            Op::Reshape { x } | Op::StraightThrough { soft: x } => {
                add_into(slot(grads, *x, g.len()), g);
            }
            Op::GradReverse { x, gamma } => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, gi)| *d += -gamma * gi);
            }
            Op::Normalize { x, norms, floor } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let gx = slot(grads, *x, g.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dr = &mut gx[r * n..(r + 1) * n];
                    if norm >= *floor {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            dr[i] += (gr[i] - yr[i] * dot) / norm;
                        }
                    } else {
                        for i in 0..n {
                            dr[i] += gr[i] / floor;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, probs, targets, row_weights } => {
                let c = *self.shape(*logits).last().unwrap();
                let gx = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    let w = row_weights[r];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        let onehot = if j as i64 == t { 1.0 } else { 0.0 };
                        gx[r * c + j] += g[0] * w * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_backward(
        &self,
        kind: BinKind,
        a: Var,
        b: Var,
        a_strides: &[usize],
        b_strides: &[usize],
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let same = self.shape(a) == self.shape(b);
        let da = |o: usize, _ia: usize, ib: usize| match kind {
            BinKind::Add | BinKind::Sub => g[o],
            BinKind::Mul => g[o] * bv[ib],
            BinKind::Div => g[o] / bv[ib],
        };
        let db = |o: usize, ia: usize, ib: usize| match kind {
            BinKind::Add => g[o],
            BinKind::Sub => -g[o],
            BinKind::Mul => g[o] * av[ia],
            BinKind::Div => -g[o] * av[ia] / (bv[ib] * bv[ib]),
        };
        if self.nodes[a.0].requires_grad {
            let ga = slot(grads, a, av.len());
            if same {
                (0..g.len()).for_each(|i| ga[i] += da(i, i, i));
            } else {
                kernels::for_each_broadcast(out_shape, a_strides, b_strides, |o, ia, ib| {
                    ga[ia] += da(o, ia, ib);
                });
            }
        }
        if self.nodes[b.0].requires_grad {
            let gb = slot(grads, b, bv.len());
            if same {
                (0..g.len()).for_each(|i| gb[i] += db(i, i, i));
            } else {
                kernels::for_each_broadcast(out_shape, a_strides, b_strides, |o, ia, ib| {
                    gb[ib] += db(o, ia, ib);
                });
            }
        }
    }
}

fn last_dim(shape: &[usize], op: &'static str) -> Result<usize> {
    shape.last().copied().ok_or_else(|| Error::shape(op, shape, &[]))
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
