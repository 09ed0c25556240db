use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Matmul,
    Add,
    Mul,
    Scale,
    Transpose,
    RowSoftmax,
    RmsNorm,
    Silu,
    EmbedLookup,
    CrossEntropy,
    Sum,
    SplitHeads,
    MergeHeads,
}

/// Public view of one recorded node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    pub kind: OpKind,
    pub inputs: Vec<Var>,
    pub output: Var,
}

enum Op<T> {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var, row_bias: bool },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Transpose { a: Var },
    Softmax { a: Var },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Silu { a: Var },
    Embed { table: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Sum { a: Var },
    SplitHeads { a: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { a: Var, batch: usize, seq: usize, heads: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Softmax { .. } => OpKind::RowSoftmax,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::Silu { .. } => OpKind::Silu,
            Op::Embed { .. } => OpKind::EmbedLookup,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Matmul { a, b } | Op::Add { a, b, .. } | Op::Mul { a, b } => vec![a, b],
            Op::RmsNorm { x, gain, .. } => vec![x, gain],
            Op::Scale { a, .. }
            | Op::Transpose { a }
            | Op::Softmax { a }
            | Op::Silu { a }
            | Op::Sum { a }
            | Op::SplitHeads { a, .. }
            | Op::MergeHeads { a, .. } => vec![a],
            Op::Embed { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only tape. Nodes are stored in creation order, which is a
/// topological order by construction.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}

/// `(batch, rows, cols)` view of a 2-D or 3-D shape.
fn mat_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [r, c] => Ok((1, r, c)),
        [b, r, c] => Ok((b, r, c)),
        _ => Err(shape_err(op, format!("expected a 2-D or 3-D tensor, got {shape:?}"))),
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn split_heads_raw<T: Element>(x: &[T], batch: usize, seq: usize, heads: usize, dh: usize) -> Vec<T> {
    let d = heads * dh;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                let src = (b * seq + t) * d + h * dh;
                let dst = ((b * heads + h) * seq + t) * dh;
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

fn merge_heads_raw<T: Element>(x: &[T], batch: usize, seq: usize, heads: usize, dh: usize) -> Vec<T> {
    let d = heads * dh;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                let dst = (b * seq + t) * d + h * dh;
                let src = ((b * heads + h) * seq + t) * dh;
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

fn transpose_raw<T: Element>(x: &[T], batch: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..batch {
        let base = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = x[base + i * c + j];
            }
        }
    }
    out
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Ordered op records; every node's inputs precede it.
    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| OpRecord { kind: n.op.kind(), inputs: n.op.inputs(), output: Var(i) })
            .collect()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf. `requires_grad = false` marks a frozen parameter or a constant.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (ba, m, k) = mat_dims("matmul", sa)?;
        let (bb, k2, n) = mat_dims("matmul", sb)?;
        if ba != bb || k != k2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); ba * m * n];
        for bi in 0..ba {
            gemm_nn(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push("matmul", Tensor::from_parts(shape, out), Op::Matmul { a, b })
    }

    /// Elementwise sum; `b` may also be a 1-D row bias matching `a`'s last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let row_bias = if ta.shape() == tb.shape() {
            false
        } else if tb.shape().len() == 1 && tb.numel() == ta.cols() {
            true
        } else {
            return Err(shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        };
        let out: Vec<T> = if row_bias {
            let c = ta.cols();
            ta.data().iter().enumerate().map(|(i, &x)| x + tb.data()[i % c]).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect()
        };
        let shape = ta.shape().to_vec();
        self.push("add", Tensor::from_parts(shape, out), Op::Add { a, b, row_bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = ta.zip_with(tb, "mul", |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let value = self.value(a).scale(c);
        self.push("scale", value, Op::Scale { a, c })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (b, r, c) = mat_dims("transpose", ta.shape())?;
        let mut shape = ta.shape().to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let out = transpose_raw(ta.data(), b, r, c);
        self.push("transpose", Tensor::from_parts(shape, out), Op::Transpose { a })
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row softmax over square trailing matrices where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        let shape = ta.shape().to_vec();
        let square = if causal {
            if shape.len() < 2 || shape[shape.len() - 2] != cols {
                return Err(shape_err("causal_softmax", format!("needs square trailing matrices, got {shape:?}")));
            }
            cols
        } else {
            0
        };
        let mut out = vec![T::zero(); ta.numel()];
        for (r, (xr, yr)) in ta.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
            let visible = if causal { r % square + 1 } else { cols };
            let max = xr[..visible].iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..visible {
                let e = (xr[j] - max).exp();
                yr[j] = e;
                z += e;
            }
            for y in &mut yr[..visible] {
                *y = *y / z;
            }
        }
        self.push("row_softmax", Tensor::from_parts(shape, out), Op::Softmax { a })
    }

    /// RMS normalisation of each row followed by an elementwise gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        if tg.shape() != [d] {
            return Err(shape_err("rms_norm", format!("gain {:?} for rows of width {d}", tg.shape())));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let mut inv_rms = Vec::with_capacity(tx.rows());
        let mut out = vec![T::zero(); tx.numel()];
        for (xr, yr) in tx.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let ms = dot(xr, xr) / dn;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((y, &xv), &g) in yr.iter_mut().zip(xr).zip(tg.data()) {
                *y = xv * inv * g;
            }
        }
        let shape = tx.shape().to_vec();
        self.push("rms_norm", Tensor::from_parts(shape, out), Op::RmsNorm { x, gain, inv_rms })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| x * sigmoid(x)).collect();
        let shape = ta.shape().to_vec();
        self.push("silu", Tensor::from_parts(shape, out), Op::Silu { a })
    }

    /// Gathers rows of a `[rows, d]` table.
    pub fn embed_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let [rows, d] = *tt.shape() else {
            return Err(shape_err("embed_lookup", format!("table must be 2-D, got {:?}", tt.shape())));
        };
        if indices.is_empty() {
            return Err(shape_err("embed_lookup", "no indices"));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(shape_err("embed_lookup", format!("index {i} out of {rows} rows")));
            }
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_parts(vec![indices.len(), d], out);
        self.push("embed_lookup", value, Op::Embed { table, indices: indices.to_vec() })
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let [n, v] = *tl.shape() else {
            return Err(shape_err("cross_entropy", format!("logits must be 2-D, got {:?}", tl.shape())));
        };
        if targets.len() != n {
            return Err(shape_err("cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::AllPadded);
        }
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for (r, (xr, target)) in tl.data().chunks_exact(v).zip(targets).enumerate() {
            let Some(t) = *target else { continue };
            if t >= v {
                return Err(shape_err("cross_entropy", format!("target {t} out of vocabulary {v}")));
            }
            let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let pr = &mut probs[r * v..(r + 1) * v];
            let mut z = T::zero();
            for (p, &x) in pr.iter_mut().zip(xr) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in pr.iter_mut() {
                *p = *p / z;
            }
            total += z.ln() + max - xr[t];
        }
        let loss = total / T::from_f64(count as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a })
    }

    /// `[batch·seq, heads·dh]` → `[batch·heads, seq, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let ta = self.value(a);
        let d = ta.cols();
        if ta.shape().len() != 2 || ta.rows() != batch * seq || heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "split_heads",
                format!("{:?} into batch={batch} seq={seq} heads={heads}", ta.shape()),
            ));
        }
        let dh = d / heads;
        let out = split_heads_raw(ta.data(), batch, seq, heads, dh);
        self.push(
            "split_heads",
            Tensor::from_parts(vec![batch * heads, seq, dh], out),
            Op::SplitHeads { a, batch, seq, heads },
        )
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let ta = self.value(a);
        let &[bh, s, dh] = ta.shape() else {
            return Err(shape_err("merge_heads", format!("expected 3-D input, got {:?}", ta.shape())));
        };
        if bh != batch * heads || s != seq {
            return Err(shape_err(
                "merge_heads",
                format!("{:?} from batch={batch} seq={seq} heads={heads}", ta.shape()),
            ));
        }
        let out = merge_heads_raw(ta.data(), batch, seq, heads, dh);
        self.push(
            "merge_heads",
            Tensor::from_parts(vec![batch * seq, heads * dh], out),
            Op::MergeHeads { a, batch, seq, heads },
        )
    }

    /// Gradients of `loss` with respect to each of `wrt`, in order.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        for &v in wrt {
            let node = self.nodes.get(v.0).ok_or(Error::UntracedParameter(v.0))?;
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                return Err(Error::UntracedParameter(v.0));
            }
        }
        let mut grads = self.backward(loss)?;
        Ok(wrt.iter().map(|&v| grads.take(v).expect("leaf requiring grad")).collect())
    }

    /// Reverse sweep from a scalar `loss`, producing gradients for every leaf
    /// that requires them. Inputs that do not require gradients are skipped,
    /// so frozen weights cost no weight-gradient work.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self
            .nodes
            .get(loss.0)
            .ok_or(Error::UntracedParameter(loss.0))?
            .value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let g = if matches!(node.op, Op::Leaf) && node.needs_grad && i <= loss.0 {
                let data = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                Some(Tensor::from_parts(node.value.shape().to_vec(), data))
            } else {
                None
            };
            out.push(g);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot => *slot = Some(contrib),
        }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (bc, m, k) = mat_dims("matmul", ta.shape()).expect("checked in forward");
                let n = tb.cols();
                if needs(a) {
                    let mut da = vec![T::zero(); ta.numel()];
                    for bi in 0..bc {
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, a, da);
                }
                if needs(b) {
                    let mut db = vec![T::zero(); tb.numel()];
                    for bi in 0..bc {
                        gemm_tn(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add { a, b, row_bias } => {
                if needs(a) {
                    self.accumulate(grads, a, g.to_vec());
                }
                if needs(b) {
                    let db = if row_bias {
                        let c = self.value(b).numel();
                        let mut db = vec![T::zero(); c];
                        for row in g.chunks_exact(c) {
                            axpy(T::one(), row, &mut db);
                        }
                        db
                    } else {
                        g.to_vec()
                    };
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    let db = self.value(b).data();
                    self.accumulate(grads, a, g.iter().zip(db).map(|(&x, &y)| x * y).collect());
                }
                if needs(b) {
                    let da = self.value(a).data();
                    self.accumulate(grads, b, g.iter().zip(da).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::Scale { a, c } => {
                if needs(a) {
                    self.accumulate(grads, a, g.iter().map(|&x| x * c).collect());
                }
            }
            &Op::Transpose { a } => {
                if needs(a) {
                    let (bc, r, c) = mat_dims("transpose", self.value(a).shape()).expect("checked in forward");
                    self.accumulate(grads, a, transpose_raw(g, bc, c, r));
                }
            }
            &Op::Softmax { a } => {
                if needs(a) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let mut da = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks_exact(cols).zip(g.chunks_exact(cols)).zip(da.chunks_exact_mut(cols)) {
                        let s = dot(gr, yr);
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - s);
                        }
                    }
                    self.accumulate(grads, a, da);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let d = tx.cols();
                let dn = T::from_f64(d as f64);
                let mut dgain = vec![T::zero(); d];
                let mut dx = if needs(*x) { vec![T::zero(); tx.numel()] } else { Vec::new() };
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, (xr, gr)) in tx.data().chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                    let inv = inv_rms[r];
                    for j in 0..d {
                        xhat[j] = xr[j] * inv;
                        dxhat[j] = gr[j] * tg.data()[j];
                        dgain[j] += gr[j] * xhat[j];
                    }
                    if !dx.is_empty() {
                        let proj = dot(&dxhat, &xhat) / dn;
                        for j in 0..d {
                            dx[r * d + j] = inv * (dxhat[j] - xhat[j] * proj);
                        }
                    }
                }
                if needs(*x) {
                    self.accumulate(grads, *x, dx);
                }
                if needs(*gain) {
                    self.accumulate(grads, *gain, dgain);
                }
            }
            &Op::Silu { a } => {
                if needs(a) {
                    let xs = self.value(a).data();
                    let da = xs
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| {
                            let s = sigmoid(x);
                            gv * s * (T::one() + x * (T::one() - s))
                        })
                        .collect();
                    self.accumulate(grads, a, da);
                }
            }
            Op::Embed { table, indices } => {
                if needs(*table) {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let mut dt = vec![T::zero(); tt.numel()];
                    for (row, &idx) in g.chunks_exact(d).zip(indices) {
                        axpy(T::one(), row, &mut dt[idx * d..(idx + 1) * d]);
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if needs(*logits) {
                    let v = self.value(*logits).cols();
                    let scale = g[0] / T::from_f64(*count as f64);
                    let mut dl = vec![T::zero(); probs.len()];
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for j in 0..v {
                            dl[r * v + j] = probs[r * v + j] * scale;
                        }
                        dl[r * v + t] -= scale;
                    }
                    self.accumulate(grads, *logits, dl);
                }
            }
            &Op::Sum { a } => {
                if needs(a) {
                    self.accumulate(grads, a, vec![g[0]; self.value(a).numel()]);
                }
            }
            &Op::SplitHeads { a, batch, seq, heads } => {
                if needs(a) {
                    let dh = node.value.cols();
                    self.accumulate(grads, a, merge_heads_raw(g, batch, seq, heads, dh));
                }
            }
            &Op::MergeHeads { a, batch, seq, heads } => {
                if needs(a) {
                    let dh = self.value(a).cols();
                    self.accumulate(grads, a, split_heads_raw(g, batch, seq, heads, dh));
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
