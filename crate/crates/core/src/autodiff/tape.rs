//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Only nodes that
//! transitively depend on a trainable leaf receive gradients.

use super::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    BroadcastRows(Var),
    Im2Col { x: Var, kernel: usize },
    SquaredError(Var, Var),
    BceLogits(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_bt inner dimension mismatch");
        let mut out = Tensor::zeros(av.rows, bv.rows);
        T::gemm(av.rows, av.cols, bv.rows, T::one(), &av.data, false, &bv.data, true, T::zero(), &mut out.data);
        self.push(out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!((1, xv.cols), rv.shape(), "add_row shape mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row), &[x, row])
    }

    /// Multiplies every row of `x` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!((1, xv.cols), rv.shape(), "mul_row shape mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(x, row), &[x, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies `x` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by expects a scalar node");
        let k = self.value(s).data[0];
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::ScaleBy(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is excluded.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let width = if causal { (r + 1).min(xv.cols) } else { xv.cols };
            let row = &xv.row(r)[..width];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let o = out.row_mut(r);
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                o[j] = e;
                total += e;
            }
            for v in &mut o[..width] {
                *v = *v / total;
            }
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, xv.cols), "layer_norm gain shape");
        assert_eq!(b.shape(), (1, xv.cols), "layer_norm bias shape");
        let n = T::of(xv.cols as f64);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd.push(rs);
            for c in 0..xv.cols {
                let h = (row[c] - mean) * rs;
                xhat[r * xv.cols + c] = h;
                out.set(r, c, h * g.data[c] + b.data[c]);
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows, "gather index {id} out of range {}", tv.rows);
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start < end && end <= xv.cols, "slice_cols range");
        let mut out = Tensor::zeros(xv.rows, end - start);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols(x, start), &[x])
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, 1, "broadcast_rows expects a single row");
        let mut out = Tensor::zeros(rows, xv.cols);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&xv.data);
        }
        self.push(out, Op::BroadcastRows(x), &[x])
    }

    /// Unfolds a `T x C` sequence into `T x (kernel*C)` windows with zero
    /// padding, so a 1-D same-length convolution becomes a matmul.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let xv = self.value(x);
        let (t, c) = xv.shape();
        let pad = kernel / 2;
        let mut out = Tensor::zeros(t, kernel * c);
        for i in 0..t {
            for k in 0..kernel {
                let src = i + k;
                if src < pad || src - pad >= t {
                    continue;
                }
                out.row_mut(i)[k * c..(k + 1) * c].copy_from_slice(xv.row(src - pad));
            }
        }
        self.push(out, Op::Im2Col { x, kernel }, &[x])
    }

    /// `Σ (pred - target)²` as a `1 x 1` node.
    pub fn squared_error(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.shape(), t.shape(), "squared_error shape mismatch");
        let s: T = p.data.iter().zip(&t.data).map(|(&a, &b)| (a - b) * (a - b)).sum();
        self.push(Tensor::scalar(s), Op::SquaredError(pred, target), &[pred, target])
    }

    /// Summed binary cross-entropy of `logits` against 0/1 `target`.
    pub fn bce_logits(&mut self, logits: Var, target: Var) -> Var {
        let (z, y) = (self.value(logits), self.value(target));
        assert_eq!(z.shape(), y.shape(), "bce shape mismatch");
        let s: T = z
            .data
            .iter()
            .zip(&y.data)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        self.push(Tensor::scalar(s), Op::BceLogits(logits, target), &[logits, target])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let ga = slot(grads, *a, av.rows, av.cols);
                    T::gemm(av.rows, g.cols, av.cols, T::one(), &g.data, false, &bv.data, true, T::one(), &mut ga.data);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let gb = slot(grads, *b, bv.rows, bv.cols);
                    T::gemm(bv.rows, av.rows, bv.cols, T::one(), &av.data, true, &g.data, false, T::one(), &mut gb.data);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    // out = A·Bᵀ, dA = G · B
                    let ga = slot(grads, *a, av.rows, av.cols);
                    T::gemm(av.rows, g.cols, av.cols, T::one(), &g.data, false, &bv.data, false, T::one(), &mut ga.data);
                }
                if self.wants(*b) {
                    // dB = Gᵀ · A
                    let gb = slot(grads, *b, bv.rows, bv.cols);
                    T::gemm(bv.rows, g.rows, bv.cols, T::one(), &g.data, true, &av.data, false, T::one(), &mut gb.data);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        slot(grads, v, g.rows, g.cols).add_assign(g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    slot(grads, *x, g.rows, g.cols).add_assign(g);
                }
                if self.wants(*row) {
                    let gr = slot(grads, *row, 1, g.cols);
                    for r in 0..g.rows {
                        for (o, &v) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (val(*x), val(*row));
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.rows, g.cols);
                    for r in 0..g.rows {
                        for ((o, &gv), &m) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(&rv.data) {
                            *o += gv * m;
                        }
                    }
                }
                if self.wants(*row) {
                    let gr = slot(grads, *row, 1, g.cols);
                    for r in 0..g.rows {
                        for ((o, &gv), &xv) in gr.data.iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *o += gv * xv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    let ga = slot(grads, *a, g.rows, g.cols);
                    for ((o, &gv), &y) in ga.data.iter_mut().zip(&g.data).zip(&bv.data) {
                        *o += gv * y;
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, g.rows, g.cols);
                    for ((o, &gv), &y) in gb.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *o += gv * y;
                    }
                }
            }
            Op::ScaleBy(x, s) => {
                let k = val(*s).data[0];
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.rows, g.cols);
                    for (o, &gv) in gx.data.iter_mut().zip(&g.data) {
                        *o += gv * k;
                    }
                }
                if self.wants(*s) {
                    let d: T = g.data.iter().zip(&val(*x).data).map(|(&a, &b)| a * b).sum();
                    slot(grads, *s, 1, 1).data[0] += d;
                }
            }
            Op::Scale(x, k) => {
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.rows, g.cols);
                    for (o, &gv) in gx.data.iter_mut().zip(&g.data) {
                        *o += gv * *k;
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = val(*x);
                    let gx = slot(grads, *x, g.rows, g.cols);
                    for ((o, &gv), &v) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                        if v > T::zero() {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let gx = slot(grads, *x, g.rows, g.cols);
                    for ((o, &gv), &yv) in gx.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *o += gv * (T::one() - yv * yv);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let gx = slot(grads, *x, g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = g.cols;
                let gam = val(*gamma);
                if self.wants(*gamma) {
                    let gg = slot(grads, *gamma, 1, cols);
                    for r in 0..g.rows {
                        for c in 0..cols {
                            gg.data[c] += g.at(r, c) * xhat[r * cols + c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = slot(grads, *beta, 1, cols);
                    for r in 0..g.rows {
                        for (o, &v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                if self.wants(*x) {
                    let n = T::of(cols as f64);
                    let gx = slot(grads, *x, g.rows, cols);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..g.rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = g.at(r, c) * gam.data[c];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let tv = val(*table);
                    let gt = slot(grads, *table, tv.rows, tv.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = val(p).cols;
                    if self.wants(p) {
                        let gp = slot(grads, p, g.rows, cols);
                        for r in 0..g.rows {
                            for (o, &v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + cols]) {
                                *o += v;
                            }
                        }
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(x, start) => {
                if self.wants(*x) {
                    let xv = val(*x);
                    let gx = slot(grads, *x, xv.rows, xv.cols);
                    for r in 0..g.rows {
                        for (o, &v) in gx.row_mut(r)[*start..*start + g.cols].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::BroadcastRows(x) => {
                if self.wants(*x) {
                    let gx = slot(grads, *x, 1, g.cols);
                    for r in 0..g.rows {
                        for (o, &v) in gx.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Im2Col { x, kernel } => {
                if self.wants(*x) {
                    let (t, c) = val(*x).shape();
                    let pad = kernel / 2;
                    let gx = slot(grads, *x, t, c);
                    for i in 0..t {
                        for k in 0..*kernel {
                            let src = i + k;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let from = &g.row(i)[k * c..(k + 1) * c];
                            for (o, &v) in gx.row_mut(src - pad).iter_mut().zip(from) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::SquaredError(p, t) => {
                let s = g.data[0];
                let (pv, tv) = (val(*p), val(*t));
                let two = T::of(2.0);
                if self.wants(*p) {
                    let gp = slot(grads, *p, pv.rows, pv.cols);
                    for ((o, &a), &b) in gp.data.iter_mut().zip(&pv.data).zip(&tv.data) {
                        *o += s * two * (a - b);
                    }
                }
                if self.wants(*t) {
                    let gt = slot(grads, *t, tv.rows, tv.cols);
                    for ((o, &a), &b) in gt.data.iter_mut().zip(&pv.data).zip(&tv.data) {
                        *o -= s * two * (a - b);
                    }
                }
            }
            Op::BceLogits(z, y) => {
                let s = g.data[0];
                let (zv, yv) = (val(*z), val(*y));
                if self.wants(*z) {
                    let gz = slot(grads, *z, zv.rows, zv.cols);
                    for ((o, &z), &y) in gz.data.iter_mut().zip(&zv.data).zip(&yv.data) {
                        *o += s * (sigmoid(z) - y);
                    }
                }
                if self.wants(*y) {
                    let gy = slot(grads, *y, yv.rows, yv.cols);
                    for (o, &z) in gy.data.iter_mut().zip(&zv.data) {
                        *o -= s * z;
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let s = g.data[0];
                    let gx = slot(grads, *x, val(*x).rows, val(*x).cols);
                    for o in gx.data.iter_mut() {
                        *o += s;
                    }
                }
            }
        }
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn slot<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, rows: usize, cols: usize) -> &mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Checks every entry of every input against central differences.
    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let eval = |xs: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
            let out = f(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = eval(&inputs);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (i, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.rows, x.cols));
            for j in 0..x.len() {
                let mut plus = inputs.clone();
                plus[i].data[j] += h;
                let mut minus = inputs.clone();
                minus[i].data[j] -= h;
                let (tp, _, op) = eval(&plus);
                let (tm, _, om) = eval(&minus);
                let numeric = (tp.value(op).data[0] - tm.value(om).data[0]) / (2.0 * h);
                let a = analytic.data[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} entry {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn matmul_variants_and_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let c = rand_tensor(&mut rng, 5, 4);
        let row = rand_tensor(&mut rng, 1, 2);
        check(vec![a, b, c, row], |t, v| {
            let ab = t.matmul(v[0], v[1]);
            let ab = t.add_row(ab, v[3]);
            let ab = t.tanh(ab);
            let ac = t.matmul_bt(v[0], v[2]);
            let sq = t.mul(ac, ac);
            let s1 = t.sum(sq);
            let m = t.mul_row(ab, v[3]);
            let s2 = t.sum(m);
            t.add(s1, s2)
        });
    }

    #[test]
    fn softmax_layernorm_and_reshapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 4, 4);
        let g = rand_tensor(&mut rng, 1, 4);
        let b = rand_tensor(&mut rng, 1, 4);
        let w = rand_tensor(&mut rng, 4, 4);
        check(vec![x, g, b, w], |t, v| {
            let ln = t.layer_norm(v[0], v[1], v[2], 1e-5);
            let sm = t.softmax(ln, true);
            let full = t.softmax(v[0], false);
            let cat = t.concat_cols(&[sm, full]);
            let sl = t.slice_cols(cat, 2, 6);
            let p = t.mul(sl, v[3]);
            t.sum(p)
        });
    }

    #[test]
    fn gather_broadcast_im2col_and_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = rand_tensor(&mut rng, 6, 3);
        let row = rand_tensor(&mut rng, 1, 3);
        let kernel = rand_tensor(&mut rng, 9, 3);
        let scalar = rand_tensor(&mut rng, 1, 1);
        let target = rand_tensor(&mut rng, 5, 3);
        let stop = Tensor::from_fn(5, 3, |r, c| ((r + c) % 2) as f64);
        check(vec![table, row, kernel, scalar], move |t, v| {
            let x = t.gather(v[0], &[0, 2, 2, 5, 1]);
            let br = t.broadcast_rows(v[1], 5);
            let x = t.add(x, br);
            let cols = t.im2col(x, 3);
            let y = t.matmul(cols, v[2]);
            let y = t.scale_by(y, v[3]);
            let y = t.scale(y, 0.7);
            let r = t.relu(y);
            let tg = t.constant(target.clone());
            let se = t.squared_error(r, tg);
            let st = t.constant(stop.clone());
            let bce = t.bce_logits(y, st);
            t.add(se, bce)
        });
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::scalar(2.0));
        let unused = t.param(Tensor::scalar(5.0));
        let s = t.mul(a, a);
        let g = t.backward(s);
        assert_eq!(g.get(a).unwrap().data[0], 4.0);
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn(3, 3, |r, c| (r + c) as f64));
        let y = t.softmax(x, true);
        let v = t.value(y);
        assert_eq!(v.at(0, 0), 1.0);
        assert_eq!(v.at(0, 1), 0.0);
        assert_eq!(v.at(1, 2), 0.0);
        assert!((v.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
