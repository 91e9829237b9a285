use super::kernels::{dot, log_sum_exp, matmul_nn, matmul_nt, matmul_tn};
use super::{Tensor, TensorError};

/// Normalization floor: rows with a smaller norm are divided by this value.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    L2Normalize { x: Var, denom: Vec<f64> },
    RowDot(Var, Var),
    ConcatCols(Vec<Var>),
    Scale(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    SumSquaresRows(Var),
    CrossEntropyRows { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode recording of a single forward pass.
///
/// Nodes are appended in evaluation order, so the record list is always
/// topologically sorted. A tape supports one `backward`; call
/// [`Tape::zero_grad`] before running another.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records an input value. Gradients accumulate only on `requires_grad` leaves.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Clears every accumulated gradient so another backward pass may run.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), TensorError> {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, rg, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout of both linear layers and similarity matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, rg, Op::MatMulNt(a, b)))
    }

    /// Adds a length-`n` bias to every row of `x[m×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x)?;
        let b = self.value(bias);
        if b.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                left: vec![m, n],
                right: b.shape().to_vec(),
            });
        }
        let b = b.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::matrix(m, n, out)?, rg, Op::AddRow(x, bias)))
    }

    /// `x · wᵀ + b` for `w[out×in]`, `b[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let y = self.matmul_nt(x, weight)?;
        self.add_row(y, bias)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let out: Vec<f64> = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    /// Divides each row by `max(‖row‖, NORM_EPS)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * n);
        let mut denom = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let d = dot(row, row).sqrt().max(NORM_EPS);
            out.extend(row.iter().map(|v| v / d));
            denom.push(d);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, n, out)?, rg, Op::L2Normalize { x, denom }))
    }

    /// Per-row inner products of two `m×d` matrices, as an `m×1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b)?;
        let (m, n) = self.dims2(a)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = (0..m)
            .map(|i| dot(&da[i * n..(i + 1) * n], &db[i * n..(i + 1) * n]))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, 1, out)?, rg, Op::RowDot(a, b)))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Empty);
        };
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(TensorError::ShapeMismatch {
                    left: vec![m],
                    right: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(m, total, out)?,
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let out = src.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Scale(x, c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    /// `Σ_c x[i,c]²` for every row, as an `m×1` column.
    pub fn sum_squares_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x)?;
        let d = self.value(x).data();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let r = &d[i * n..(i + 1) * n];
                dot(r, r)
            })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, 1, out)?, rg, Op::SumSquaresRows(x)))
    }

    /// Softmax cross-entropy of each row against its target column, as `m×1`.
    ///
    /// Uses the max-shifted log-sum-exp, so large logits never overflow.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(logits)?;
        if targets.len() != m {
            return Err(TensorError::ShapeMismatch {
                left: vec![m, n],
                right: vec![targets.len()],
            });
        }
        let d = self.value(logits).data();
        let mut out = Vec::with_capacity(m);
        let mut probs = Vec::with_capacity(m * n);
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(TensorError::RowIndex { index: t, rows: n });
            }
            let row = &d[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            out.push(lse - row[t]);
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::matrix(m, 1, out)?,
            rg,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Sum of all entries, left to right.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Mean of all entries (sum, then divide by the count).
    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::Empty);
        }
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s / n as f64), rg, Op::Mean(x)))
    }

    /// Propagates `d loss / d node` to every node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let value = &self.nodes[loss.0].value;
        if !value.is_scalar() {
            return Err(TensorError::NotScalar(value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a).unwrap();
                let (_, n) = self.dims2(b).unwrap();
                if self.requires_grad(a) {
                    let da = matmul_nt(g, self.value(b).data(), m, n, k);
                    self.accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let db = matmul_tn(self.value(a).data(), g, m, k, n);
                    self.accumulate(b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims2(a).unwrap();
                let (n, _) = self.dims2(b).unwrap();
                if self.requires_grad(a) {
                    let da = matmul_nn(g, self.value(b).data(), m, n, k);
                    self.accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let db = matmul_tn(g, self.value(a).data(), m, n, k);
                    self.accumulate(b, db);
                }
            }
            Op::AddRow(x, bias) => {
                let (_, n) = self.dims2(x).unwrap();
                self.accumulate(x, g.to_vec());
                if self.requires_grad(bias) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n.max(1)) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(bias, db);
                }
            }
            Op::Relu(x) => {
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::L2Normalize { x, denom } => {
                let (m, n) = self.dims2(x).unwrap();
                let ys = self.nodes[i].value.data();
                let mut dx = Vec::with_capacity(m * n);
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let d = denom[r];
                    if d > NORM_EPS {
                        let yr = &ys[r * n..(r + 1) * n];
                        let gy = dot(gr, yr);
                        dx.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - yi * gy) / d));
                    } else {
                        // Below the floor the denominator is a constant.
                        dx.extend(gr.iter().map(|gi| gi / d));
                    }
                }
                self.accumulate(x, dx);
            }
            Op::RowDot(a, b) => {
                let (m, n) = self.dims2(a).unwrap();
                for (src, dst) in [(b, a), (a, b)] {
                    if self.requires_grad(dst) {
                        let s = self.value(src).data();
                        let mut d = Vec::with_capacity(m * n);
                        for r in 0..m {
                            d.extend(s[r * n..(r + 1) * n].iter().map(|v| v * g[r]));
                        }
                        self.accumulate(dst, d);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.nodes[i].value.shape()[0];
                let total = self.nodes[i].value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).shape()[1];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(p, d);
                    }
                    offset += w;
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(x, g.iter().map(|v| v * c).collect());
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.iter().map(|v| -v).collect());
            }
            Op::SumSquaresRows(x) => {
                let (_, n) = self.dims2(x).unwrap();
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, v)| 2.0 * v * g[idx / n])
                    .collect();
                self.accumulate(x, dx);
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let (_, n) = self.dims2(logits).unwrap();
                let mut d = probs;
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut d[r * n..(r + 1) * n];
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g[r]);
                }
                self.accumulate(logits, d);
            }
            Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![g[0] / n as f64; n]);
            }
        }
    }
}
