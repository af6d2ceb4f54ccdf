//! Dynamic reverse-mode recording.
//!
//! A [`Tape`] is rebuilt on every forward pass. Each primitive evaluates
//! eagerly and appends a node holding its result plus whatever the backward
//! rule needs. Nodes are appended in evaluation order, so the node list is
//! already topologically sorted and `backward` is a single reverse sweep.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{matmul_raw, transpose_raw};
use super::{NumericsError, Tensor, LAYERNORM_EPS};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    LogSigmoid(Var),
    Square(Var),
    Scale(Var, f64),
    SoftmaxLastDim(Var),
    LayerNormLastDim { input: Var, inv_std: Vec<f64> },
    MaskedMean { input: Var, mask: Vec<f64>, count: f64 },
    Transpose(Var),
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
    WeightedSum { input: Var, weights: Vec<f64> },
}

struct Node {
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

/// The computation record for one forward pass.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters; only constants can be leaves.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.expect("param leaf without store").value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.store.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(op: &'static str, detail: String) -> NumericsError {
        NumericsError::ShapeMismatch { op, detail }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Self::mismatch("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::mismatch("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a length-`cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.value(a).dims2();
        if self.value(row).len() != cols {
            return Err(Self::mismatch(
                "add_row",
                format!("{cols} columns vs row of {}", self.value(row).len()),
            ));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..rows {
            for (x, b) in data[i * cols..(i + 1) * cols].iter_mut().zip(r) {
                *x += b;
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.value(a).dims2();
        if self.value(row).len() != cols {
            return Err(Self::mismatch(
                "mul_row",
                format!("{cols} columns vs row of {}", self.value(row).len()),
            ));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..rows {
            for (x, g) in data[i * cols..(i + 1) * cols].iter_mut().zip(r) {
                *x *= g;
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `ln σ(x)`, evaluated without forming σ(x) so that saturated logits
    /// stay finite.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        let mut data = t.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::SoftmaxLastDim(a))
    }

    /// Normalizes each row to zero mean and unit (population) variance;
    /// gain and bias are applied separately with [`Tape::mul_row`] and
    /// [`Tape::add_row`].
    pub fn layernorm_lastdim(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::LayerNormLastDim { input: a, inv_std })
    }

    /// Mean over the rows whose mask entry is non-zero; returns `[1, cols]`.
    pub fn masked_mean(&mut self, a: Var, mask: &[f64]) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        if mask.len() != rows {
            return Err(Self::mismatch(
                "masked_mean",
                format!("{rows} rows vs mask of {}", mask.len()),
            ));
        }
        let count: f64 = mask.iter().sum();
        if count <= 0.0 {
            return Err(NumericsError::AllMasked);
        }
        let mut out = vec![0.0; cols];
        for (r, &m) in mask.iter().enumerate() {
            if m != 0.0 {
                for (o, x) in out.iter_mut().zip(t.row_slice(r)) {
                    *o += m * x;
                }
            }
        }
        out.iter_mut().for_each(|x| *x /= count);
        let op = Op::MaskedMean {
            input: a,
            mask: mask.to_vec(),
            count,
        };
        Ok(self.push(Tensor::row(out), op))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (rows, cols) = self.value(a).dims2();
        let data = transpose_raw(self.value(a).data(), rows, cols);
        self.push(Tensor::matrix(cols, rows, data).unwrap(), Op::Transpose(a))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.value(a).dims2();
        if start >= end || end > cols {
            return Err(Self::mismatch("slice_cols", format!("{start}..{end} of {cols}")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        Ok(self.push(Tensor::matrix(rows, end - start, data)?, Op::SliceCols { input: a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).dims2().0)
            .ok_or_else(|| Self::mismatch("concat_cols", "no inputs".into()))?;
        if parts.iter().any(|&p| self.value(p).dims2().0 != rows) {
            return Err(Self::mismatch("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).dims2().1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `Σ wᵢ·aᵢ` against constant weights; returns a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var, NumericsError> {
        if weights.len() != self.value(a).len() {
            return Err(Self::mismatch(
                "weighted_sum",
                format!("{} values vs {} weights", self.value(a).len(), weights.len()),
            ));
        }
        let s = self.value(a).data().iter().zip(weights).map(|(x, w)| x * w).sum();
        let op = Op::WeightedSum {
            input: a,
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(s), op))
    }

    /// Reverse sweep from a scalar `loss`. Returns `∂loss/∂p` for every
    /// parameter in the store; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut out = match self.store {
            Some(store) => Gradients::zeros_like(store),
            None => Gradients::empty(),
        };
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let node = &self.nodes[idx];
        let y = node.value.as_ref();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => out.accumulate(*id, &g),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                let bt = transpose_raw(self.value(*b).data(), k, n);
                let da = matmul_raw(g.data(), &bt, m, n, k);
                let at = transpose_raw(self.value(*a).data(), m, k);
                let db = matmul_raw(&at, g.data(), k, m, n);
                accumulate(grads, *a, self.value(*a).shape(), da);
                accumulate(grads, *b, self.value(*b).shape(), db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, self.value(*b).shape(), g.into_data());
            }
            Op::AddRow(a, row) => {
                let (rows, cols) = g.dims2();
                let mut dr = vec![0.0; cols];
                for r in 0..rows {
                    for (d, x) in dr.iter_mut().zip(g.row_slice(r)) {
                        *d += x;
                    }
                }
                accumulate(grads, *row, self.value(*row).shape(), dr);
                accumulate(grads, *a, self.value(*a).shape(), g.into_data());
            }
            Op::MulRow(a, row) => {
                let (rows, cols) = g.dims2();
                let gain = self.value(*row).data();
                let input = self.value(*a);
                let mut da = g.data().to_vec();
                let mut dr = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        dr[c] += g.data()[i] * input.data()[i];
                        da[i] *= gain[c];
                    }
                }
                accumulate(grads, *row, self.value(*row).shape(), dr);
                accumulate(grads, *a, g.shape(), da);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g.data().iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 });
                accumulate(grads, *a, g.shape(), d.collect());
            }
            Op::Sigmoid(a) => {
                let s = y.unwrap().data();
                let d = g.data().iter().zip(s).map(|(g, s)| g * s * (1.0 - s));
                accumulate(grads, *a, g.shape(), d.collect());
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = g.data().iter().zip(x).map(|(g, x)| g / x);
                accumulate(grads, *a, g.shape(), d.collect());
            }
            Op::LogSigmoid(a) => {
                // d/dx ln σ(x) = σ(−x)
                let x = self.value(*a).data();
                let d = g.data().iter().zip(x).map(|(g, &x)| g * sigmoid(-x));
                accumulate(grads, *a, g.shape(), d.collect());
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let d = g.data().iter().zip(x).map(|(g, x)| 2.0 * g * x);
                accumulate(grads, *a, g.shape(), d.collect());
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|g| c * g).collect();
                accumulate(grads, *a, g.shape(), d);
            }
            Op::SoftmaxLastDim(a) => {
                let y = y.unwrap();
                let (rows, cols) = y.dims2();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *a, g.shape(), d);
            }
            Op::LayerNormLastDim { input, inv_std } => {
                let y = y.unwrap();
                let (rows, cols) = y.dims2();
                let n = cols as f64;
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..cols {
                        d[r * cols + c] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                accumulate(grads, *input, g.shape(), d);
            }
            Op::MaskedMean { input, mask, count } => {
                let shape = self.value(*input).shape();
                let (rows, cols) = self.value(*input).dims2();
                let mut d = vec![0.0; rows * cols];
                for (r, &m) in mask.iter().enumerate() {
                    if m != 0.0 {
                        for c in 0..cols {
                            d[r * cols + c] = m * g.data()[c] / count;
                        }
                    }
                }
                accumulate(grads, *input, shape, d);
            }
            Op::Transpose(a) => {
                let (rows, cols) = g.dims2();
                let d = transpose_raw(g.data(), rows, cols);
                accumulate(grads, *a, self.value(*a).shape(), d);
            }
            Op::SliceCols { input, start } => {
                let (rows, width) = g.dims2();
                let cols = self.value(*input).dims2().1;
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width].copy_from_slice(g.row_slice(r));
                }
                accumulate(grads, *input, self.value(*input).shape(), d);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, self.value(p).shape(), d);
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                let shape = self.value(*a).shape();
                accumulate(grads, *a, shape, vec![gv; self.value(*a).len()]);
            }
            Op::WeightedSum { input, weights } => {
                let gv = g.item();
                let d = weights.iter().map(|w| w * gv).collect();
                accumulate(grads, *input, self.value(*input).shape(), d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(data) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape")),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x) = −softplus(−x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Max-subtracted softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
