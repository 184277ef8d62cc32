//! Dense f64 tensors with tape-based reverse-mode autodiff.
//!
//! A [`Tape`] records every forward operation touching a value that
//! requires gradients. [`Tape::backward`] replays the tape in reverse,
//! accumulating exact derivatives into each node; leaf gradients are
//! then copied back onto parameter tensors. All storage is flat
//! row-major `Vec<f64>`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CglError, Result};

/// Dense n-dimensional value. `grad` is populated by training code
/// after a backward pass, keyed off `requires_grad`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CglError::InvalidData {
                detail: alloc::format!(
                    "tensor data length {} does not match shape {:?}",
                    data.len(),
                    shape
                ),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::from_vec(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zero (allocating if needed) the gradient buffer.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Accumulate `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Reduction flavors shared by `reduce`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Max,
    Mean,
}

enum Rule {
    Leaf,
    Matmul { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    Add { a: VarId, b: VarId },
    /// `[rows, cols] + [cols]` broadcast along rows.
    AddRow { a: VarId, bias: VarId },
    Mul { a: VarId, b: VarId },
    Scale { a: VarId, c: f64 },
    Relu { a: VarId },
    /// Concatenate along axis 0 (rows for matrices, entries for vectors).
    Concat { parts: Vec<VarId> },
    /// Stack equally-shaped tensors as rows of a new matrix.
    StackRows { parts: Vec<VarId>, len: usize },
    SliceRows { a: VarId, start: usize, rows: usize, cols: usize },
    Reduce { a: VarId, axis: usize, rows: usize, cols: usize, kind: Reduction, arg: Vec<usize> },
    SumAll { a: VarId },
    MeanAll { a: VarId },
    /// Row-wise log-softmax restricted to masked-active columns.
    /// Inactive output entries are zero and carry no gradient.
    LogSoftmax { a: VarId, mask: Vec<bool> },
    /// Fused mean negative log-likelihood over active classes.
    CrossEntropy { logits: VarId, labels: Vec<usize>, mask: Vec<bool> },
    /// Depthwise 1-D convolution along axis 0 (same padding). The input
    /// is `[t, groups*channels]`, the kernel `[channels, ksize]`; column
    /// `j` uses kernel row `j % channels`.
    ConvTime { a: VarId, kernel: VarId, t: usize, channels: usize, ksize: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
    rule: Rule,
}

/// Append-only record of forward operations; topological by construction.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, rule: Rule) -> VarId {
        self.nodes.push(Node { shape, data, grad: Vec::new(), needs_grad, rule });
        VarId(self.nodes.len() - 1)
    }

    fn node(&self, id: VarId) -> &Node {
        &self.nodes[id.0]
    }

    /// Record a tensor as a leaf; gradient flows back iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Rule::Leaf)
    }

    /// Record a constant leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> VarId {
        self.push(shape, data, false, Rule::Leaf)
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: VarId) -> &[f64] {
        &self.node(id).data
    }

    /// Gradient of the last `backward` pass with respect to `id`.
    pub fn grad(&self, id: VarId) -> &[f64] {
        &self.node(id).grad
    }

    /// Reinterpret the flat row-major data under a new shape.
    pub fn set_shape(&mut self, id: VarId, shape: Vec<usize>) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != self.node(id).data.len() {
            return Err(CglError::ShapeMismatch {
                op: "set_shape",
                lhs: self.node(id).shape.clone(),
                rhs: shape,
            });
        }
        self.nodes[id.0].shape = shape;
        Ok(())
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CglError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = &self.node(a).data;
            let db = &self.node(b).data;
            matmul_into(da, db, &mut out, m, k, n);
        }
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![m, n], out, needs, Rule::Matmul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa != sb {
            return Err(CglError::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(sa, data, needs, Rule::Add { a, b }))
    }

    /// `[rows, cols] + [cols]`, bias broadcast over rows.
    pub fn add_row(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let sa = self.node(a).shape.clone();
        let sb = self.node(bias).shape.clone();
        let (rows, cols) = rows_cols(&sa);
        if sb.len() != 1 || sb[0] != cols {
            return Err(CglError::ShapeMismatch { op: "add_row", lhs: sa, rhs: sb });
        }
        let mut data = self.node(a).data.clone();
        let bv = &self.node(bias).data;
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bv[c];
            }
        }
        let needs = self.node(a).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(sa, data, needs, Rule::AddRow { a, bias }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa != sb {
            return Err(CglError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(sa, data, needs, Rule::Mul { a, b }))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x * c).collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs_grad;
        self.push(shape, data, needs, Rule::Scale { a, c })
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs_grad;
        self.push(shape, data, needs, Rule::Relu { a })
    }

    /// Concatenate along axis 0. Vectors concatenate end to end;
    /// matrices stack rows and must agree on column count.
    pub fn concat(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(CglError::EmptyReduction { op: "concat" });
        }
        let first = self.node(parts[0]).shape.clone();
        let (_, cols0) = rows_cols(&first);
        let mut total_rows = 0usize;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.node(p).shape.clone();
            let (r, c) = rows_cols(&s);
            if c != cols0 {
                return Err(CglError::ShapeMismatch { op: "concat", lhs: first, rhs: s });
            }
            total_rows += r;
            data.extend_from_slice(&self.node(p).data);
        }
        let needs = parts.iter().any(|&p| self.node(p).needs_grad);
        let shape = if first.len() == 1 {
            vec![total_rows * cols0]
        } else {
            vec![total_rows, cols0]
        };
        Ok(self.push(shape, data, needs, Rule::Concat { parts: parts.to_vec() }))
    }

    /// Stack equally-shaped tensors (flattened) as the rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(CglError::EmptyReduction { op: "stack_rows" });
        }
        let len = self.node(parts[0]).data.len();
        let mut data = Vec::with_capacity(parts.len() * len);
        for &p in parts {
            if self.node(p).data.len() != len {
                return Err(CglError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: self.node(parts[0]).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            data.extend_from_slice(&self.node(p).data);
        }
        let needs = parts.iter().any(|&p| self.node(p).needs_grad);
        Ok(self.push(
            vec![parts.len(), len],
            data,
            needs,
            Rule::StackRows { parts: parts.to_vec(), len },
        ))
    }

    /// View rows `start..start+rows` of a matrix.
    pub fn slice_rows(&mut self, a: VarId, start: usize, rows: usize) -> Result<VarId> {
        let sa = self.node(a).shape.clone();
        let (r, c) = rows_cols(&sa);
        if start + rows > r {
            return Err(CglError::InvalidConfig {
                detail: alloc::format!("slice_rows {start}..{} out of {r} rows", start + rows),
            });
        }
        let data = self.node(a).data[start * c..(start + rows) * c].to_vec();
        let needs = self.node(a).needs_grad;
        Ok(self.push(vec![rows, c], data, needs, Rule::SliceRows { a, start, rows, cols: c }))
    }

    /// Reduce a matrix along `axis` (0 = over rows, 1 = over columns).
    /// Max reduction records argmax indices; ties go to the first
    /// maximal index.
    pub fn reduce(&mut self, a: VarId, axis: usize, kind: Reduction) -> Result<VarId> {
        let sa = self.node(a).shape.clone();
        let (rows, cols) = rows_cols(&sa);
        if rows == 0 || cols == 0 {
            return Err(CglError::EmptyReduction { op: "reduce" });
        }
        let da = &self.node(a).data;
        let out_len = if axis == 0 { cols } else { rows };
        let mut out = vec![0.0; out_len];
        let mut arg = Vec::new();
        match kind {
            Reduction::Sum | Reduction::Mean => {
                if axis == 0 {
                    for r in 0..rows {
                        for c in 0..cols {
                            out[c] += da[r * cols + c];
                        }
                    }
                    if kind == Reduction::Mean {
                        out.iter_mut().for_each(|v| *v /= rows as f64);
                    }
                } else {
                    for r in 0..rows {
                        let s: f64 = da[r * cols..(r + 1) * cols].iter().sum();
                        out[r] = if kind == Reduction::Mean { s / cols as f64 } else { s };
                    }
                }
            }
            Reduction::Max => {
                arg = vec![0usize; out_len];
                if axis == 0 {
                    for c in 0..cols {
                        let mut best = da[c];
                        let mut bi = 0usize;
                        for r in 1..rows {
                            let v = da[r * cols + c];
                            if v > best {
                                best = v;
                                bi = r;
                            }
                        }
                        out[c] = best;
                        arg[c] = bi;
                    }
                } else {
                    for r in 0..rows {
                        let row = &da[r * cols..(r + 1) * cols];
                        let mut best = row[0];
                        let mut bi = 0usize;
                        for (c, &v) in row.iter().enumerate().skip(1) {
                            if v > best {
                                best = v;
                                bi = c;
                            }
                        }
                        out[r] = best;
                        arg[r] = bi;
                    }
                }
            }
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            vec![out_len],
            out,
            needs,
            Rule::Reduce { a, axis, rows, cols, kind, arg },
        ))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s: f64 = self.node(a).data.iter().sum();
        let needs = self.node(a).needs_grad;
        self.push(vec![1], vec![s], needs, Rule::SumAll { a })
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        let n = self.node(a).data.len();
        if n == 0 {
            return Err(CglError::EmptyReduction { op: "mean_all" });
        }
        let s: f64 = self.node(a).data.iter().sum::<f64>() / n as f64;
        let needs = self.node(a).needs_grad;
        Ok(self.push(vec![1], vec![s], needs, Rule::MeanAll { a }))
    }

    /// Row-wise log-softmax over the active columns of `mask`.
    /// Inactive columns are excluded from the normalization and produce
    /// zero output entries.
    pub fn log_softmax_masked(&mut self, a: VarId, mask: &[bool]) -> Result<VarId> {
        let sa = self.node(a).shape.clone();
        let (rows, cols) = rows_cols(&sa);
        if mask.len() != cols {
            return Err(CglError::ShapeMismatch { op: "log_softmax", lhs: sa, rhs: vec![mask.len()] });
        }
        if !mask.iter().any(|&m| m) {
            return Err(CglError::NoActiveClasses);
        }
        let da = &self.node(a).data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &da[r * cols..(r + 1) * cols];
            let lse = log_sum_exp_masked(row, mask);
            for c in 0..cols {
                if mask[c] {
                    out[r * cols + c] = row[c] - lse;
                }
            }
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(sa, out, needs, Rule::LogSoftmax { a, mask: mask.to_vec() }))
    }

    /// Mean negative log-probability of the true class, softmax taken
    /// over active classes only.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize], mask: &[bool]) -> Result<VarId> {
        let sa = self.node(logits).shape.clone();
        let (rows, cols) = rows_cols(&sa);
        if mask.len() != cols {
            return Err(CglError::ShapeMismatch {
                op: "cross_entropy",
                lhs: sa,
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(CglError::NoActiveClasses);
        }
        if labels.len() != rows || rows == 0 {
            return Err(CglError::ShapeMismatch {
                op: "cross_entropy",
                lhs: sa,
                rhs: vec![labels.len()],
            });
        }
        for &y in labels {
            if y >= cols || !mask[y] {
                return Err(CglError::InactiveLabel { label: y });
            }
        }
        let da = &self.node(logits).data;
        let mut nll = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &da[r * cols..(r + 1) * cols];
            nll -= row[y] - log_sum_exp_masked(row, mask);
        }
        nll /= rows as f64;
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![nll],
            needs,
            Rule::CrossEntropy { logits, labels: labels.to_vec(), mask: mask.to_vec() },
        ))
    }

    /// Depthwise temporal convolution with same padding. `a` is
    /// `[t, groups*channels]`, `kernel` is `[channels, ksize]`; column
    /// `j` of the input convolves with kernel row `j % channels` along
    /// axis 0.
    pub fn conv_time(&mut self, a: VarId, kernel: VarId, channels: usize) -> Result<VarId> {
        let sa = self.node(a).shape.clone();
        let sk = self.node(kernel).shape.clone();
        if sa.len() != 2 || sk.len() != 2 || sk[0] != channels || sa[1] % channels != 0 {
            return Err(CglError::ShapeMismatch { op: "conv_time", lhs: sa, rhs: sk });
        }
        let (t, width) = (sa[0], sa[1]);
        let ksize = sk[1];
        if t < ksize {
            return Err(CglError::InvalidConfig {
                detail: alloc::format!("conv_time: {t} frames < kernel size {ksize}"),
            });
        }
        let half = ksize / 2;
        let mut out = vec![0.0; t * width];
        {
            let da = &self.node(a).data;
            let dk = &self.node(kernel).data;
            for j in 0..width {
                let krow = &dk[(j % channels) * ksize..(j % channels + 1) * ksize];
                for i in 0..t {
                    let mut acc = 0.0;
                    for (u, &kv) in krow.iter().enumerate() {
                        let src = i as isize + u as isize - half as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += kv * da[src as usize * width + j];
                        }
                    }
                    out[i * width + j] = acc;
                }
            }
        }
        let needs = self.node(a).needs_grad || self.node(kernel).needs_grad;
        Ok(self.push(sa, out, needs, Rule::ConvTime { a, kernel, t, channels, ksize }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep seeding d(loss)/d(loss) = 1. Gradients are
    /// reset first, so repeated calls are idempotent.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(CglError::NonScalarLoss { shape: self.node(loss).shape.clone() });
        }
        for node in &mut self.nodes {
            if node.needs_grad {
                node.grad.clear();
                node.grad.resize(node.data.len(), 0.0);
            } else {
                node.grad.clear();
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_empty() {
                continue;
            }
            self.propagate(i);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize) {
        // Take the node's grad out to appease the borrow checker; the
        // rule never references node i itself.
        let grad = core::mem::take(&mut self.nodes[i].grad);
        match &self.nodes[i].rule {
            Rule::Leaf => {}
            &Rule::Matmul { a, b, m, k, n } => {
                let (da, db) = (self.nodes[a.0].data.clone(), self.nodes[b.0].data.clone());
                if self.nodes[a.0].needs_grad {
                    // dA = dC · Bᵀ
                    let ga = &mut self.nodes[a.0].grad;
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let gc = &grad[r * n..(r + 1) * n];
                            let brow = &db[p * n..(p + 1) * n];
                            for j in 0..n {
                                acc += gc[j] * brow[j];
                            }
                            ga[r * k + p] += acc;
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dC
                    let gb = &mut self.nodes[b.0].grad;
                    for r in 0..m {
                        let gc = &grad[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = da[r * k + p];
                            if arp != 0.0 {
                                let gbrow = &mut gb[p * n..(p + 1) * n];
                                for j in 0..n {
                                    gbrow[j] += arp * gc[j];
                                }
                            }
                        }
                    }
                }
            }
            &Rule::Add { a, b } => {
                for id in [a, b] {
                    if self.nodes[id.0].needs_grad {
                        for (g, d) in self.nodes[id.0].grad.iter_mut().zip(&grad) {
                            *g += d;
                        }
                    }
                }
            }
            &Rule::AddRow { a, bias } => {
                let cols = self.nodes[bias.0].data.len();
                if self.nodes[a.0].needs_grad {
                    for (g, d) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                }
                if self.nodes[bias.0].needs_grad {
                    let gb = &mut self.nodes[bias.0].grad;
                    for (idx, d) in grad.iter().enumerate() {
                        gb[idx % cols] += d;
                    }
                }
            }
            &Rule::Mul { a, b } => {
                let (da, db) = (self.nodes[a.0].data.clone(), self.nodes[b.0].data.clone());
                if self.nodes[a.0].needs_grad {
                    for ((g, d), y) in self.nodes[a.0].grad.iter_mut().zip(&grad).zip(&db) {
                        *g += d * y;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    for ((g, d), x) in self.nodes[b.0].grad.iter_mut().zip(&grad).zip(&da) {
                        *g += d * x;
                    }
                }
            }
            &Rule::Scale { a, c } => {
                if self.nodes[a.0].needs_grad {
                    for (g, d) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += d * c;
                    }
                }
            }
            &Rule::Relu { a } => {
                if self.nodes[a.0].needs_grad {
                    let da = self.nodes[a.0].data.clone();
                    for ((g, d), x) in self.nodes[a.0].grad.iter_mut().zip(&grad).zip(&da) {
                        if *x > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Rule::Concat { parts } => {
                let parts = parts.clone();
                let mut off = 0usize;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    if self.nodes[p.0].needs_grad {
                        for (g, d) in self.nodes[p.0].grad.iter_mut().zip(&grad[off..off + len]) {
                            *g += d;
                        }
                    }
                    off += len;
                }
            }
            Rule::StackRows { parts, len } => {
                let (parts, len) = (parts.clone(), *len);
                for (r, p) in parts.iter().enumerate() {
                    if self.nodes[p.0].needs_grad {
                        for (g, d) in self.nodes[p.0]
                            .grad
                            .iter_mut()
                            .zip(&grad[r * len..(r + 1) * len])
                        {
                            *g += d;
                        }
                    }
                }
            }
            &Rule::SliceRows { a, start, rows, cols } => {
                if self.nodes[a.0].needs_grad {
                    let ga = &mut self.nodes[a.0].grad;
                    for (g, d) in ga[start * cols..(start + rows) * cols].iter_mut().zip(&grad) {
                        *g += d;
                    }
                }
            }
            Rule::Reduce { a, axis, rows, cols, kind, arg } => {
                let (a, axis, rows, cols, kind) = (*a, *axis, *rows, *cols, *kind);
                let arg = arg.clone();
                if self.nodes[a.0].needs_grad {
                    let ga = &mut self.nodes[a.0].grad;
                    match kind {
                        Reduction::Sum | Reduction::Mean => {
                            let denom = if kind == Reduction::Mean {
                                (if axis == 0 { rows } else { cols }) as f64
                            } else {
                                1.0
                            };
                            for r in 0..rows {
                                for c in 0..cols {
                                    let d = if axis == 0 { grad[c] } else { grad[r] };
                                    ga[r * cols + c] += d / denom;
                                }
                            }
                        }
                        Reduction::Max => {
                            if axis == 0 {
                                for c in 0..cols {
                                    ga[arg[c] * cols + c] += grad[c];
                                }
                            } else {
                                for r in 0..rows {
                                    ga[r * cols + arg[r]] += grad[r];
                                }
                            }
                        }
                    }
                }
            }
            &Rule::SumAll { a } => {
                if self.nodes[a.0].needs_grad {
                    for g in self.nodes[a.0].grad.iter_mut() {
                        *g += grad[0];
                    }
                }
            }
            &Rule::MeanAll { a } => {
                if self.nodes[a.0].needs_grad {
                    let n = self.nodes[a.0].data.len() as f64;
                    for g in self.nodes[a.0].grad.iter_mut() {
                        *g += grad[0] / n;
                    }
                }
            }
            Rule::LogSoftmax { a, mask } => {
                let a = *a;
                let mask = mask.clone();
                if self.nodes[a.0].needs_grad {
                    let cols = mask.len();
                    let rows = self.nodes[a.0].data.len() / cols;
                    let da = self.nodes[a.0].data.clone();
                    let ga = &mut self.nodes[a.0].grad;
                    for r in 0..rows {
                        let row = &da[r * cols..(r + 1) * cols];
                        let lse = log_sum_exp_masked(row, &mask);
                        let gsum: f64 = (0..cols)
                            .filter(|&c| mask[c])
                            .map(|c| grad[r * cols + c])
                            .sum();
                        for c in 0..cols {
                            if mask[c] {
                                let p = libm::exp(row[c] - lse);
                                ga[r * cols + c] += grad[r * cols + c] - p * gsum;
                            }
                        }
                    }
                }
            }
            Rule::CrossEntropy { logits, labels, mask } => {
                let logits = *logits;
                let (labels, mask) = (labels.clone(), mask.clone());
                if self.nodes[logits.0].needs_grad {
                    let cols = mask.len();
                    let rows = labels.len();
                    let dl = self.nodes[logits.0].data.clone();
                    let gl = &mut self.nodes[logits.0].grad;
                    let inv_b = grad[0] / rows as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &dl[r * cols..(r + 1) * cols];
                        let lse = log_sum_exp_masked(row, &mask);
                        for c in 0..cols {
                            if mask[c] {
                                let p = libm::exp(row[c] - lse);
                                let onehot = if c == y { 1.0 } else { 0.0 };
                                gl[r * cols + c] += inv_b * (p - onehot);
                            }
                        }
                    }
                }
            }
            &Rule::ConvTime { a, kernel, t, channels, ksize } => {
                let half = ksize / 2;
                let width = self.nodes[a.0].data.len() / t;
                let da = self.nodes[a.0].data.clone();
                let dk = self.nodes[kernel.0].data.clone();
                if self.nodes[a.0].needs_grad {
                    let ga = &mut self.nodes[a.0].grad;
                    for j in 0..width {
                        let krow = &dk[(j % channels) * ksize..(j % channels + 1) * ksize];
                        for i in 0..t {
                            let d = grad[i * width + j];
                            if d == 0.0 {
                                continue;
                            }
                            for (u, &kv) in krow.iter().enumerate() {
                                let src = i as isize + u as isize - half as isize;
                                if src >= 0 && (src as usize) < t {
                                    ga[src as usize * width + j] += kv * d;
                                }
                            }
                        }
                    }
                }
                if self.nodes[kernel.0].needs_grad {
                    let gk = &mut self.nodes[kernel.0].grad;
                    for j in 0..width {
                        let ch = j % channels;
                        for i in 0..t {
                            let d = grad[i * width + j];
                            if d == 0.0 {
                                continue;
                            }
                            for u in 0..ksize {
                                let src = i as isize + u as isize - half as isize;
                                if src >= 0 && (src as usize) < t {
                                    gk[ch * ksize + u] += d * da[src as usize * width + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.nodes[i].grad = grad;
    }
}

/// θ ← θ − lr · grad for every parameter tensor, clearing gradients.
pub fn sgd_step<'a, I>(params: I, learning_rate: f64) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
{
    for (name, p) in params {
        let g = p.grad.take().ok_or_else(|| CglError::MissingGradient {
            name: alloc::string::String::from(name),
        })?;
        for (w, gi) in p.data.iter_mut().zip(&g) {
            *w -= learning_rate * gi;
        }
    }
    Ok(())
}

fn log_sum_exp_masked(row: &[f64], mask: &[bool]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for (c, &v) in row.iter().enumerate() {
        if mask[c] && v > m {
            m = v;
        }
    }
    let mut s = 0.0;
    for (c, &v) in row.iter().enumerate() {
        if mask[c] {
            s += libm::exp(v - m);
        }
    }
    m + libm::log(s)
}

/// C += A·B, row-major, ikj order.
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let i = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant(vec![2, 2], vec![0.0; 4]);
        match tape.matmul(a, b) {
            Err(CglError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![3], vec![-1.0, 0.0, 2.5]);
        let r = tape.relu(a);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn sum_reduce_column_oracle() {
        // Column sums of [[1,2],[3,4]] computed independently.
        let m = [[1.0, 2.0], [3.0, 4.0]];
        let mut expect = [0.0; 2];
        for row in &m {
            for (c, v) in row.iter().enumerate() {
                expect[c] += v;
            }
        }
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = tape.reduce(a, 0, Reduction::Sum).unwrap();
        assert_eq!(tape.value(s), &expect);
    }

    #[test]
    fn max_reduce_ties_to_first() {
        let mut tape = Tape::new();
        let mut x = t(&[2, 2], &[1.0, 5.0, 1.0, 5.0]);
        x.requires_grad = true;
        let a = tape.leaf(&x);
        let m = tape.reduce(a, 0, Reduction::Max).unwrap();
        let s = tape.sum_all(m);
        tape.backward(s).unwrap();
        // ties: both rows equal, gradient goes to row 0
        assert_eq!(tape.grad(a), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut tape = Tape::new();
        let l = tape.constant(vec![1, 2], vec![10.0, -10.0]);
        let ce = tape.cross_entropy(l, &[0], &[true, true]).unwrap();
        assert!(tape.value(ce)[0] < 1e-4);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let l = tape.constant(vec![1, 2], vec![0.0, 0.0]);
        let ce = tape.cross_entropy(l, &[1], &[true, true]).unwrap();
        assert!((tape.value(ce)[0] - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_masked_two_class_closed_form() {
        // logits [5, 0, 7], class 2 inactive, label 0:
        // -ln(e^5 / (e^5 + e^0)) computed by the two-class closed form.
        let expect = -(5.0f64 - ((5.0f64).exp() + 1.0).ln());
        let mut tape = Tape::new();
        let l = tape.constant(vec![1, 3], vec![5.0, 0.0, 7.0]);
        let ce = tape.cross_entropy(l, &[0], &[true, true, false]).unwrap();
        assert!((tape.value(ce)[0] - expect).abs() < 1e-12);
        assert!((tape.value(ce)[0] - 0.00672).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_label_outside_active_set() {
        let mut tape = Tape::new();
        let l = tape.constant(vec![1, 3], vec![0.0, 0.0, 0.0]);
        assert!(matches!(
            tape.cross_entropy(l, &[2], &[true, true, false]),
            Err(CglError::InactiveLabel { label: 2 })
        ));
        assert!(matches!(
            tape.cross_entropy(l, &[0], &[false, false, false]),
            Err(CglError::NoActiveClasses)
        ));
    }

    #[test]
    fn masked_equals_restricted_cross_entropy() {
        // CE over active columns {0,1,3} of 5 equals CE on a 3-column
        // tensor holding just those logits.
        let logits = [1.3, -0.7, 9.9, 0.4, -2.0];
        let mask = [true, true, false, true, false];
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 5], logits.to_vec());
        let full = tape.cross_entropy(a, &[3], &mask).unwrap();
        let restricted: Vec<f64> = logits
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        let b = tape.constant(vec![1, 3], restricted);
        let small = tape.cross_entropy(b, &[2], &[true, true, true]).unwrap();
        assert!((tape.value(full)[0] - tape.value(small)[0]).abs() < 1e-12);
    }

    #[test]
    fn backward_square_loss() {
        let mut tape = Tape::new();
        let w = t(&[2], &[1.0, -2.0]);
        let mut w = w;
        w.requires_grad = true;
        let wv = tape.leaf(&w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(wv), &[2.0, -4.0]);
    }

    #[test]
    fn backward_linear_softmax_matches_closed_form() {
        // 1-layer linear model, one sample: grad_W = xᵀ(softmax − onehot).
        let x = [0.5, -1.5, 2.0];
        let w_data = [0.1, 0.2, -0.3, 0.4, 0.0, -0.1]; // 3x2
        let label = 1usize;
        let mut tape = Tape::new();
        let xv = tape.constant(vec![1, 3], x.to_vec());
        let mut w = t(&[3, 2], &w_data);
        w.requires_grad = true;
        let wv = tape.leaf(&w);
        let logits = tape.matmul(xv, wv).unwrap();
        let ce = tape.cross_entropy(logits, &[label], &[true, true]).unwrap();
        tape.backward(ce).unwrap();

        // independent closed-form oracle
        let z: Vec<f64> = (0..2)
            .map(|j| (0..3).map(|i| x[i] * w_data[i * 2 + j]).sum())
            .collect();
        let m = z[0].max(z[1]);
        let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let p: Vec<f64> = z.iter().map(|v| (v - m).exp() / denom).collect();
        for i in 0..3 {
            for j in 0..2 {
                let onehot = if j == label { 1.0 } else { 0.0 };
                let expect = x[i] * (p[j] - onehot);
                assert!((tape.grad(wv)[i * 2 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_twice_is_idempotent() {
        let mut tape = Tape::new();
        let mut w = t(&[3], &[0.3, -0.2, 1.1]);
        w.requires_grad = true;
        let wv = tape.leaf(&w);
        let r = tape.relu(wv);
        let sq = tape.mul(r, r).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let first = tape.grad(wv).to_vec();
        tape.backward(loss).unwrap();
        assert_eq!(first, tape.grad(wv));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(a), Err(CglError::NonScalarLoss { .. })));
    }

    #[test]
    fn sgd_one_step_arithmetic() {
        let mut p = t(&[1], &[1.0]);
        p.requires_grad = true;
        p.grad = Some(vec![0.5]);
        sgd_step([("p", &mut p)], 0.001).unwrap();
        assert_eq!(p.data[0], 0.9995);
        assert!(p.grad.is_none());
    }

    #[test]
    fn sgd_zero_grad_is_fixed_point() {
        let mut p = t(&[3], &[1.0, -2.0, 0.5]);
        p.grad = Some(vec![0.0; 3]);
        sgd_step([("p", &mut p)], 0.1).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn sgd_missing_grad_errors() {
        let mut p = t(&[1], &[1.0]);
        assert!(matches!(
            sgd_step([("p", &mut p)], 0.1),
            Err(CglError::MissingGradient { .. })
        ));
    }

    #[test]
    fn sgd_quadratic_convergence() {
        // (θ-3)², lr 0.1: θ converges geometrically to 3.
        let mut theta = t(&[1], &[0.0]);
        theta.requires_grad = true;
        for _ in 0..100 {
            let g = 2.0 * (theta.data[0] - 3.0);
            theta.grad = Some(vec![g]);
            sgd_step([("theta", &mut theta)], 0.1).unwrap();
        }
        assert!((theta.data[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn conv_time_constant_input_sum_normalized_kernel() {
        // sum-normalized kernel leaves a constant-in-time signal
        // unchanged away from the borders
        let t_len = 16;
        let k = 9;
        let mut tape = Tape::new();
        let a = tape.constant(vec![t_len, 1], vec![2.0; t_len]);
        let kern = tape.constant(vec![1, k], vec![1.0 / k as f64; k]);
        let out = tape.conv_time(a, kern, 1).unwrap();
        for i in k / 2..t_len - k / 2 {
            assert!((tape.value(out)[i] - 2.0).abs() < 1e-12);
        }
    }
}
