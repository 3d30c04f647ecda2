//! Dense f32 tensors and a tape for reverse-mode automatic differentiation.
//!
//! The tape records exactly the primitives the backbone and training loops
//! need: matmul (plain and `a @ b^T`), row softmax, layer norm, GELU,
//! embedding gather, row/column concatenation and slicing, and a masked
//! cross-entropy loss. Every primitive materializes its output; there are
//! no views or broadcasting beyond row-wise bias addition.
//!
//! Nodes are appended in topological order by construction, so the
//! backward pass is a single reverse sweep that visits each node once.
//! Gradient accumulators are zeroed per [`Tape::backward`] call.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// A dense row-major f32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Build a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("from_rows: no rows"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows: ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor; 1-D tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Columns of a 1-D or 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a[m,k] @ b[k,n]
    MatMul(NodeId, NodeId),
    /// a[m,k] @ b[n,k]^T
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    /// a[m,n] + bias[n] broadcast over rows
    AddBias(NodeId, NodeId),
    /// a + constant tensor (no gradient into the constant)
    AddConst(NodeId),
    /// rows of a table selected by index
    GatherRows(NodeId, Vec<usize>),
    SliceCols(NodeId, usize, usize),
    ConcatRows(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f32,
    },
    Gelu(NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<u8>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

/// Records primitive operations for a single forward pass.
///
/// Single-threaded; build a fresh tape per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf: no gradient is reported for it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// A trainable leaf: `backward` reports its gradient.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        let id = self.push(t, Op::Leaf);
        self.nodes[id.0].trainable = true;
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let t = self.value(id);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0f32; m * n];
        mm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a[m,k] @ b[n,k]^T -> [m,n]`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_bt: {:?} x {:?}^T",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0f32; m * n];
        mm_bt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let data: Vec<f32> = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor {
            shape: self.value(a).shape().to_vec(),
            data,
        };
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a);
        if self.value(bias).numel() != n {
            return Err(Error::shape(format!(
                "add_bias: {:?} + bias {:?}",
                self.value(a).shape(),
                self.value(bias).shape()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += b[j];
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(a, bias)))
    }

    /// Add a constant tensor (attention masks); no gradient into `c`.
    pub fn add_const(&mut self, a: NodeId, c: Tensor) -> Result<NodeId> {
        if self.value(a).shape() != c.shape() {
            return Err(Error::shape(format!(
                "add_const: {:?} vs {:?}",
                self.value(a).shape(),
                c.shape()
            )));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(c.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddConst(a)))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.dims2(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::contract(format!(
                    "gather_rows: index {i} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(&self.value(table).data()[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(t, Op::GatherRows(table, ids.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a);
        if start + width > n {
            return Err(Error::shape(format!(
                "slice_cols: [{start}, {}) out of {n} columns",
                start + width
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let t = Tensor::new(vec![m, width], data)?;
        Ok(self.push(t, Op::SliceCols(a, start, width)))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, na) = self.dims2(a);
        let (mb, nb) = self.dims2(b);
        if na != nb {
            return Err(Error::shape(format!(
                "concat_rows: {:?} over {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut data = Vec::with_capacity((ma + mb) * na);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::new(vec![ma + mb, na], data)?;
        Ok(self.push(t, Op::ConcatRows(a, b)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols: no parts"));
        }
        let m = self.dims2(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (mp, np) = self.dims2(p);
            if mp != m {
                return Err(Error::shape("concat_cols: row count mismatch"));
            }
            widths.push(np);
            total += np;
        }
        let mut data = vec![0.0f32; m * total];
        let mut off = 0usize;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![m, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.dims2(a);
        let src = self.value(a).data();
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data,
        };
        self.push(t, Op::SoftmaxRows(a))
    }

    /// Per-row normalization to zero mean / unit variance, then `gain * x + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f32) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm: eps must be positive"));
        }
        let (m, n) = self.dims2(x);
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                self.value(x).shape(),
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect();
        let t = Tensor {
            shape: self.value(a).shape().to_vec(),
            data,
        };
        self.push(t, Op::Gelu(a))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f32 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean over masked-in positions of `-log softmax(logits)[t, targets[t]]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[u8]) -> Result<NodeId> {
        let (t_len, vocab) = self.dims2(logits);
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::shape(format!(
                "cross_entropy: logits {t_len} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        for (&tid, &m) in targets.iter().zip(mask) {
            if m != 0 && tid >= vocab {
                return Err(Error::contract(format!(
                    "cross_entropy: target id {tid} out of range for vocab {vocab}"
                )));
            }
        }
        let n_masked = mask.iter().filter(|&&m| m != 0).count();
        if n_masked == 0 {
            return Err(Error::contract("cross_entropy: no masked-in positions"));
        }
        let src = self.value(logits).data();
        let mut loss = 0.0f64;
        for t in 0..t_len {
            if mask[t] == 0 {
                continue;
            }
            let row = &src[t * vocab..(t + 1) * vocab];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse: f32 = row.iter().map(|&v| (v - mx).exp()).sum::<f32>().ln() + mx;
            loss += f64::from(lse - row[targets[t]]);
        }
        let t = Tensor::scalar((loss / n_masked as f64) as f32);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for trainable
    /// leaves only, keyed by node index.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<usize, Tensor>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g); // keep for reporting
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims2(*a);
                    let n = self.dims2(*b).1;
                    let ga = self.grad_buf(&mut grads, *a);
                    mm_bt(&g, self.value(*b).data(), m, n, k, ga);
                    let gb = self.grad_buf(&mut grads, *b);
                    mm_at(self.value(*a).data(), &g, m, k, n, gb);
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = self.dims2(*a);
                    let n = self.dims2(*b).0;
                    let ga = self.grad_buf(&mut grads, *a);
                    mm(&g, self.value(*b).data(), m, n, k, ga);
                    let gb = self.grad_buf(&mut grads, *b);
                    mm_at(&g, self.value(*a).data(), m, n, k, gb);
                }
                Op::Add(a, b) => {
                    accumulate(self.grad_buf(&mut grads, *a), &g);
                    accumulate(self.grad_buf(&mut grads, *b), &g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data().to_vec();
                    let bv = self.value(*b).data().to_vec();
                    let ga = self.grad_buf(&mut grads, *a);
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * bv[i];
                    }
                    let gb = self.grad_buf(&mut grads, *b);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i] += gi * av[i];
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    let ga = self.grad_buf(&mut grads, *a);
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * c;
                    }
                }
                Op::AddBias(a, bias) => {
                    let (m, n) = self.dims2(*a);
                    accumulate(self.grad_buf(&mut grads, *a), &g);
                    let gb = self.grad_buf(&mut grads, *bias);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
                Op::AddConst(a) => {
                    accumulate(self.grad_buf(&mut grads, *a), &g);
                }
                Op::GatherRows(table, ids) => {
                    let cols = self.dims2(*table).1;
                    let ids = ids.clone();
                    let gt = self.grad_buf(&mut grads, *table);
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[i * cols + j] += g[r * cols + j];
                        }
                    }
                }
                Op::SliceCols(a, start, width) => {
                    let (m, n) = self.dims2(*a);
                    let (start, width) = (*start, *width);
                    let ga = self.grad_buf(&mut grads, *a);
                    for i in 0..m {
                        for j in 0..width {
                            ga[i * n + start + j] += g[i * width + j];
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let (ma, na) = self.dims2(*a);
                    accumulate(self.grad_buf(&mut grads, *a), &g[..ma * na]);
                    accumulate(self.grad_buf(&mut grads, *b), &g[ma * na..]);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let m = self.dims2(parts[0]).0;
                    let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
                    let mut off = 0usize;
                    for &p in &parts {
                        let w = self.dims2(p).1;
                        let gp = self.grad_buf(&mut grads, p);
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + off + j];
                            }
                        }
                        off += w;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = self.dims2(*a);
                    let y = self.value(NodeId(idx)).data().to_vec();
                    let ga = self.grad_buf(&mut grads, *a);
                    for i in 0..m {
                        let dot: f32 = (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum();
                        for j in 0..n {
                            ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (m, n) = self.dims2(*x);
                    let xv = self.value(*x).data().to_vec();
                    let gv = self.value(*gain).data().to_vec();
                    let eps = *eps;
                    // per-row statistics recomputed from inputs
                    let mut gx = vec![0.0f32; m * n];
                    let mut ggain = vec![0.0f32; n];
                    let mut gbias = vec![0.0f32; n];
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f32>() / n as f32;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gy = &g[i * n..(i + 1) * n];
                        let mut mean_gd = 0.0f32;
                        let mut mean_gdx = 0.0f32;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let gd = gy[j] * gv[j];
                            ggain[j] += gy[j] * xhat;
                            gbias[j] += gy[j];
                            mean_gd += gd;
                            mean_gdx += gd * xhat;
                        }
                        mean_gd /= n as f32;
                        mean_gdx /= n as f32;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let gd = gy[j] * gv[j];
                            gx[i * n + j] += (gd - mean_gd - xhat * mean_gdx) * inv;
                        }
                    }
                    accumulate(self.grad_buf(&mut grads, *x), &gx);
                    accumulate(self.grad_buf(&mut grads, *gain), &ggain);
                    accumulate(self.grad_buf(&mut grads, *bias), &gbias);
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a).data().to_vec();
                    let ga = self.grad_buf(&mut grads, *a);
                    for (i, &x) in xv.iter().enumerate() {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        let d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                        ga[i] += g[i] * d;
                    }
                }
                Op::Sum(a) => {
                    let ga = self.grad_buf(&mut grads, *a);
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                } => {
                    let (t_len, vocab) = self.dims2(*logits);
                    let src = self.value(*logits).data().to_vec();
                    let targets = targets.clone();
                    let mask = mask.clone();
                    let n_masked = mask.iter().filter(|&&m| m != 0).count() as f32;
                    let gl = self.grad_buf(&mut grads, *logits);
                    for t in 0..t_len {
                        if mask[t] == 0 {
                            continue;
                        }
                        let row = &src[t * vocab..(t + 1) * vocab];
                        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                        let sum: f32 = row.iter().map(|&v| (v - mx).exp()).sum();
                        for j in 0..vocab {
                            let p = (row[j] - mx).exp() / sum;
                            let ind = if j == targets[t] { 1.0 } else { 0.0 };
                            gl[t * vocab + j] += g[0] * (p - ind) / n_masked;
                        }
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                let data = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.insert(idx, Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(out)
    }

    /// Lazily allocated gradient accumulator for `id`.
    #[allow(clippy::mut_from_ref)]
    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f32>>], id: NodeId) -> &'a mut Vec<f32> {
        if grads[id.0].is_none() {
            grads[id.0] = Some(vec![0.0; self.nodes[id.0].value.numel()]);
        }
        grads[id.0].as_mut().unwrap()
    }
}

fn accumulate(buf: &mut [f32], g: &[f32]) {
    for (b, v) in buf.iter_mut().zip(g) {
        *b += v;
    }
}

/// c[m,n] += a[m,k] @ b[k,n]
pub fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] @ b[n,k]^T
pub fn mm_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] += s;
        }
    }
}

/// c[k,n] += a[m,k]^T @ b[m,n]
pub fn mm_at(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}
