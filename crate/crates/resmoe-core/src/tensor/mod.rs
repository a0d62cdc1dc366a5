//! Define-by-run reverse-mode autodiff over dense row-major tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op pushes one node;
//! node creation order is therefore already a topological order and
//! [`Graph::backward`] walks it in reverse, accumulating gradients
//! additively across fan-out. Every op checks its output for non-finite
//! values and fails instead of propagating NaN/Inf.

mod conv;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MulScalar(NodeId, S),
    Relu(NodeId),
    Log(NodeId),
    /// x * ln(x), with 0 ln 0 := 0. Subgradient 0 at x == 0.
    XLnX(NodeId),
    /// Softmax over the last axis; saved output is the node value itself.
    Softmax(NodeId),
    SumAll(NodeId),
    /// [B, N] -> [N]
    ColSum(NodeId),
    /// [B, N] -> [B]
    RowSum(NodeId),
    /// [B, N] / [B], broadcast over the row
    RowDiv(NodeId, NodeId),
    /// x[b, ...] * w[b] for per-sample scalars w
    RowScale(NodeId, NodeId),
    /// x - s with s a single-element tensor
    SubBroadcast(NodeId, NodeId),
    /// [B, N] -> [B], one fixed column
    ColGet(NodeId, usize),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    /// Global average pooling [B, C, H, W] -> [B, C]
    Gap(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<S>,
        var: Vec<S>,
        eps: S,
        training: bool,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

#[derive(Debug, Clone)]
struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        op: Op<S>,
        name: &'static str,
    ) -> Result<NodeId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(shape, data, requires_grad, op))
    }

    /// Leaf tensor; `requires_grad` marks it as a trainable parameter.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<S>, requires_grad: bool) -> Result<NodeId> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "leaf shape {shape:?} has {} elements but data has {}",
                numel(shape),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// Constant leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<NodeId> {
        self.leaf(shape, data, false)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    /// Accumulated gradient of `id`, populated by [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, opname: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch(format!(
                "{opname}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked(shape, data, rg, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.requires(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked(shape, data, rg, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked(shape, data, rg, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x / y)
            .collect();
        let rg = self.requires(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked(shape, data, rg, Op::Div(a, b), "div")
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked(shape, data, rg, Op::MulScalar(a, c), "mul_scalar")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| x.maximum(S::ZERO))
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked(shape, data, rg, Op::Relu(a), "relu")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked(shape, data, rg, Op::Log(a), "log")
    }

    pub fn xlnx(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].data.iter().any(|&x| x < S::ZERO) {
            return Err(Error::InvalidArgument(
                "xlnx: negative input".into(),
            ));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > S::ZERO { x * x.ln() } else { S::ZERO })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked(shape, data, rg, Op::XLnX(a), "xlnx")
    }

    // ---- reductions and row ops ----

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: S = self.nodes[a.0].data.iter().copied().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(vec![1], vec![s], rg, Op::SumAll(a), "sum_all")
    }

    fn rows_cols(&self, a: NodeId, opname: &str) -> Result<(usize, usize)> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "{opname}: expected rank-2 tensor, got {shape:?}"
            )));
        }
        Ok((shape[0], shape[1]))
    }

    pub fn col_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(a, "col_sum")?;
        let mut out = vec![S::ZERO; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += self.nodes[a.0].data[r * cols + c];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(vec![cols], out, rg, Op::ColSum(a), "col_sum")
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(a, "row_sum")?;
        let mut out = vec![S::ZERO; rows];
        for r in 0..rows {
            out[r] = self.nodes[a.0].data[r * cols..(r + 1) * cols]
                .iter()
                .copied()
                .sum();
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(vec![rows], out, rg, Op::RowSum(a), "row_sum")
    }

    pub fn row_div(&mut self, a: NodeId, d: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(a, "row_div")?;
        if self.nodes[d.0].shape != [rows] {
            return Err(Error::ShapeMismatch(format!(
                "row_div: divisor shape {:?}, expected [{rows}]",
                self.nodes[d.0].shape
            )));
        }
        let mut out = vec![S::ZERO; rows * cols];
        for r in 0..rows {
            let dv = self.nodes[d.0].data[r];
            for c in 0..cols {
                out[r * cols + c] = self.nodes[a.0].data[r * cols + c] / dv;
            }
        }
        let rg = self.requires(&[a, d]);
        self.push_checked(vec![rows, cols], out, rg, Op::RowDiv(a, d), "row_div")
    }

    /// Scale each sample (leading axis) of `x` by the matching entry of `w`.
    pub fn row_scale(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.is_empty() || self.nodes[w.0].shape != [shape[0]] {
            return Err(Error::ShapeMismatch(format!(
                "row_scale: x {:?}, w {:?}",
                shape, self.nodes[w.0].shape
            )));
        }
        let per = numel(&shape[1..]);
        let mut out = vec![S::ZERO; numel(&shape)];
        for b in 0..shape[0] {
            let wv = self.nodes[w.0].data[b];
            for i in 0..per {
                out[b * per + i] = self.nodes[x.0].data[b * per + i] * wv;
            }
        }
        let rg = self.requires(&[x, w]);
        self.push_checked(shape, out, rg, Op::RowScale(x, w), "row_scale")
    }

    /// Extract column `c` of a rank-2 tensor as a vector over rows.
    pub fn col_get(&mut self, a: NodeId, c: usize) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(a, "col_get")?;
        if c >= cols {
            return Err(Error::InvalidArgument(format!(
                "col_get: column {c} out of range for {cols} columns"
            )));
        }
        let out = (0..rows)
            .map(|r| self.nodes[a.0].data[r * cols + c])
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(vec![rows], out, rg, Op::ColGet(a, c), "col_get")
    }

    /// Subtract a single-element tensor from every entry of `a`.
    pub fn sub_broadcast(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if numel(&self.nodes[s.0].shape) != 1 {
            return Err(Error::ShapeMismatch(
                "sub_broadcast: subtrahend must be a single element".into(),
            ));
        }
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[a.0].data.iter().map(|&x| x - sv).collect();
        let rg = self.requires(&[a, s]);
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked(shape, data, rg, Op::SubBroadcast(a, s), "sub_broadcast")
    }

    // ---- neural net ops ----

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        let cols = *shape.last().ok_or_else(|| {
            Error::ShapeMismatch("softmax: rank-0 tensor".into())
        })?;
        let rows = numel(&shape) / cols;
        let mut out = vec![S::ZERO; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[a.0].data[r * cols..(r + 1) * cols];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut sum = S::ZERO;
            for c in 0..cols {
                let e = (row[c] - mx).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= sum;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(shape, out, rg, Op::Softmax(a), "softmax")
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (batch, d) = self.rows_cols(x, "linear")?;
        let (o, wd) = self.rows_cols(w, "linear")?;
        if wd != d {
            return Err(Error::ShapeMismatch(format!(
                "linear: input [{batch}, {d}] vs weight [{o}, {wd}]"
            )));
        }
        if let Some(b) = b {
            if self.nodes[b.0].shape != [o] {
                return Err(Error::ShapeMismatch(format!(
                    "linear: bias shape {:?}, expected [{o}]",
                    self.nodes[b.0].shape
                )));
            }
        }
        let mut out = vec![S::ZERO; batch * o];
        for r in 0..batch {
            let xs = &self.nodes[x.0].data[r * d..(r + 1) * d];
            for oi in 0..o {
                let ws = &self.nodes[w.0].data[oi * d..(oi + 1) * d];
                let mut acc = S::ZERO;
                for i in 0..d {
                    acc += xs[i] * ws[i];
                }
                if let Some(b) = b {
                    acc += self.nodes[b.0].data[oi];
                }
                out[r * o + oi] = acc;
            }
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.requires(&ids);
        self.push_checked(vec![batch, o], out, rg, Op::Linear { x, w, b }, "linear")
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "global_avg_pool: expected [B, C, H, W], got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let inv = S::ONE / S::from_usize(hw);
        let mut out = vec![S::ZERO; b * c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let s: S = self.nodes[a.0].data[base..base + hw].iter().copied().sum();
                out[bi * c + ci] = s * inv;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(vec![b, c], out, rg, Op::Gap(a), "global_avg_pool")
    }

    /// Batch normalization over [B, C, H, W] with per-channel affine.
    ///
    /// In training mode batch statistics are used and written back into
    /// `running_mean` / `running_var` with the given momentum; in eval mode
    /// the running statistics are used directly.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut [S],
        running_var: &mut [S],
        momentum: S,
        eps: S,
        training: bool,
    ) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm2d: expected [B, C, H, W], got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.nodes[gamma.0].shape != [c]
            || self.nodes[beta.0].shape != [c]
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm2d: per-channel parameters do not match {c} channels"
            )));
        }
        let hw = h * w;
        let m = b * hw;
        let inv_m = S::ONE / S::from_usize(m);

        let (mean, var) = if training {
            let mut mean = vec![S::ZERO; c];
            let mut var = vec![S::ZERO; c];
            for ci in 0..c {
                let mut s = S::ZERO;
                for bi in 0..b {
                    let base = (bi * c + ci) * hw;
                    for i in 0..hw {
                        s += self.nodes[x.0].data[base + i];
                    }
                }
                mean[ci] = s * inv_m;
                let mut v = S::ZERO;
                for bi in 0..b {
                    let base = (bi * c + ci) * hw;
                    for i in 0..hw {
                        let d = self.nodes[x.0].data[base + i] - mean[ci];
                        v += d * d;
                    }
                }
                var[ci] = v * inv_m;
            }
            for ci in 0..c {
                running_mean[ci] = (S::ONE - momentum) * running_mean[ci] + momentum * mean[ci];
                running_var[ci] = (S::ONE - momentum) * running_var[ci] + momentum * var[ci];
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let mut out = vec![S::ZERO; b * c * hw];
        for ci in 0..c {
            let g = self.nodes[gamma.0].data[ci];
            let bt = self.nodes[beta.0].data[ci];
            let inv_std = S::ONE / (var[ci] + eps).sqrt();
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for i in 0..hw {
                    out[base + i] = (self.nodes[x.0].data[base + i] - mean[ci]) * inv_std * g + bt;
                }
            }
        }
        let rg = self.requires(&[x, gamma, beta]);
        self.push_checked(
            shape,
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                training,
            },
            "batchnorm2d",
        )
    }

    /// Mean negative log-likelihood of `labels` under softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (batch, classes) = self.rows_cols(logits, "cross_entropy")?;
        if labels.len() != batch {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: {batch} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: label {bad} outside [0, {classes})"
            )));
        }
        let mut probs = vec![S::ZERO; batch * classes];
        let mut loss = S::ZERO;
        for r in 0..batch {
            let row = &self.nodes[logits.0].data[r * classes..(r + 1) * classes];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut sum = S::ZERO;
            for ci in 0..classes {
                let e = (row[ci] - mx).exp();
                probs[r * classes + ci] = e;
                sum += e;
            }
            for ci in 0..classes {
                probs[r * classes + ci] /= sum;
            }
            loss -= row[labels[r]] - mx - sum.ln();
        }
        loss = loss / S::from_usize(batch);
        let rg = self.nodes[logits.0].requires_grad;
        self.push_checked(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        conv::forward(self, x, w, b, stride, padding)
    }

    // ---- backward ----

    /// Populate gradients of every `requires_grad` node reachable from the
    /// scalar `loss`. Repeated calls accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut dl: Vec<Option<Vec<S>>> = vec![None; n];
        dl[loss.0] = Some(vec![S::ONE]);

        for i in (0..n).rev() {
            let Some(g) = dl[i].take() else { continue };
            if self.nodes[i].requires_grad {
                match &mut self.grads[i] {
                    Some(acc) => {
                        for (a, &v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => self.grads[i] = Some(g.clone()),
                }
            }
            self.propagate(i, &g, &mut dl)?;
        }
        for gr in self.grads.iter().flatten() {
            if gr.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }

    fn accumulate(&self, dl: &mut [Option<Vec<S>>], id: NodeId, contrib: Vec<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut dl[id.0] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(contrib) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, g: &[S], dl: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(dl, *a, g.to_vec());
                self.accumulate(dl, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(dl, *a, g.to_vec());
                self.accumulate(dl, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let da = g
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let db = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                self.accumulate(dl, *a, da);
                self.accumulate(dl, *b, db);
            }
            Op::Div(a, b) => {
                let da = g
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(&gv, &bv)| gv / bv)
                    .collect();
                let db = g
                    .iter()
                    .zip(self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                self.accumulate(dl, *a, da);
                self.accumulate(dl, *b, db);
            }
            Op::MulScalar(a, c) => {
                self.accumulate(dl, *a, g.iter().map(|&v| v * *c).collect());
            }
            Op::Relu(a) => {
                let da = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &xv)| if xv > S::ZERO { gv } else { S::ZERO })
                    .collect();
                self.accumulate(dl, *a, da);
            }
            Op::Log(a) => {
                let da = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                self.accumulate(dl, *a, da);
            }
            Op::XLnX(a) => {
                let da = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &xv)| {
                        if xv > S::ZERO {
                            gv * (xv.ln() + S::ONE)
                        } else {
                            S::ZERO
                        }
                    })
                    .collect();
                self.accumulate(dl, *a, da);
            }
            Op::Softmax(a) => {
                let cols = *node.shape.last().unwrap();
                let rows = node.data.len() / cols;
                let mut da = vec![S::ZERO; node.data.len()];
                for r in 0..rows {
                    let p = &node.data[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut dot = S::ZERO;
                    for c in 0..cols {
                        dot += gr[c] * p[c];
                    }
                    for c in 0..cols {
                        da[r * cols + c] = p[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(dl, *a, da);
            }
            Op::SumAll(a) => {
                let gv = g[0];
                self.accumulate(dl, *a, vec![gv; self.nodes[a.0].data.len()]);
            }
            Op::ColSum(a) => {
                let cols = node.data.len();
                let rows = self.nodes[a.0].data.len() / cols;
                let mut da = vec![S::ZERO; rows * cols];
                for r in 0..rows {
                    da[r * cols..(r + 1) * cols].copy_from_slice(g);
                }
                self.accumulate(dl, *a, da);
            }
            Op::RowSum(a) => {
                let rows = node.data.len();
                let cols = self.nodes[a.0].data.len() / rows;
                let mut da = vec![S::ZERO; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = g[r];
                    }
                }
                self.accumulate(dl, *a, da);
            }
            Op::RowDiv(a, d) => {
                let cols = *node.shape.last().unwrap();
                let rows = node.data.len() / cols;
                let mut da = vec![S::ZERO; rows * cols];
                let mut dd = vec![S::ZERO; rows];
                for r in 0..rows {
                    let dv = self.nodes[d.0].data[r];
                    for c in 0..cols {
                        let av = self.nodes[a.0].data[r * cols + c];
                        da[r * cols + c] = g[r * cols + c] / dv;
                        dd[r] -= g[r * cols + c] * av / (dv * dv);
                    }
                }
                self.accumulate(dl, *a, da);
                self.accumulate(dl, *d, dd);
            }
            Op::RowScale(x, w) => {
                let rows = self.nodes[w.0].data.len();
                let per = node.data.len() / rows;
                let mut dx = vec![S::ZERO; node.data.len()];
                let mut dw = vec![S::ZERO; rows];
                for r in 0..rows {
                    let wv = self.nodes[w.0].data[r];
                    for i in 0..per {
                        let idx = r * per + i;
                        dx[idx] = g[idx] * wv;
                        dw[r] += g[idx] * self.nodes[x.0].data[idx];
                    }
                }
                self.accumulate(dl, *x, dx);
                self.accumulate(dl, *w, dw);
            }
            Op::ColGet(a, c) => {
                let rows = node.data.len();
                let cols = self.nodes[a.0].data.len() / rows;
                let mut da = vec![S::ZERO; rows * cols];
                for r in 0..rows {
                    da[r * cols + *c] = g[r];
                }
                self.accumulate(dl, *a, da);
            }
            Op::SubBroadcast(a, s) => {
                self.accumulate(dl, *a, g.to_vec());
                let total: S = g.iter().copied().sum();
                self.accumulate(dl, *s, vec![-total]);
            }
            Op::Linear { x, w, b } => {
                let (batch, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let o = self.nodes[w.0].shape[0];
                let mut dx = vec![S::ZERO; batch * d];
                let mut dw = vec![S::ZERO; o * d];
                for r in 0..batch {
                    for oi in 0..o {
                        let gv = g[r * o + oi];
                        if gv == S::ZERO {
                            continue;
                        }
                        for i in 0..d {
                            dx[r * d + i] += gv * self.nodes[w.0].data[oi * d + i];
                            dw[oi * d + i] += gv * self.nodes[x.0].data[r * d + i];
                        }
                    }
                }
                self.accumulate(dl, *x, dx);
                self.accumulate(dl, *w, dw);
                if let Some(b) = b {
                    let mut db = vec![S::ZERO; o];
                    for r in 0..batch {
                        for oi in 0..o {
                            db[oi] += g[r * o + oi];
                        }
                    }
                    self.accumulate(dl, *b, db);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                conv::backward(self, i, *x, *w, *b, *stride, *padding, g, dl);
            }
            Op::Gap(a) => {
                let (bn, c) = (node.shape[0], node.shape[1]);
                let hw = self.nodes[a.0].data.len() / (bn * c);
                let inv = S::ONE / S::from_usize(hw);
                let mut da = vec![S::ZERO; self.nodes[a.0].data.len()];
                for bi in 0..bn {
                    for ci in 0..c {
                        let gv = g[bi * c + ci] * inv;
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            da[base + i] = gv;
                        }
                    }
                }
                self.accumulate(dl, *a, da);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                training,
            } => {
                let (bn, c) = (node.shape[0], node.shape[1]);
                let hw = node.data.len() / (bn * c);
                let m = bn * hw;
                let inv_m = S::ONE / S::from_usize(m);
                let mut dx = vec![S::ZERO; node.data.len()];
                let mut dgamma = vec![S::ZERO; c];
                let mut dbeta = vec![S::ZERO; c];
                for ci in 0..c {
                    let inv_std = S::ONE / (var[ci] + *eps).sqrt();
                    let gm = self.nodes[gamma.0].data[ci];
                    // sums over the channel
                    let mut sum_g = S::ZERO;
                    let mut sum_gx = S::ZERO;
                    for bi in 0..bn {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            let xhat =
                                (self.nodes[x.0].data[base + i] - mean[ci]) * inv_std;
                            let gv = g[base + i];
                            sum_g += gv;
                            sum_gx += gv * xhat;
                        }
                    }
                    dgamma[ci] = sum_gx;
                    dbeta[ci] = sum_g;
                    for bi in 0..bn {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            let gv = g[base + i];
                            dx[base + i] = if *training {
                                let xhat =
                                    (self.nodes[x.0].data[base + i] - mean[ci]) * inv_std;
                                gm * inv_std * (gv - inv_m * (sum_g + xhat * sum_gx))
                            } else {
                                // running stats are constants in eval mode
                                gm * inv_std * gv
                            };
                        }
                    }
                }
                self.accumulate(dl, *x, dx);
                self.accumulate(dl, *gamma, dgamma);
                self.accumulate(dl, *beta, dbeta);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / S::from_usize(batch);
                let mut da = vec![S::ZERO; probs.len()];
                for r in 0..batch {
                    for ci in 0..classes {
                        let mut v = probs[r * classes + ci];
                        if ci == labels[r] {
                            v -= S::ONE;
                        }
                        da[r * classes + ci] = v * scale;
                    }
                }
                self.accumulate(dl, *logits, da);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn graph() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut g = graph();
        let x = g.leaf(&[3], vec![1.0, -2.0, 0.5], true).unwrap();
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_backward() {
        let mut g = graph();
        let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = graph();
        let x = g.leaf(&[2], vec![3.0, 4.0], true).unwrap();
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = graph();
        let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = graph();
        let x = g.leaf(&[1, 4], vec![0.0; 4], false).unwrap();
        let p = g.softmax(x).unwrap();
        for &v in g.data(p) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = graph();
        let x = g
            .leaf(&[2, 3], vec![1.0, -2.0, 0.3, 5.0, 5.0, -5.0], false)
            .unwrap();
        let p = g.softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.data(p)[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(g.data(p)[r * 3..(r + 1) * 3].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn linear_identity_and_fixed_case() {
        let mut g = graph();
        let x = g.leaf(&[1, 2], vec![1.0, 2.0], false).unwrap();
        let w_id = g.leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        let b0 = g.leaf(&[2], vec![0.0, 0.0], false).unwrap();
        let y = g.linear(x, w_id, Some(b0)).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0]);

        // weight [[1,1],[0,1]], bias [0,0] -> [3, 2]
        let w = g.leaf(&[2, 2], vec![1.0, 1.0, 0.0, 1.0], false).unwrap();
        let y2 = g.linear(x, w, Some(b0)).unwrap();
        assert_eq!(g.data(y2), &[3.0, 2.0]);
    }

    #[test]
    fn linear_zero_weight_gives_bias_rows() {
        let mut g = graph();
        let x = g.leaf(&[3, 2], vec![9.0; 6], false).unwrap();
        let w = g.leaf(&[2, 2], vec![0.0; 4], false).unwrap();
        let b = g.leaf(&[2], vec![0.5, -1.5], false).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        for r in 0..3 {
            assert_eq!(&g.data(y)[r * 2..r * 2 + 2], &[0.5, -1.5]);
        }
    }

    #[test]
    fn linear_dimension_mismatch() {
        let mut g = graph();
        let x = g.leaf(&[1, 3], vec![0.0; 3], false).unwrap();
        let w = g.leaf(&[2, 2], vec![0.0; 4], false).unwrap();
        assert!(matches!(
            g.linear(x, w, None),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gap_constant_map() {
        let mut g = graph();
        let x = g.leaf(&[1, 2, 3, 3], vec![4.0; 18], false).unwrap();
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.data(y), &[4.0, 4.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = graph();
        let x = g.leaf(&[1, 3], vec![0.0; 3], false).unwrap();
        assert!(matches!(
            g.cross_entropy(x, &[3]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn nan_input_rejected() {
        let mut g = graph();
        assert!(matches!(
            g.leaf(&[1], vec![f64::NAN], false),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn division_producing_inf_rejected() {
        let mut g = graph();
        let a = g.leaf(&[1], vec![1.0], false).unwrap();
        let b = g.leaf(&[1], vec![0.0], false).unwrap();
        assert!(matches!(g.div(a, b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn batchnorm_train_matches_direct_statistics() {
        let mut g = graph();
        // [2, 1, 1, 2]: channel sees values 1, 2, 3, 4
        let x = g
            .leaf(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0], false)
            .unwrap();
        let gamma = g.leaf(&[1], vec![1.0], false).unwrap();
        let beta = g.leaf(&[1], vec![0.0], false).unwrap();
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let y = g
            .batchnorm2d(x, gamma, beta, &mut rm, &mut rv, 0.1, 1e-5, true)
            .unwrap();
        let mean = 2.5;
        let var = 1.25;
        for (i, &xv) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            let expect = (xv - mean) / (var + 1e-5f64).sqrt();
            assert!((g.data(y)[i] - expect).abs() < 1e-10);
        }
        assert!((rm[0] - 0.25).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.125)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut g = graph();
        let x = g.leaf(&[1, 1, 1, 2], vec![1.0, 3.0], false).unwrap();
        let gamma = g.leaf(&[1], vec![2.0], false).unwrap();
        let beta = g.leaf(&[1], vec![1.0], false).unwrap();
        let mut rm = vec![1.0];
        let mut rv = vec![4.0];
        let y = g
            .batchnorm2d(x, gamma, beta, &mut rm, &mut rv, 0.1, 0.0, false)
            .unwrap();
        assert!((g.data(y)[0] - 1.0).abs() < 1e-12);
        assert!((g.data(y)[1] - 3.0).abs() < 1e-12);
        // eval must not touch running stats
        assert_eq!((rm[0], rv[0]), (1.0, 4.0));
    }
}
