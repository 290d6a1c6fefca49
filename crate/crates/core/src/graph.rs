//! Reverse-mode differentiation over an append-only node arena.
//!
//! Nodes are created by the builder methods, which run the forward kernel
//! immediately, validate shapes, and reject non-finite outputs. Inputs always
//! have smaller ids than the node that consumes them, so the arena is acyclic
//! by construction and a reverse index sweep is a valid backward order.
//!
//! Frozen tables (the pretrained embedding matrix, positional rows) enter the
//! graph as constants: gradients are blocked at the lookup and never
//! accumulated into them. Trainable tables enter as parameters.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Where one sequence position takes its embedding row from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSource {
    /// Row of the frozen pretrained table; no gradient.
    Pretrained(usize),
    /// Row of the learnable class table; gradient flows.
    Learnable(usize),
    /// Row of the learnable context table; gradient flows.
    Context(usize),
}

enum Op<S: Scalar> {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddRow {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: S,
    },
    Sum {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        means: Vec<S>,
        inv_stds: Vec<S>,
    },
    Gelu {
        x: NodeId,
    },
    MaskedSoftmax {
        x: NodeId,
    },
    RowSelect {
        x: NodeId,
        row: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    StackRows {
        parts: Vec<NodeId>,
    },
    L2NormRows {
        x: NodeId,
        norms: Vec<S>,
    },
    EmbedSequence {
        learnable: NodeId,
        context: Option<NodeId>,
        rows: Vec<RowSource>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor<S>,
    },
    SigmoidBce {
        logits: NodeId,
        targets: Arc<Tensor<S>>,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    out: Tensor<S>,
    grad: Option<Tensor<S>>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, out: Tensor<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            out,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn output(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].out
    }

    /// Gradient accumulator of a node after `backward`; `None` if nothing was
    /// propagated into it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// A frozen leaf: used in the forward pass, receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::matmul(&self.nodes[a.0].out, &self.nodes[b.0].out)?;
        out.check_finite("matmul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul { a, b }, out, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = tensor::transpose(&self.nodes[a.0].out);
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose { a }, out, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::add(&self.nodes[a.0].out, &self.nodes[b.0].out)?;
        out.check_finite("add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b }, out, rg))
    }

    /// Broadcast-add a vector over every row of a matrix (bias add).
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::add_row(&self.nodes[a.0].out, &self.nodes[b.0].out)?;
        out.check_finite("add_row")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::AddRow { a, b }, out, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::mul(&self.nodes[a.0].out, &self.nodes[b.0].out)?;
        out.check_finite("mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul { a, b }, out, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        let out = tensor::scale(&self.nodes[a.0].out, c);
        out.check_finite("scale")?;
        let rg = self.rg(a);
        Ok(self.push(Op::Scale { a, c }, out, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(tensor::sum(&self.nodes[a.0].out));
        out.check_finite("sum")?;
        let rg = self.rg(a);
        Ok(self.push(Op::Sum { a }, out, rg))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: S) -> Result<NodeId> {
        let (out, means, inv_stds) = tensor::layer_norm(
            &self.nodes[x.0].out,
            &self.nodes[gain.0].out,
            &self.nodes[bias.0].out,
            eps,
        )?;
        out.check_finite("layer_norm")?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                inv_stds,
            },
            out,
            rg,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = tensor::gelu(&self.nodes[x.0].out);
        out.check_finite("gelu")?;
        let rg = self.rg(x);
        Ok(self.push(Op::Gelu { x }, out, rg))
    }

    pub fn masked_softmax(&mut self, x: NodeId, mask: Option<Arc<Vec<bool>>>) -> Result<NodeId> {
        let out = tensor::masked_softmax(&self.nodes[x.0].out, mask.as_deref().map(|m| &m[..]));
        out.check_finite("masked_softmax")?;
        let rg = self.rg(x);
        Ok(self.push(Op::MaskedSoftmax { x }, out, rg))
    }

    /// Extracts one row of a matrix as a 1 x C row matrix (EOS pooling).
    pub fn row_select(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let src = &self.nodes[x.0].out;
        if row >= src.rows() {
            return Err(Error::ShapeMismatch {
                op: "row_select",
                lhs: src.shape().to_vec(),
                rhs: vec![row],
            });
        }
        let out = Tensor::from_vec(&[1, src.cols()], src.row(row).to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(Op::RowSelect { x, row }, out, rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = &self.nodes[x.0].out;
        if start + len > src.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: src.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = src.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(&[rows, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start, len }, out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.nodes[parts[0].0].out.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].out.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let t = &self.nodes[p.0].out;
                if t.rows() != rows {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        lhs: vec![rows],
                        rhs: t.shape().to_vec(),
                    });
                }
                data.extend_from_slice(t.row(r));
            }
        }
        let out = Tensor::from_vec(&[rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
            rg,
        ))
    }

    /// Stacks 1-D vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.nodes[parts[0].0].out.numel();
        let mut data = Vec::with_capacity(parts.len() * cols);
        for p in parts {
            let t = &self.nodes[p.0].out;
            if t.numel() != cols {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![cols],
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(&[parts.len(), cols], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::StackRows {
                parts: parts.to_vec(),
            },
            out,
            rg,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, norms) = tensor::l2_normalize_rows(&self.nodes[x.0].out)?;
        out.check_finite("l2_normalize_rows")?;
        let rg = self.rg(x);
        Ok(self.push(Op::L2NormRows { x, norms }, out, rg))
    }

    /// Assembles the resolved token-embedding matrix of one query: row `c` is
    /// the source table row plus positional row `c`. Pretrained rows come from
    /// the frozen table captured by value; learnable/context rows from the
    /// given nodes, which receive scatter-added gradients.
    pub fn embed_sequence(
        &mut self,
        learnable: NodeId,
        context: Option<NodeId>,
        pretrained: Arc<Tensor<S>>,
        positional: Arc<Tensor<S>>,
        rows: &[RowSource],
    ) -> Result<NodeId> {
        let f = pretrained.cols();
        if positional.cols() != f || rows.len() > positional.rows() {
            return Err(Error::ShapeMismatch {
                op: "embed_sequence",
                lhs: positional.shape().to_vec(),
                rhs: vec![rows.len(), f],
            });
        }
        let el = &self.nodes[learnable.0].out;
        let mut data = Vec::with_capacity(rows.len() * f);
        for (c, src) in rows.iter().enumerate() {
            let row: &[S] = match *src {
                RowSource::Pretrained(r) => pretrained.row(r),
                RowSource::Learnable(r) => el.row(r),
                RowSource::Context(r) => {
                    let ctx = context.ok_or(Error::InvalidConfig(
                        "context slot used without a context table".into(),
                    ))?;
                    self.nodes[ctx.0].out.row(r)
                }
            };
            let pos = positional.row(c);
            data.extend(row.iter().zip(pos).map(|(&a, &b)| a + b));
        }
        let out = Tensor::from_vec(&[rows.len(), f], data)?;
        out.check_finite("embed_sequence")?;
        let rg = self.rg(learnable) || context.map(|c| self.rg(c)).unwrap_or(false);
        Ok(self.push(
            Op::EmbedSequence {
                learnable,
                context,
                rows: rows.to_vec(),
            },
            out,
            rg,
        ))
    }

    /// Mean over the batch of -log softmax(logits)[target], log-sum-exp
    /// stabilized.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let z = &self.nodes[logits.0].out;
        let (b, c) = (z.rows(), z.cols());
        if targets.len() != b {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: z.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= c {
                return Err(Error::TargetOutOfRange {
                    target: t,
                    classes: c,
                });
            }
        }
        let lse = tensor::log_sum_exp_rows(z);
        let probs = tensor::masked_softmax(z, None);
        let mut loss = S::ZERO;
        for r in 0..b {
            loss += lse[r] - z.at(r, targets[r]);
        }
        loss = loss / S::from_f64(b as f64);
        let out = Tensor::scalar(loss);
        out.check_finite("softmax_cross_entropy")?;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            out,
            rg,
        ))
    }

    /// Mean over all (row, class) pairs of the stable binary cross-entropy
    /// between sigmoid(logit) and the 0/1 membership target.
    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: Arc<Tensor<S>>) -> Result<NodeId> {
        let z = &self.nodes[logits.0].out;
        if z.shape() != targets.shape() {
            return Err(Error::ShapeMismatch {
                op: "sigmoid_bce",
                lhs: z.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let mut loss = S::ZERO;
        for (&zi, &yi) in z.data().iter().zip(targets.data()) {
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            loss += zi.max_val(S::ZERO) - zi * yi + (S::ONE + (-zi.abs()).exp()).ln();
        }
        loss = loss / S::from_f64(z.numel() as f64);
        let out = Tensor::scalar(loss);
        out.check_finite("sigmoid_bce")?;
        let rg = self.rg(logits);
        Ok(self.push(Op::SigmoidBce { logits, targets }, out, rg))
    }

    /// Reverse sweep from a scalar loss. Gradient accumulators are reset
    /// first, so repeated calls do not double-count; cached forward outputs
    /// are never touched.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_out = &self.nodes[loss.0].out;
        if !loss_out.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss_out.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::filled(self.nodes[loss.0].out.shape(), S::ONE));
        for id in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &mut rest[0];
            let Some(g) = node.grad.take() else { continue };
            Self::backprop(&node.op, &node.out, &g, before)?;
            node.grad = Some(g);
        }
        Ok(())
    }

    /// Runs backward from `loss` and returns the gradient for each requested
    /// node. Nodes that are not ancestors of the loss get a zero tensor of
    /// their output shape.
    pub fn gradients(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor<S>>> {
        self.backward(loss)?;
        Ok(wrt
            .iter()
            .map(|&id| match &self.nodes[id.0].grad {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.nodes[id.0].out.shape()),
            })
            .collect())
    }

    fn accumulate(nodes: &mut [Node<S>], id: NodeId, add: impl FnOnce(&mut Tensor<S>)) {
        if !nodes[id.0].requires_grad {
            return;
        }
        let shape = nodes[id.0].out.shape().to_vec();
        let slot = nodes[id.0].grad.get_or_insert_with(|| Tensor::zeros(&shape));
        add(slot);
    }

    fn backprop(op: &Op<S>, out: &Tensor<S>, g: &Tensor<S>, nodes: &mut [Node<S>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let da = tensor::matmul_nt(g, &nodes[b.0].out)?;
                let db = tensor::matmul_tn(&nodes[a.0].out, g)?;
                Self::accumulate(nodes, *a, |t| t.add_assign(&da));
                Self::accumulate(nodes, *b, |t| t.add_assign(&db));
            }
            Op::Transpose { a } => {
                let da = tensor::transpose(g);
                Self::accumulate(nodes, *a, |t| t.add_assign(&da));
            }
            Op::Add { a, b } => {
                Self::accumulate(nodes, *a, |t| t.add_assign(g));
                Self::accumulate(nodes, *b, |t| t.add_assign(g));
            }
            Op::AddRow { a, b } => {
                Self::accumulate(nodes, *a, |t| t.add_assign(g));
                let cols = g.cols();
                Self::accumulate(nodes, *b, |t| {
                    for r in 0..g.rows() {
                        let grow = g.row(r);
                        for j in 0..cols {
                            t.data_mut()[j] += grow[j];
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let bv = nodes[b.0].out.clone();
                let av = nodes[a.0].out.clone();
                Self::accumulate(nodes, *a, |t| {
                    for ((d, &gv), &b) in t.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gv * b;
                    }
                });
                Self::accumulate(nodes, *b, |t| {
                    for ((d, &gv), &a) in t.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gv * a;
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                Self::accumulate(nodes, *a, |t| {
                    for (d, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * c;
                    }
                });
            }
            Op::Sum { a } => {
                let gv = g.scalar_value();
                Self::accumulate(nodes, *a, |t| {
                    for d in t.data_mut() {
                        *d += gv;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                inv_stds,
            } => {
                let xin = &nodes[x.0].out;
                let gn = &nodes[gain.0].out;
                let f = xin.cols();
                let nf = S::from_f64(f as f64);
                let rows = xin.rows();
                let mut dx = Tensor::zeros(xin.shape());
                let mut dgain = Tensor::zeros(gn.shape());
                let mut dbias = Tensor::zeros(gn.shape());
                for r in 0..rows {
                    let xrow = xin.row(r);
                    let grow = g.row(r);
                    let (mean, inv_std) = (means[r], inv_stds[r]);
                    let mut m1 = S::ZERO;
                    let mut m2 = S::ZERO;
                    for j in 0..f {
                        let xhat = (xrow[j] - mean) * inv_std;
                        let ghat = grow[j] * gn.data()[j];
                        m1 += ghat;
                        m2 += ghat * xhat;
                        dgain.data_mut()[j] += grow[j] * xhat;
                        dbias.data_mut()[j] += grow[j];
                    }
                    m1 = m1 / nf;
                    m2 = m2 / nf;
                    let drow = dx.row_mut(r);
                    for j in 0..f {
                        let xhat = (xrow[j] - mean) * inv_std;
                        let ghat = grow[j] * gn.data()[j];
                        drow[j] = inv_std * (ghat - m1 - xhat * m2);
                    }
                }
                Self::accumulate(nodes, *x, |t| t.add_assign(&dx));
                Self::accumulate(nodes, *gain, |t| t.add_assign(&dgain));
                Self::accumulate(nodes, *bias, |t| t.add_assign(&dbias));
            }
            Op::Gelu { x } => {
                let xin = nodes[x.0].out.clone();
                Self::accumulate(nodes, *x, |t| {
                    for ((d, &gv), &xv) in t.data_mut().iter_mut().zip(g.data()).zip(xin.data()) {
                        *d += gv * tensor::gelu_derivative(xv);
                    }
                });
            }
            Op::MaskedSoftmax { x } => {
                let (rows, cols) = (out.rows(), out.cols());
                let mut dx = Tensor::zeros(out.shape());
                for r in 0..rows {
                    let p = out.row(r);
                    let grow = g.row(r);
                    let mut dot = S::ZERO;
                    for j in 0..cols {
                        dot += grow[j] * p[j];
                    }
                    let drow = dx.row_mut(r);
                    for j in 0..cols {
                        drow[j] = p[j] * (grow[j] - dot);
                    }
                }
                Self::accumulate(nodes, *x, |t| t.add_assign(&dx));
            }
            Op::RowSelect { x, row } => {
                let (row, cols) = (*row, g.numel());
                Self::accumulate(nodes, *x, |t| {
                    let dst = t.row_mut(row);
                    for j in 0..cols {
                        dst[j] += g.data()[j];
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let (start, len) = (*start, *len);
                Self::accumulate(nodes, *x, |t| {
                    for r in 0..g.rows() {
                        let grow = g.row(r);
                        let dst = &mut t.row_mut(r)[start..start + len];
                        for j in 0..len {
                            dst[j] += grow[j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let mut start = 0;
                for p in parts {
                    let w = nodes[p.0].out.cols();
                    Self::accumulate(nodes, *p, |t| {
                        for r in 0..g.rows() {
                            let grow = &g.row(r)[start..start + w];
                            let dst = t.row_mut(r);
                            for j in 0..w {
                                dst[j] += grow[j];
                            }
                        }
                    });
                    start += w;
                }
            }
            Op::StackRows { parts } => {
                for (k, p) in parts.iter().enumerate() {
                    let grow = g.row(k);
                    Self::accumulate(nodes, *p, |t| {
                        for (d, &gv) in t.data_mut().iter_mut().zip(grow) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::L2NormRows { x, norms } => {
                let (rows, cols) = (out.rows(), out.cols());
                let mut dx = Tensor::zeros(out.shape());
                for r in 0..rows {
                    let y = out.row(r);
                    let grow = g.row(r);
                    let mut dot = S::ZERO;
                    for j in 0..cols {
                        dot += y[j] * grow[j];
                    }
                    let drow = dx.row_mut(r);
                    for j in 0..cols {
                        drow[j] = (grow[j] - y[j] * dot) / norms[r];
                    }
                }
                Self::accumulate(nodes, *x, |t| t.add_assign(&dx));
            }
            Op::EmbedSequence {
                learnable,
                context,
                rows,
            } => {
                for (c, src) in rows.iter().enumerate() {
                    let grow = g.row(c);
                    match *src {
                        RowSource::Pretrained(_) => {} // gradients blocked at the lookup
                        RowSource::Learnable(r) => {
                            Self::accumulate(nodes, *learnable, |t| {
                                let dst = t.row_mut(r);
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d += gv;
                                }
                            });
                        }
                        RowSource::Context(r) => {
                            if let Some(ctx) = context {
                                Self::accumulate(nodes, *ctx, |t| {
                                    let dst = t.row_mut(r);
                                    for (d, &gv) in dst.iter_mut().zip(grow) {
                                        *d += gv;
                                    }
                                });
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gv = g.scalar_value();
                let b = S::from_f64(targets.len() as f64);
                let cols = probs.cols();
                Self::accumulate(nodes, *logits, |t| {
                    for (r, &tgt) in targets.iter().enumerate() {
                        let prow = probs.row(r);
                        let drow = t.row_mut(r);
                        for j in 0..cols {
                            let ind = if j == tgt { S::ONE } else { S::ZERO };
                            drow[j] += gv * (prow[j] - ind) / b;
                        }
                    }
                });
            }
            Op::SigmoidBce { logits, targets } => {
                let gv = g.scalar_value();
                let zt = nodes[logits.0].out.clone();
                let n = S::from_f64(zt.numel() as f64);
                let targets = Arc::clone(targets);
                Self::accumulate(nodes, *logits, |t| {
                    for ((d, &z), &y) in t.data_mut().iter_mut().zip(zt.data()).zip(targets.data())
                    {
                        let s = if z >= S::ZERO {
                            S::ONE / (S::ONE + (-z).exp())
                        } else {
                            let e = z.exp();
                            e / (S::ONE + e)
                        };
                        *d += gv * (s - y) / n;
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_of_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[1, 1], vec![3.0f64]).unwrap());
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap());
        assert!(matches!(
            g.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn non_ancestor_gradient_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap());
        let unused = g.param(Tensor::from_vec(&[3], vec![0.0f64; 3]).unwrap());
        let loss = g.sum(x).unwrap();
        let grads = g.gradients(loss, &[x, unused]).unwrap();
        assert_eq!(grads[0].data(), &[1.0, 1.0]);
        assert_eq!(grads[1].data(), &[0.0; 3]);
    }

    #[test]
    fn constant_loss_all_zero() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap());
        let p = g.param(Tensor::from_vec(&[2], vec![0.5f64, 0.5]).unwrap());
        let loss = g.sum(c).unwrap();
        let grads = g.gradients(loss, &[p]).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_symmetric_logits() {
        let mut g = Graph::new();
        let z = g.param(Tensor::from_vec(&[1, 2], vec![0.0f64, 0.0]).unwrap());
        let loss = g.softmax_cross_entropy(z, &[0]).unwrap();
        let v = g.output(loss).scalar_value();
        assert!((v - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_closed_form() {
        let mut g = Graph::new();
        let z = g.param(Tensor::from_vec(&[1, 2], vec![2.0f64, 0.0]).unwrap());
        let loss = g.softmax_cross_entropy(z, &[0]).unwrap();
        let v = g.output(loss).scalar_value();
        assert!((v - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_no_overflow() {
        let mut g = Graph::new();
        let z = g.param(Tensor::from_vec(&[1, 2], vec![0.0f64, 1000.0]).unwrap());
        let loss = g.softmax_cross_entropy(z, &[1]).unwrap();
        let v = g.output(loss).scalar_value();
        assert!(v.is_finite());
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g = Graph::new();
        let z = g.param(Tensor::from_vec(&[1, 2], vec![0.0f64, 0.0]).unwrap());
        assert!(matches!(
            g.softmax_cross_entropy(z, &[2]),
            Err(Error::TargetOutOfRange {
                target: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn cross_entropy_uniform_equals_ln_c() {
        for c in [2usize, 3, 7, 16] {
            let mut g = Graph::new();
            let z = g.param(Tensor::from_vec(&[1, c], vec![0.25f64; c]).unwrap());
            let loss = g.softmax_cross_entropy(z, &[c / 2]).unwrap();
            let v = g.output(loss).scalar_value();
            assert!((v - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_does_not_mutate_forward_outputs() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[2, 2], vec![1.0f64, -2.0, 0.5, 3.0]).unwrap());
        let y = g.gelu(x).unwrap();
        let z = g.matmul(y, x).unwrap();
        let loss = g.sum(z).unwrap();
        let snapshot: Vec<Tensor<f64>> = (0..g.len()).map(|i| g.output(NodeId(i)).clone()).collect();
        g.backward(loss).unwrap();
        for (i, t) in snapshot.iter().enumerate() {
            assert_eq!(g.output(NodeId(i)), t);
        }
    }

    #[test]
    fn repeated_backward_does_not_double_count() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 3]);
    }
}
