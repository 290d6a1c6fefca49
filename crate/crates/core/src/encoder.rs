//! Frozen transformer text encoder with EOS pooling.
//!
//! `encode_query` is the plain inference path; `encode_query_graph` records
//! the same computation on a [`Graph`] for training. Both call the same
//! kernels in the same order, so their outputs are bitwise identical.
//!
//! Pre-normalization blocks: x += attn(ln1(x)); x += ffn(ln2(x)); then a
//! final normalization, EOS-row pooling, and the joint-space projection.
//! The output is not length-normalized here; cosine normalization happens in
//! the recognition head.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, RowSource};
use crate::par;
use crate::scalar::Scalar;
use crate::store::{
    resolve_sequence, row_sources, ContextEmbeddings, LearnableClassEmbeddings,
    PretrainedEmbeddings,
};
use crate::tensor::{self, Tensor};
use crate::tokenizer::TokenSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Token embedding width F.
    pub feat_dim: usize,
    /// Joint-space width D.
    pub joint_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Context length C; every rendered query is padded to this length.
    pub context_len: usize,
    pub eps: f64,
    /// Causal attention masking; the padding mask is always applied.
    pub causal: bool,
}

impl EncoderConfig {
    /// Desk-scale defaults: F=64, D=64, L=4, H=4, C=32.
    pub fn desk() -> Self {
        EncoderConfig {
            feat_dim: 64,
            joint_dim: 64,
            layers: 4,
            heads: 4,
            context_len: 32,
            eps: 1e-5,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.feat_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "feat_dim {} must be divisible by heads {}",
                self.feat_dim, self.heads
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidConfig("eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.feat_dim / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights<S> {
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub ffn_w1: Tensor<S>,
    pub ffn_b1: Tensor<S>,
    pub ffn_w2: Tensor<S>,
    pub ffn_b2: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct EncoderWeights<S> {
    pub layers: Vec<LayerWeights<S>>,
    pub final_gain: Tensor<S>,
    pub final_bias: Tensor<S>,
    pub projection: Tensor<S>,
}

/// The whole frozen model: config, embedding tables, encoder weights, and
/// the logit scale.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: EncoderConfig,
    pub pretrained: PretrainedEmbeddings<S>,
    pub weights: EncoderWeights<S>,
    pub logit_scale: S,
}

impl<S: Scalar> Model<S> {
    /// Re-materializes the model at another precision (used to run gradient
    /// checks in 64-bit).
    pub fn convert<T: Scalar>(&self) -> Model<T> {
        let conv_layer = |l: &LayerWeights<S>| LayerWeights {
            ln1_gain: l.ln1_gain.convert(),
            ln1_bias: l.ln1_bias.convert(),
            wq: l.wq.convert(),
            bq: l.bq.convert(),
            wk: l.wk.convert(),
            bk: l.bk.convert(),
            wv: l.wv.convert(),
            bv: l.bv.convert(),
            wo: l.wo.convert(),
            bo: l.bo.convert(),
            ln2_gain: l.ln2_gain.convert(),
            ln2_bias: l.ln2_bias.convert(),
            ffn_w1: l.ffn_w1.convert(),
            ffn_b1: l.ffn_b1.convert(),
            ffn_w2: l.ffn_w2.convert(),
            ffn_b2: l.ffn_b2.convert(),
        };
        Model {
            config: self.config.clone(),
            pretrained: PretrainedEmbeddings {
                table: Arc::new(self.pretrained.table.convert()),
                positional: Arc::new(self.pretrained.positional.convert()),
            },
            weights: EncoderWeights {
                layers: self.weights.layers.iter().map(conv_layer).collect(),
                final_gain: self.weights.final_gain.convert(),
                final_bias: self.weights.final_bias.convert(),
                projection: self.weights.projection.convert(),
            },
            logit_scale: T::from_f64(self.logit_scale.to_f64()),
        }
    }
}

/// Allowed attention positions for one query: a key is visible when it is
/// not padding (k <= eos) and, under causal masking, not in the future.
pub fn attention_mask(context_len: usize, eos_index: usize, causal: bool) -> Vec<bool> {
    let mut mask = vec![false; context_len * context_len];
    for q in 0..context_len {
        for k in 0..context_len {
            let visible = k <= eos_index && (!causal || k <= q);
            mask[q * context_len + k] = visible;
        }
    }
    mask
}

/// Plain forward pass: resolved (C x F) embeddings to the joint-space vector
/// at the EOS position.
pub fn encode_query<S: Scalar>(
    resolved: &Tensor<S>,
    eos_index: usize,
    weights: &EncoderWeights<S>,
    config: &EncoderConfig,
) -> Result<Tensor<S>> {
    let c = resolved.rows();
    if eos_index >= c {
        return Err(Error::ShapeMismatch {
            op: "encode_query",
            lhs: resolved.shape().to_vec(),
            rhs: vec![eos_index],
        });
    }
    let eps = S::from_f64(config.eps);
    let dh = config.head_dim();
    let inv_sqrt_dh = S::from_f64(1.0 / (dh as f64).sqrt());
    let mask = attention_mask(c, eos_index, config.causal);
    let mut x = resolved.clone();
    for lw in &weights.layers {
        let (h, _, _) = tensor::layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias, eps)?;
        let q = tensor::add_row(&tensor::matmul(&h, &lw.wq)?, &lw.bq)?;
        let k = tensor::add_row(&tensor::matmul(&h, &lw.wk)?, &lw.bk)?;
        let v = tensor::add_row(&tensor::matmul(&h, &lw.wv)?, &lw.bv)?;
        let mut head_outs = Vec::with_capacity(config.heads);
        for head in 0..config.heads {
            let start = head * dh;
            let qh = slice_cols(&q, start, dh);
            let kh = slice_cols(&k, start, dh);
            let vh = slice_cols(&v, start, dh);
            let scores = tensor::scale(&tensor::matmul(&qh, &tensor::transpose(&kh))?, inv_sqrt_dh);
            let probs = tensor::masked_softmax(&scores, Some(&mask));
            head_outs.push(tensor::matmul(&probs, &vh)?);
        }
        let ctx = concat_cols(&head_outs);
        let attn = tensor::add_row(&tensor::matmul(&ctx, &lw.wo)?, &lw.bo)?;
        x = tensor::add(&x, &attn)?;
        let (h2, _, _) = tensor::layer_norm(&x, &lw.ln2_gain, &lw.ln2_bias, eps)?;
        let f1 = tensor::gelu(&tensor::add_row(&tensor::matmul(&h2, &lw.ffn_w1)?, &lw.ffn_b1)?);
        let f2 = tensor::add_row(&tensor::matmul(&f1, &lw.ffn_w2)?, &lw.ffn_b2)?;
        x = tensor::add(&x, &f2)?;
    }
    let (y, _, _) = tensor::layer_norm(&x, &weights.final_gain, &weights.final_bias, eps)?;
    let pooled = Tensor::from_vec(&[y.cols()], y.row(eos_index).to_vec())?;
    let out = tensor::matmul(&pooled, &weights.projection)?;
    out.check_finite("encode_query")?;
    Tensor::from_vec(&[out.numel()], out.data().to_vec())
}

fn slice_cols<S: Scalar>(t: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let rows = t.rows();
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&t.row(r)[start..start + len]);
    }
    Tensor::from_vec(&[rows, len], data).expect("slice shape")
}

fn concat_cols<S: Scalar>(parts: &[Tensor<S>]) -> Tensor<S> {
    let rows = parts[0].rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::from_vec(&[rows, total], data).expect("concat shape")
}

/// Resolves and encodes one rendered query through the frozen model.
pub fn encode_sequence<S: Scalar>(
    model: &Model<S>,
    seq: &TokenSequence,
    learned: &LearnableClassEmbeddings<S>,
    context: Option<&ContextEmbeddings<S>>,
) -> Result<Tensor<S>> {
    let resolved = resolve_sequence(seq, &model.pretrained, learned, context)?;
    encode_query(&resolved, seq.eos_index(), &model.weights, &model.config)
}

/// Encodes a whole query set; row q is `encode_sequence(queries[q])`
/// bitwise (queries never interact). Fans out over queries when the
/// `parallel` feature is enabled.
pub fn encode_class_set<S: Scalar>(
    queries: &[TokenSequence],
    model: &Model<S>,
    learned: &LearnableClassEmbeddings<S>,
    context: Option<&ContextEmbeddings<S>>,
) -> Result<Tensor<S>> {
    let results = par::map_slice(queries, |q| encode_sequence(model, q, learned, context));
    let mut rows = Vec::with_capacity(queries.len());
    for r in results {
        rows.push(r?);
    }
    let d = rows.first().map(|t| t.numel()).unwrap_or(model.config.joint_dim);
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in &rows {
        data.extend_from_slice(r.data());
    }
    Tensor::from_vec(&[rows.len(), d], data)
}

/// Constant nodes for the frozen encoder weights, staged once per graph and
/// shared by every query encoded on it.
pub struct GraphWeights {
    layers: Vec<GraphLayer>,
    final_gain: NodeId,
    final_bias: NodeId,
    projection: NodeId,
}

struct GraphLayer {
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
    ffn_w1: NodeId,
    ffn_b1: NodeId,
    ffn_w2: NodeId,
    ffn_b2: NodeId,
}

pub fn stage_weights<S: Scalar>(g: &mut Graph<S>, model: &Model<S>) -> GraphWeights {
    let layers = model
        .weights
        .layers
        .iter()
        .map(|lw| GraphLayer {
            ln1_gain: g.constant(lw.ln1_gain.clone()),
            ln1_bias: g.constant(lw.ln1_bias.clone()),
            wq: g.constant(lw.wq.clone()),
            bq: g.constant(lw.bq.clone()),
            wk: g.constant(lw.wk.clone()),
            bk: g.constant(lw.bk.clone()),
            wv: g.constant(lw.wv.clone()),
            bv: g.constant(lw.bv.clone()),
            wo: g.constant(lw.wo.clone()),
            bo: g.constant(lw.bo.clone()),
            ln2_gain: g.constant(lw.ln2_gain.clone()),
            ln2_bias: g.constant(lw.ln2_bias.clone()),
            ffn_w1: g.constant(lw.ffn_w1.clone()),
            ffn_b1: g.constant(lw.ffn_b1.clone()),
            ffn_w2: g.constant(lw.ffn_w2.clone()),
            ffn_b2: g.constant(lw.ffn_b2.clone()),
        })
        .collect();
    GraphWeights {
        layers,
        final_gain: g.constant(model.weights.final_gain.clone()),
        final_bias: g.constant(model.weights.final_bias.clone()),
        projection: g.constant(model.weights.projection.clone()),
    }
}

/// Graph-recorded forward pass of one query; mirrors `encode_query` exactly.
/// Gradients flow back to the learnable (and context) table nodes through
/// `embed_sequence`; the pretrained rows are captured as constants.
pub fn encode_query_graph<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    staged: &GraphWeights,
    el_node: NodeId,
    ctx_node: Option<NodeId>,
    seq: &TokenSequence,
    sources: &[RowSource],
) -> Result<NodeId> {
    let config = &model.config;
    let c = seq.len();
    let eps = S::from_f64(config.eps);
    let dh = config.head_dim();
    let inv_sqrt_dh = S::from_f64(1.0 / (dh as f64).sqrt());
    let mask = Arc::new(attention_mask(c, seq.eos_index(), config.causal));
    let mut x = g.embed_sequence(
        el_node,
        ctx_node,
        Arc::clone(&model.pretrained.table),
        Arc::clone(&model.pretrained.positional),
        sources,
    )?;
    for lw in &staged.layers {
        let h = g.layer_norm(x, lw.ln1_gain, lw.ln1_bias, eps)?;
        let q0 = g.matmul(h, lw.wq)?;
        let q = g.add_row(q0, lw.bq)?;
        let k0 = g.matmul(h, lw.wk)?;
        let k = g.add_row(k0, lw.bk)?;
        let v0 = g.matmul(h, lw.wv)?;
        let v = g.add_row(v0, lw.bv)?;
        let mut head_outs = Vec::with_capacity(config.heads);
        for head in 0..config.heads {
            let start = head * dh;
            let qh = g.slice_cols(q, start, dh)?;
            let kh = g.slice_cols(k, start, dh)?;
            let vh = g.slice_cols(v, start, dh)?;
            let kt = g.transpose(kh)?;
            let s0 = g.matmul(qh, kt)?;
            let scores = g.scale(s0, inv_sqrt_dh)?;
            let probs = g.masked_softmax(scores, Some(Arc::clone(&mask)))?;
            head_outs.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat_cols(&head_outs)?;
        let a0 = g.matmul(ctx, lw.wo)?;
        let attn = g.add_row(a0, lw.bo)?;
        x = g.add(x, attn)?;
        let h2 = g.layer_norm(x, lw.ln2_gain, lw.ln2_bias, eps)?;
        let f0 = g.matmul(h2, lw.ffn_w1)?;
        let f1p = g.add_row(f0, lw.ffn_b1)?;
        let f1 = g.gelu(f1p)?;
        let f20 = g.matmul(f1, lw.ffn_w2)?;
        let f2 = g.add_row(f20, lw.ffn_b2)?;
        x = g.add(x, f2)?;
    }
    let y = g.layer_norm(x, staged.final_gain, staged.final_bias, eps)?;
    let pooled = g.row_select(y, seq.eos_index())?;
    g.matmul(pooled, staged.projection)
}

/// Resolves sources and encodes a set of queries on one graph, returning the
/// stacked (N_q x D) feature node.
pub fn encode_class_set_graph<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    staged: &GraphWeights,
    el_node: NodeId,
    ctx_node: Option<NodeId>,
    queries: &[TokenSequence],
    learned: &LearnableClassEmbeddings<S>,
    context_rows: usize,
) -> Result<NodeId> {
    let mut feats = Vec::with_capacity(queries.len());
    for seq in queries {
        let sources = row_sources(seq, learned, context_rows)?;
        feats.push(encode_query_graph(
            g, model, staged, el_node, ctx_node, seq, &sources,
        )?);
    }
    g.stack_rows(&feats)
}
