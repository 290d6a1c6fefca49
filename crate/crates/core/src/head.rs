//! Cosine-similarity recognition head: classification over image features,
//! multi-label region scoring, and ranking metrics.
//!
//! Every (feature, query) logit is computed as an independent dot product of
//! the L2-normalized vectors, so scores for one query column never depend on
//! which other queries are present in the set.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// logit_scale * cosine(image_b, text_q) for every pair; rejects zero-norm
/// rows on either side.
pub fn cosine_logits<S: Scalar>(
    image_feats: &Tensor<S>,
    text_feats: &Tensor<S>,
    logit_scale: S,
) -> Result<Tensor<S>> {
    if image_feats.cols() != text_feats.cols() {
        return Err(Error::ShapeMismatch {
            op: "cosine_logits",
            lhs: image_feats.shape().to_vec(),
            rhs: text_feats.shape().to_vec(),
        });
    }
    let (img_n, _) = tensor::l2_normalize_rows(image_feats)?;
    let (txt_n, _) = tensor::l2_normalize_rows(text_feats)?;
    let dots = tensor::matmul_nt(&img_n, &txt_n)?;
    let out = tensor::scale(&dots, logit_scale);
    out.check_finite("cosine_logits")?;
    Ok(out)
}

/// Predicted class index plus softmax probabilities per row. Ties break to
/// the lowest index.
pub fn classify<S: Scalar>(
    image_feats: &Tensor<S>,
    text_feats: &Tensor<S>,
    logit_scale: S,
) -> Result<(Vec<usize>, Tensor<S>)> {
    let logits = cosine_logits(image_feats, text_feats, logit_scale)?;
    let probs = tensor::masked_softmax(&logits, None);
    let preds = argmax_rows(&logits);
    Ok((preds, probs))
}

pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Graph version of `cosine_logits`: image features enter as a constant,
/// text features as the differentiable node.
pub fn cosine_logits_graph<S: Scalar>(
    g: &mut Graph<S>,
    image_feats: &Tensor<S>,
    text_node: NodeId,
    logit_scale: S,
) -> Result<NodeId> {
    let img = g.constant(image_feats.clone());
    let img_n = g.l2_normalize_rows(img)?;
    let txt_n = g.l2_normalize_rows(text_node)?;
    let txt_t = g.transpose(txt_n)?;
    let dots = g.matmul(img_n, txt_t)?;
    g.scale(dots, logit_scale)
}

/// Cross-entropy classification loss over cosine logits, differentiable
/// w.r.t. the text features.
pub fn classification_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    image_feats: &Tensor<S>,
    text_node: NodeId,
    targets: &[usize],
    logit_scale: S,
) -> Result<NodeId> {
    let logits = cosine_logits_graph(g, image_feats, text_node, logit_scale)?;
    g.softmax_cross_entropy(logits, targets)
}

/// Per-region feature rows with multi-label ground truth (empty set =
/// background). Label ids index the active query columns.
#[derive(Clone, Debug)]
pub struct RegionBatch<S> {
    pub features: Tensor<S>,
    pub labels: Vec<Vec<usize>>,
}

impl<S: Scalar> RegionBatch<S> {
    pub fn membership_targets(&self, n_classes: usize) -> Result<Tensor<S>> {
        let rows = self.features.rows();
        if self.labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "membership_targets",
                lhs: vec![rows],
                rhs: vec![self.labels.len()],
            });
        }
        let mut t = Tensor::zeros(&[rows, n_classes]);
        for (r, labels) in self.labels.iter().enumerate() {
            for &c in labels {
                if c >= n_classes {
                    return Err(Error::UnknownClass(c));
                }
                t.row_mut(r)[c] = S::ONE;
            }
        }
        Ok(t)
    }
}

/// Independent per-class sigmoid BCE over cosine logits (classes do not
/// compete); background regions contribute all-negative rows. Mean over
/// (region, class) pairs.
pub fn region_multilabel_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    regions: &RegionBatch<S>,
    text_node: NodeId,
    logit_scale: S,
) -> Result<NodeId> {
    let n_classes = g.output(text_node).rows();
    let targets = regions.membership_targets(n_classes)?;
    let logits = cosine_logits_graph(g, &regions.features, text_node, logit_scale)?;
    g.sigmoid_bce(logits, Arc::new(targets))
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

/// Class-frequency groups by training-sample count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrequencyGroup {
    /// x > 100
    Frequent,
    /// 100 >= x > 10
    Common,
    /// 10 >= x >= 1
    Rare,
}

pub fn frequency_group(count: u64) -> FrequencyGroup {
    if count > 100 {
        FrequencyGroup::Frequent
    } else if count > 10 {
        FrequencyGroup::Common
    } else {
        FrequencyGroup::Rare
    }
}

/// Per-class average precision over score-ranked regions: area under the
/// step-wise precision-recall curve (all thresholds, no smoothing). Ranking
/// ties break by ascending region index. Classes with no positive region get
/// `None` and are excluded from macro averages.
pub fn per_class_average_precision<S: Scalar>(
    scores: &Tensor<S>,
    positives: &[Vec<usize>],
) -> Vec<Option<f64>> {
    let (rows, cols) = (scores.rows(), scores.cols());
    debug_assert_eq!(rows, positives.len());
    let mut truth = vec![vec![false; cols]; rows];
    for (r, labels) in positives.iter().enumerate() {
        for &c in labels {
            truth[r][c] = true;
        }
    }
    (0..cols)
        .map(|c| {
            let total_pos = truth.iter().filter(|t| t[c]).count();
            if total_pos == 0 {
                return None;
            }
            let mut order: Vec<usize> = (0..rows).collect();
            order.sort_by(|&a, &b| {
                scores
                    .at(b, c)
                    .partial_cmp(&scores.at(a, c))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut tp = 0usize;
            let mut ap = 0.0f64;
            for (rank, &r) in order.iter().enumerate() {
                if truth[r][c] {
                    tp += 1;
                    ap += tp as f64 / (rank + 1) as f64;
                }
            }
            Some(ap / total_pos as f64)
        })
        .collect()
}

/// Macro averages over {all, frequent, common, rare}; a group absent from
/// the class list (or with every class undefined) reports `None`.
#[derive(Clone, Debug, Default)]
pub struct ApReport {
    pub per_class: Vec<Option<f64>>,
    pub all: Option<f64>,
    pub frequent: Option<f64>,
    pub common: Option<f64>,
    pub rare: Option<f64>,
    /// Classes excluded from the macro average for having no positives.
    pub excluded: Vec<usize>,
}

pub fn macro_average_precision(per_class: &[Option<f64>], counts: &[u64]) -> ApReport {
    debug_assert_eq!(per_class.len(), counts.len());
    let mean_of = |pred: &dyn Fn(usize) -> bool| -> Option<f64> {
        let vals: Vec<f64> = per_class
            .iter()
            .enumerate()
            .filter(|(i, v)| pred(*i) && v.is_some())
            .map(|(_, v)| v.unwrap())
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    ApReport {
        per_class: per_class.to_vec(),
        all: mean_of(&|_| true),
        frequent: mean_of(&|i| frequency_group(counts[i]) == FrequencyGroup::Frequent),
        common: mean_of(&|i| frequency_group(counts[i]) == FrequencyGroup::Common),
        rare: mean_of(&|i| frequency_group(counts[i]) == FrequencyGroup::Rare),
        excluded: per_class
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| i)
            .collect(),
    }
}
