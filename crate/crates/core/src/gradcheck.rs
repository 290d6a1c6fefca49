//! Central finite-difference verification of analytic gradients, including
//! the end-to-end probe through the frozen encoder to the class table.

use crate::encoder::{encode_class_set_graph, stage_weights, Model};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::head::classification_loss_graph;
use crate::par;
use crate::scalar::Scalar;
use crate::store::LearnableClassEmbeddings;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

/// A scalar loss as a function of one parameter tensor, with its analytic
/// gradient. Implementations must be deterministic.
pub trait LossProbe<S: Scalar>: Sync {
    fn value(&self, params: &Tensor<S>) -> Result<S>;
    fn gradient(&self, params: &Tensor<S>) -> Result<Tensor<S>>;
}

/// Recommended relative tolerance for a scalar width: 1e-4 in 64-bit mode,
/// 1e-2 in 32-bit mode.
pub fn tolerance_for<S: Scalar>() -> f64 {
    if S::BITS >= 64 {
        1e-4
    } else {
        1e-2
    }
}

/// Compares a supplied analytic gradient against central finite differences
/// of `value`, coordinate by coordinate. Returns the max over coordinates of
/// |analytic - fd| / max(|analytic|, |fd|, 1e-12).
///
/// Coordinates are evaluated independently (and in parallel when the
/// `parallel` feature is on); each evaluation perturbs a fresh copy of the
/// parameters.
pub fn finite_difference_error<S: Scalar>(
    value: impl Fn(&Tensor<S>) -> Result<S> + Sync,
    analytic: &Tensor<S>,
    params: &Tensor<S>,
    step: S,
) -> Result<f64> {
    if !(step > S::ZERO) {
        return Err(Error::InvalidConfig("finite-difference step must be > 0".into()));
    }
    if analytic.shape() != params.shape() {
        return Err(Error::ShapeMismatch {
            op: "finite_difference_error",
            lhs: analytic.shape().to_vec(),
            rhs: params.shape().to_vec(),
        });
    }
    let n = params.numel();
    let per_coord: Vec<Result<f64>> = par::map_indexed(n, |i| {
        let mut plus = params.clone();
        plus.data_mut()[i] += step;
        let mut minus = params.clone();
        minus.data_mut()[i] -= step;
        let lp = value(&plus)?;
        let lm = value(&minus)?;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_check",
            });
        }
        let fd = (lp.to_f64() - lm.to_f64()) / (2.0 * step.to_f64());
        let an = analytic.data()[i].to_f64();
        let denom = an.abs().max(fd.abs()).max(1e-12);
        Ok((an - fd).abs() / denom)
    });
    let mut max_err = 0.0f64;
    for r in per_coord {
        max_err = max_err.max(r?);
    }
    Ok(max_err)
}

/// Checks a probe's own analytic gradient against central finite differences
/// of its value.
pub fn finite_difference_check<S: Scalar, P: LossProbe<S>>(
    probe: &P,
    params: &Tensor<S>,
    step: S,
) -> Result<f64> {
    let analytic = probe.gradient(params)?;
    finite_difference_error(|p| probe.value(p), &analytic, params, step)
}

/// The full class-query cross-entropy loss as a function of the learnable
/// class table: image features are fixed, the class queries are re-encoded
/// through the frozen model for every evaluation.
pub struct ClassQueryLoss<S: Scalar> {
    pub model: Model<S>,
    pub queries: Vec<TokenSequence>,
    pub images: Tensor<S>,
    pub targets: Vec<usize>,
    pub m: usize,
}

impl<S: Scalar> ClassQueryLoss<S> {
    fn build(&self, params: &Tensor<S>) -> Result<(Graph<S>, NodeId, NodeId)> {
        let learned = LearnableClassEmbeddings::new(params.clone(), self.m)?;
        let mut g = Graph::new();
        let el = g.param(params.clone());
        let staged = stage_weights(&mut g, &self.model);
        let text = encode_class_set_graph(
            &mut g,
            &self.model,
            &staged,
            el,
            None,
            &self.queries,
            &learned,
            0,
        )?;
        let loss = classification_loss_graph(
            &mut g,
            &self.images,
            text,
            &self.targets,
            self.model.logit_scale,
        )?;
        Ok((g, loss, el))
    }
}

impl<S: Scalar> LossProbe<S> for ClassQueryLoss<S> {
    fn value(&self, params: &Tensor<S>) -> Result<S> {
        let (g, loss, _) = self.build(params)?;
        Ok(g.output(loss).scalar_value())
    }

    fn gradient(&self, params: &Tensor<S>) -> Result<Tensor<S>> {
        let (mut g, loss, el) = self.build(params)?;
        Ok(g.gradients(loss, &[el])?.remove(0))
    }
}

/// Logit scale used by the standard gradcheck probe. At this scale the
/// softmax stays unsaturated, so every coordinate of the analytic gradient
/// is large enough for central differences to resolve; at scale 100 some
/// components land between the 1e-12 floor and f64 difference resolution.
pub const GRADCHECK_LOGIT_SCALE: f64 = 10.0;

/// Builds the standard end-to-end probe (seeded desk-scale model: F=64,
/// L=4, H=4, 8 classes, m=1, a small synthetic batch) and compares the
/// analytic class-table gradient at precision `S` against 64-bit central
/// finite differences. Returns the max relative error; expected below 1e-4
/// for a 64-bit analytic side and below 1e-2 for a 32-bit one.
///
/// The difference quotient always runs in 64-bit: a 32-bit forward pass
/// carries more rounding noise than the quotient can tolerate, so 64-bit
/// mode is reserved for the oracle side of the check.
pub fn run_model_gradcheck<S: Scalar>(seed: u64, step: f64, batch: usize) -> Result<f64> {
    use crate::data::{default_vocabulary, generate_synthetic, SyntheticConfig};
    use crate::encoder::EncoderConfig;
    use crate::store::{generate_model, init_class_embeddings};
    use crate::tokenizer::{find_template, render_query};

    let vocab = default_vocabulary();
    let config = EncoderConfig::desk();
    let mut model32 = generate_model(&config, vocab.len(), seed)?;
    model32.logit_scale = GRADCHECK_LOGIT_SCALE as f32;
    let n_classes = 8;
    let synth = generate_synthetic(
        &SyntheticConfig::classification(n_classes, 2, batch.div_ceil(n_classes).max(1), 0.3, seed),
        &model32,
        &vocab,
    )?;
    let ds = synth.dataset()?;
    let (learned, _) =
        init_class_embeddings(&ds.manifest.class_names(), &vocab, &model32.pretrained, 1)?;
    let template = find_template("default")?;
    let queries: Vec<TokenSequence> = (0..n_classes)
        .map(|c| render_query(&template, c, 1, &vocab, config.context_len))
        .collect::<Result<_>>()?;
    let ids: Vec<u32> = ds.manifest.splits.eval.iter().copied().take(batch).collect();
    let d = ds.features.dim;
    let mut data64 = Vec::with_capacity(ids.len() * d);
    let mut targets = Vec::with_capacity(ids.len());
    for &id in &ids {
        let (feat, label) = ds.classification_sample(id)?;
        data64.extend(feat.iter().map(|&v| v as f64));
        targets.push(label);
    }
    let images64 = Tensor::from_vec(&[ids.len(), d], data64)?;
    let probe64 = ClassQueryLoss {
        model: model32.convert::<f64>(),
        queries: queries.clone(),
        images: images64.convert(),
        targets: targets.clone(),
        m: 1,
    };
    let params64: Tensor<f64> = learned.table().convert();
    let analytic: Tensor<f64> = if S::BITS >= 64 {
        probe64.gradient(&params64)?
    } else {
        let probe = ClassQueryLoss {
            model: model32.convert::<S>(),
            queries,
            images: images64.convert(),
            targets,
            m: 1,
        };
        probe.gradient(&learned.table().convert())?.convert()
    };
    finite_difference_error(|p| probe64.value(p), &analytic, &params64, step)
}
