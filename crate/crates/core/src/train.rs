//! Optimizer, learning-rate schedule, samplers, and the four adaptation
//! protocols, plus the optional learnable-context mode.
//!
//! One protocol run is the single writer of its class table; updates are
//! applied between forward passes, never during one. Independent seed runs
//! execute in parallel on separate stores and are bitwise deterministic
//! given (config, seed, data).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetMode, MetricsReport, SeedMetrics};
use crate::encoder::{encode_class_set, encode_class_set_graph, stage_weights, Model};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::{
    argmax_rows, classification_loss_graph, cosine_logits, macro_average_precision,
    per_class_average_precision, region_multilabel_loss_graph, ApReport, RegionBatch,
};
use crate::par;
use crate::store::{init_class_embeddings, ContextEmbeddings, LearnableClassEmbeddings};
use crate::tensor::Tensor;
use crate::tokenizer::{
    find_template, render_context_query, render_named_query, render_query, SeqItem,
    TokenSequence, Vocabulary,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSlots {
    /// Class-name inversion: per-class rows of the class table.
    Class,
    /// Prompt-context learning: shared context slots, handcrafted names.
    Context,
    /// Both parameter sets at once.
    Both,
}

/// What the stage-2 loss scores against in sequential adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequentialDenominator {
    /// Stage-2 classes compete with every class; stage-1 rows sit in the
    /// denominator as frozen columns (they receive gradients that the
    /// optimizer discards), so new embeddings calibrate against the old
    /// ones while the old rows stay bitwise intact.
    AllClasses,
    /// Stage-2 classes compete only among themselves. Cross-stage score
    /// calibration is then unconstrained.
    Stage2Only,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Word embeddings learned per class.
    pub m: usize,
    pub mode: DatasetMode,
    pub trainable: TrainableSlots,
    /// Training images sampled per class (classification mode).
    pub shots: usize,
    /// Shared context slots when `trainable` involves the context.
    pub n_ctx: usize,
    /// Stage-2 loss denominator for sequential adaptation.
    pub sequential_denominator: SequentialDenominator,
    /// Balanced subsample fraction of the training set (region mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_fraction: Option<f64>,
}

impl TrainConfig {
    /// Classification protocol defaults: batch 32, 200 epochs, SGD momentum
    /// 0.9 at lr 2e-4, cosine schedule with one warmup epoch, 16-shot, m=1.
    pub fn classification() -> Self {
        TrainConfig {
            base_lr: 2e-4,
            epochs: 200,
            warmup_epochs: 1,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
            m: 1,
            mode: DatasetMode::Classification,
            trainable: TrainableSlots::Class,
            shots: 16,
            n_ctx: 4,
            sequential_denominator: SequentialDenominator::AllClasses,
            subsample_fraction: None,
        }
    }

    /// Region-mode defaults: lr 1e-2 over 20 epochs, otherwise as above.
    pub fn region() -> Self {
        TrainConfig {
            base_lr: 1e-2,
            epochs: 20,
            mode: DatasetMode::Region,
            ..Self::classification()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::InvalidConfig("base_lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be > 0".into()));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be >= 1".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::WarmupTooLong {
                warmup: self.warmup_epochs,
                total: self.epochs,
            });
        }
        if let Some(f) = self.subsample_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidConfig(
                    "subsample_fraction must be in (0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Schedule and optimizer
// ---------------------------------------------------------------------------

/// Linear warmup from base_lr/warmup_steps up to base_lr at the last warmup
/// step, then cosine decay: base_lr * 0.5 * (1 + cos(pi * progress)) where
/// progress spans the post-warmup steps. Continuous at the boundary.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::WarmupTooLong {
            warmup: warmup_steps,
            total: total_steps,
        });
    }
    if step >= total_steps {
        return Err(Error::InvalidConfig(format!(
            "step {step} out of schedule range {total_steps}"
        )));
    }
    if step < warmup_steps {
        Ok(base_lr * (step + 1) as f64 / warmup_steps as f64)
    } else {
        let span = (total_steps - warmup_steps) as f64;
        let progress = (step - warmup_steps) as f64 / span;
        Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// SGD with momentum over a row table. Frozen rows receive no velocity and
/// no update, bitwise.
pub struct SgdMomentum {
    velocity: Tensor<f32>,
    momentum: f32,
}

impl SgdMomentum {
    pub fn new(shape: &[usize], momentum: f64) -> Self {
        SgdMomentum {
            velocity: Tensor::zeros(shape),
            momentum: momentum as f32,
        }
    }

    /// velocity = momentum * velocity + grad; row -= lr * velocity.
    pub fn step(
        &mut self,
        table: &mut Tensor<f32>,
        frozen: &[bool],
        grad: &Tensor<f32>,
        lr: f64,
    ) -> Result<()> {
        if table.shape() != grad.shape() || table.shape() != self.velocity.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: table.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        let lr = lr as f32;
        let cols = table.cols();
        for r in 0..table.rows() {
            if frozen.get(r).copied().unwrap_or(false) {
                continue;
            }
            let g = &grad.data()[r * cols..(r + 1) * cols];
            let v = &mut self.velocity.data_mut()[r * cols..(r + 1) * cols];
            let t = &mut table.data_mut()[r * cols..(r + 1) * cols];
            for j in 0..cols {
                v[j] = self.momentum * v[j] + g[j];
                t[j] -= lr * v[j];
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// Draws exactly min(shots, available) training samples per class from the
/// train split, seeded and disjoint from the eval split by construction.
#[derive(Clone, Copy, Debug)]
pub struct FewShotSampler {
    pub shots: usize,
    pub seed: u64,
}

impl FewShotSampler {
    /// Returns (sample_id, class_id) pairs for the requested classes, class
    /// by class in the given order.
    pub fn sample(&self, ds: &Dataset, classes: &[usize]) -> Result<Vec<(u32, usize)>> {
        let mut by_class: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for &id in &ds.manifest.splits.train {
            let (_, label) = ds.classification_sample(id)?;
            by_class.entry(label).or_default().push(id);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        for &class_id in classes {
            let pool = by_class.get(&class_id).cloned().unwrap_or_default();
            if pool.is_empty() {
                return Err(Error::InvalidManifest(format!(
                    "class {class_id} has no training samples"
                )));
            }
            let mut pool = pool;
            for i in (1..pool.len()).rev() {
                let j = rng.gen_range(0..=i);
                pool.swap(i, j);
            }
            let take = self.shots.min(pool.len());
            out.extend(pool[..take].iter().map(|&id| (id, class_id)));
        }
        Ok(out)
    }
}

/// Rarest-first water-filling: the target count is split as evenly as the
/// per-class availabilities allow, rarest classes served first.
pub fn balanced_allocation(counts: &[usize], target: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| (counts[i], i));
    let mut alloc = vec![0usize; counts.len()];
    let mut remaining = target;
    let mut left = counts.len();
    for idx in order {
        if remaining == 0 {
            break;
        }
        let share = remaining.div_ceil(left);
        let take = counts[idx].min(share).min(remaining);
        alloc[idx] = take;
        remaining -= take;
        left -= 1;
    }
    alloc
}

/// Balanced subsample of the train split: ceil(fraction * |train|) items
/// total, allocated per class by `balanced_allocation`. In region mode each
/// image is attributed to the rarest class it contains.
pub fn balanced_subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Vec<u32>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(
            "subsample fraction must be in (0, 1]".into(),
        ));
    }
    let train = &ds.manifest.splits.train;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_classes = ds.manifest.n_classes();
    let counts = ds.manifest.frequency_counts();
    let class_of = |id: u32| -> Result<usize> {
        match ds.manifest.mode {
            DatasetMode::Classification => Ok(ds.classification_sample(id)?.1),
            DatasetMode::Region => {
                let regions = ds.region_sample(id)?;
                let mut best: Option<usize> = None;
                for r in regions {
                    for &l in &r.labels {
                        best = Some(match best {
                            None => l,
                            Some(b) => {
                                if (counts[l], l) < (counts[b], b) {
                                    l
                                } else {
                                    b
                                }
                            }
                        });
                    }
                }
                Ok(best.unwrap_or(0))
            }
        }
    };
    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); n_classes];
    for &id in train {
        by_class[class_of(id)?].push(id);
    }
    let avail: Vec<usize> = by_class.iter().map(|v| v.len()).collect();
    let target = ((fraction * train.len() as f64).ceil() as usize).min(train.len());
    let alloc = balanced_allocation(&avail, target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(target);
    for (class_id, pool) in by_class.iter_mut().enumerate() {
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
        picked.extend_from_slice(&pool[..alloc[class_id]]);
    }
    picked.sort_unstable();
    Ok(picked)
}

// ---------------------------------------------------------------------------
// Query sets and evaluation
// ---------------------------------------------------------------------------

/// Whether a class is queried through its learned slots or its handcrafted
/// name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryKind {
    Learned,
    Named,
}

/// Encoded text features for an ordered set of class queries; column q
/// scores class `class_ids[q]`.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub class_ids: Vec<usize>,
    pub features: Tensor<f32>,
    pub warnings: Vec<String>,
}

impl QuerySet {
    /// Restricts the set to the listed classes, preserving column content
    /// bitwise (rows are copied, never re-encoded).
    pub fn restrict(&self, classes: &[usize]) -> QuerySet {
        let cols: Vec<usize> = classes
            .iter()
            .filter_map(|c| self.class_ids.iter().position(|x| x == c))
            .collect();
        let d = self.features.cols();
        let mut data = Vec::with_capacity(cols.len() * d);
        for &c in &cols {
            data.extend_from_slice(self.features.row(c));
        }
        QuerySet {
            class_ids: cols.iter().map(|&c| self.class_ids[c]).collect(),
            features: Tensor::from_vec(&[cols.len(), d], data).expect("restrict shape"),
            warnings: Vec::new(),
        }
    }
}

/// Renders one query per class according to its kind and encodes the set.
pub fn build_query_set(
    model: &Model<f32>,
    vocab: &Vocabulary,
    template_name: &str,
    ds: &Dataset,
    learned: &LearnableClassEmbeddings<f32>,
    context: Option<&ContextEmbeddings<f32>>,
    selection: &[(usize, QueryKind)],
    config: &TrainConfig,
) -> Result<QuerySet> {
    let template = find_template(template_name)?;
    let c_len = model.config.context_len;
    let mut queries = Vec::with_capacity(selection.len());
    let mut warnings = Vec::new();
    for &(class_id, kind) in selection {
        if class_id >= ds.manifest.n_classes() {
            return Err(Error::UnknownClass(class_id));
        }
        let seq = match (kind, config.trainable) {
            (QueryKind::Named, TrainableSlots::Class) => {
                let (seq, mut warn) =
                    render_named_query(&template, &ds.manifest.classes[class_id].name, vocab, c_len)?;
                warnings.append(&mut warn);
                seq
            }
            (QueryKind::Named, _) => {
                // context mode: learned context slots around the handcrafted name
                let name_ids = crate::tokenizer::tokenize(&ds.manifest.classes[class_id].name, vocab);
                let part = name_ids.into_iter().map(SeqItem::Vocab).collect();
                render_context_query(&template, config.n_ctx, part, vocab, c_len)?
            }
            (QueryKind::Learned, TrainableSlots::Class) => {
                render_query(&template, class_id, config.m, vocab, c_len)?
            }
            (QueryKind::Learned, TrainableSlots::Context) => {
                let name_ids = crate::tokenizer::tokenize(&ds.manifest.classes[class_id].name, vocab);
                let part = name_ids.into_iter().map(SeqItem::Vocab).collect();
                render_context_query(&template, config.n_ctx, part, vocab, c_len)?
            }
            (QueryKind::Learned, TrainableSlots::Both) => {
                let part = (0..config.m)
                    .map(|slot| SeqItem::ClassSlot { class_id, slot })
                    .collect();
                render_context_query(&template, config.n_ctx, part, vocab, c_len)?
            }
        };
        queries.push(seq);
    }
    let features = encode_class_set(&queries, model, learned, context)?;
    Ok(QuerySet {
        class_ids: selection.iter().map(|&(c, _)| c).collect(),
        features,
        warnings,
    })
}

fn gather_classification(ds: &Dataset, ids: &[u32]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let d = ds.features.dim;
    let mut data = Vec::with_capacity(ids.len() * d);
    let mut labels = Vec::with_capacity(ids.len());
    for &id in ids {
        let (feat, label) = ds.classification_sample(id)?;
        data.extend_from_slice(feat);
        labels.push(label);
    }
    Ok((Tensor::from_vec(&[ids.len(), d], data)?, labels))
}

/// Fraction of samples whose top-scoring query column names their label.
pub fn evaluate_classification(
    ds: &Dataset,
    ids: &[u32],
    qs: &QuerySet,
    logit_scale: f32,
) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (feats, labels) = gather_classification(ds, ids)?;
    let logits = cosine_logits(&feats, &qs.features, logit_scale)?;
    let preds = argmax_rows(&logits);
    let correct = preds
        .iter()
        .zip(&labels)
        .filter(|(p, l)| qs.class_ids[**p] == **l)
        .count();
    Ok(correct as f64 / ids.len() as f64)
}

/// Scores every region of the listed samples against the query set and
/// reduces to per-class and macro AP. Region rows are scored in parallel
/// batches ordered by sample id.
pub fn evaluate_region(
    ds: &Dataset,
    ids: &[u32],
    qs: &QuerySet,
    logit_scale: f32,
) -> Result<ApReport> {
    let d = ds.features.dim;
    let col_of: BTreeMap<usize, usize> = qs
        .class_ids
        .iter()
        .enumerate()
        .map(|(col, &c)| (c, col))
        .collect();
    let gathered: Vec<Result<Vec<(Vec<f32>, Vec<usize>)>>> = par::map_indexed(ids.len(), |i| {
        let regions = ds.region_sample(ids[i])?;
        Ok(regions
            .iter()
            .map(|r| {
                let positives = r
                    .labels
                    .iter()
                    .filter_map(|l| col_of.get(l).copied())
                    .collect();
                (r.feature.clone(), positives)
            })
            .collect())
    });
    let mut data = Vec::new();
    let mut positives = Vec::new();
    for g in gathered {
        for (feat, pos) in g? {
            data.extend_from_slice(&feat);
            positives.push(pos);
        }
    }
    if positives.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let feats = Tensor::from_vec(&[positives.len(), d], data)?;
    let scores = cosine_logits(&feats, &qs.features, logit_scale)?;
    let per_class = per_class_average_precision(&scores, &positives);
    let counts: Vec<u64> = qs
        .class_ids
        .iter()
        .map(|&c| ds.manifest.classes[c].frequency_count)
        .collect();
    Ok(macro_average_precision(&per_class, &counts))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// The learned state after one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub learned: LearnableClassEmbeddings<f32>,
    pub context: Option<ContextEmbeddings<f32>>,
    pub steps: usize,
    pub final_loss: f64,
}

fn train_queries(
    model: &Model<f32>,
    vocab: &Vocabulary,
    template_name: &str,
    ds: &Dataset,
    active: &[usize],
    config: &TrainConfig,
) -> Result<Vec<TokenSequence>> {
    let template = find_template(template_name)?;
    let c_len = model.config.context_len;
    active
        .iter()
        .map(|&class_id| match config.trainable {
            TrainableSlots::Class => render_query(&template, class_id, config.m, vocab, c_len),
            TrainableSlots::Context => {
                let name_ids = crate::tokenizer::tokenize(&ds.manifest.classes[class_id].name, vocab);
                let part = name_ids.into_iter().map(SeqItem::Vocab).collect();
                render_context_query(&template, config.n_ctx, part, vocab, c_len)
            }
            TrainableSlots::Both => {
                let part = (0..config.m)
                    .map(|slot| SeqItem::ClassSlot { class_id, slot })
                    .collect();
                render_context_query(&template, config.n_ctx, part, vocab, c_len)
            }
        })
        .collect()
}

/// Trains class slots on the given dataset. `scored` lists the classes in
/// the loss (softmax columns / BCE columns, in column order); `sampled`
/// lists the classes whose training samples feed the batches. Frozen rows of
/// the class table are bitwise-preserved regardless of the gradients they
/// receive.
pub fn train_slots(
    model: &Model<f32>,
    vocab: &Vocabulary,
    ds: &Dataset,
    scored: &[usize],
    sampled: &[usize],
    mut learned: LearnableClassEmbeddings<f32>,
    mut context: Option<ContextEmbeddings<f32>>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    ds.check_dim(model.config.joint_dim)?;
    let template_name = &ds.manifest.template;
    let queries = train_queries(model, vocab, template_name, ds, scored, config)?;
    let col_of: BTreeMap<usize, usize> = scored
        .iter()
        .enumerate()
        .map(|(col, &c)| (c, col))
        .collect();
    for c in sampled {
        if !col_of.contains_key(c) {
            return Err(Error::InvalidConfig(format!(
                "sampled class {c} is not scored by the loss"
            )));
        }
    }

    // training items: (sample id, class) pairs for classification, image ids
    // for region mode
    let class_items: Vec<(u32, usize)>;
    let region_items: Vec<u32>;
    match config.mode {
        DatasetMode::Classification => {
            let sampler = FewShotSampler {
                shots: config.shots,
                seed: config.seed,
            };
            class_items = sampler.sample(ds, sampled)?;
            region_items = Vec::new();
        }
        DatasetMode::Region => {
            let pool = match config.subsample_fraction {
                Some(f) => balanced_subsample(ds, f, config.seed)?,
                None => ds.manifest.splits.train.clone(),
            };
            // keep only images containing at least one sampled class
            region_items = pool
                .into_iter()
                .filter(|&id| {
                    ds.region_sample(id)
                        .map(|regions| {
                            regions
                                .iter()
                                .any(|r| r.labels.iter().any(|l| sampled.contains(l)))
                        })
                        .unwrap_or(false)
                })
                .collect();
            class_items = Vec::new();
        }
    }
    let n_items = match config.mode {
        DatasetMode::Classification => class_items.len(),
        DatasetMode::Region => region_items.len(),
    };
    if n_items == 0 && config.epochs > 0 {
        return Err(Error::EmptyDataset);
    }

    let train_class = matches!(config.trainable, TrainableSlots::Class | TrainableSlots::Both);
    let train_ctx = matches!(config.trainable, TrainableSlots::Context | TrainableSlots::Both);
    if train_ctx && context.is_none() {
        return Err(Error::InvalidConfig(
            "context training requested without a context table".into(),
        ));
    }

    let steps_per_epoch = n_items.div_ceil(config.batch_size).max(1);
    let total_steps = config.epochs * steps_per_epoch;
    let warmup_steps = config.warmup_epochs * steps_per_epoch;
    let mut class_opt = SgdMomentum::new(learned.table().shape(), config.momentum);
    let mut ctx_opt = context
        .as_ref()
        .map(|c| SgdMomentum::new(c.table.shape(), config.momentum));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let no_ctx_frozen: Vec<bool> = context
        .as_ref()
        .map(|c| vec![false; c.table.rows()])
        .unwrap_or_default();

    let mut step = 0usize;
    let mut final_loss = f64::NAN;
    let mut order: Vec<usize> = (0..n_items).collect();
    for _epoch in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let lr = lr_at(step, total_steps, warmup_steps, config.base_lr)?;
            let mut g = Graph::new();
            let el_node = if train_class {
                g.param(learned.table().clone())
            } else {
                g.constant(learned.table().clone())
            };
            let ctx_node = match &context {
                Some(c) => Some(if train_ctx {
                    g.param(c.table.clone())
                } else {
                    g.constant(c.table.clone())
                }),
                None => None,
            };
            let staged = stage_weights(&mut g, model);
            let text_node = encode_class_set_graph(
                &mut g,
                model,
                &staged,
                el_node,
                ctx_node,
                &queries,
                &learned,
                context.as_ref().map(|c| c.table.rows()).unwrap_or(0),
            )?;
            let loss = match config.mode {
                DatasetMode::Classification => {
                    let ids: Vec<u32> = chunk.iter().map(|&i| class_items[i].0).collect();
                    let (feats, labels) = gather_classification(ds, &ids)?;
                    let targets: Vec<usize> = labels.iter().map(|l| col_of[l]).collect();
                    classification_loss_graph(&mut g, &feats, text_node, &targets, model.logit_scale)?
                }
                DatasetMode::Region => {
                    let mut data = Vec::new();
                    let mut labels = Vec::new();
                    for &i in chunk {
                        for r in ds.region_sample(region_items[i])? {
                            data.extend_from_slice(&r.feature);
                            labels.push(
                                r.labels
                                    .iter()
                                    .filter_map(|l| col_of.get(l).copied())
                                    .collect::<Vec<usize>>(),
                            );
                        }
                    }
                    let batch = RegionBatch {
                        features: Tensor::from_vec(&[labels.len(), ds.features.dim], data)?,
                        labels,
                    };
                    region_multilabel_loss_graph(&mut g, &batch, text_node, model.logit_scale)?
                }
            };
            g.backward(loss)?;
            final_loss = g.output(loss).scalar_value() as f64;
            if train_class {
                let grad = g
                    .grad(el_node)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(learned.table().shape()));
                let frozen = learned.frozen_rows().to_vec();
                class_opt
                    .step(learned.table_mut(), &frozen, &grad, lr)
                    .map_err(|e| match e {
                        Error::NonFinite { .. } => Error::NonFiniteGradient {
                            what: "class table".into(),
                            step,
                        },
                        other => other,
                    })?;
            }
            if train_ctx {
                let ctx = context.as_mut().expect("validated above");
                let grad = g
                    .grad(ctx_node.expect("context staged"))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(ctx.table.shape()));
                ctx_opt
                    .as_mut()
                    .expect("context optimizer")
                    .step(&mut ctx.table, &no_ctx_frozen, &grad, lr)
                    .map_err(|e| match e {
                        Error::NonFinite { .. } => Error::NonFiniteGradient {
                            what: "context table".into(),
                            step,
                        },
                        other => other,
                    })?;
            }
            step += 1;
        }
    }
    Ok(TrainOutcome {
        learned,
        context,
        steps: step,
        final_loss,
    })
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Task 1: adapt to a new dataset by learning all class names.
    Adapt,
    /// Task 2: adjust class names on an already fine-tuned checkpoint; the
    /// pipeline is identical to `Adapt`, the checkpoint differs.
    Adjust,
    /// Task 3: train base classes, evaluate the mixed learned/named set.
    OpenVocab,
    /// Task 4: two sequential stages with stage-1 rows frozen.
    Sequential,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Adapt => "adapt",
            TaskKind::Adjust => "adjust",
            TaskKind::OpenVocab => "openvocab",
            TaskKind::Sequential => "sequential",
        }
    }
}

/// Outcome of one seed of a protocol.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub learned: LearnableClassEmbeddings<f32>,
    pub context: Option<ContextEmbeddings<f32>>,
    pub groups: BTreeMap<String, f64>,
}

/// Configuration plus per-seed results of one protocol run.
#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub task: TaskKind,
    pub seeds: Vec<SeedRun>,
    pub report: MetricsReport,
}

fn partition_of(ds: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    match &ds.manifest.partition {
        Some(p) => Ok((p.base.clone(), p.new.clone())),
        None => Err(Error::InvalidManifest(
            "this task requires a base/new partition".into(),
        )),
    }
}

fn fresh_tables(
    model: &Model<f32>,
    vocab: &Vocabulary,
    ds: &Dataset,
    config: &TrainConfig,
) -> Result<(LearnableClassEmbeddings<f32>, Option<ContextEmbeddings<f32>>, Vec<String>)> {
    let (learned, warnings) =
        init_class_embeddings(&ds.manifest.class_names(), vocab, &model.pretrained, config.m)?;
    let context = match config.trainable {
        TrainableSlots::Class => None,
        _ => {
            let template = find_template(&ds.manifest.template)?;
            let prefix_tokens: Vec<u32> = crate::tokenizer::tokenize(&template.prefix, vocab);
            if prefix_tokens.len() < config.n_ctx {
                return Err(Error::InvalidConfig(format!(
                    "template prefix has {} tokens but n_ctx is {}; lower n_ctx to override",
                    prefix_tokens.len(),
                    config.n_ctx
                )));
            }
            Some(ContextEmbeddings::from_prefix(
                &template.prefix,
                config.n_ctx,
                vocab,
                &model.pretrained,
            ))
        }
    };
    Ok((learned, context, warnings))
}

fn ids_with_labels_in(ds: &Dataset, ids: &[u32], classes: &[usize]) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for &id in ids {
        let keep = match ds.manifest.mode {
            DatasetMode::Classification => {
                let (_, label) = ds.classification_sample(id)?;
                classes.contains(&label)
            }
            DatasetMode::Region => ds
                .region_sample(id)?
                .iter()
                .any(|r| r.labels.iter().any(|l| classes.contains(l))),
        };
        if keep {
            out.push(id);
        }
    }
    Ok(out)
}

fn group_metrics(
    model: &Model<f32>,
    ds: &Dataset,
    full: &QuerySet,
    partition: Option<(&[usize], &[usize])>,
) -> Result<BTreeMap<String, f64>> {
    let eval = &ds.manifest.splits.eval;
    let scale = model.logit_scale;
    let mut groups = BTreeMap::new();
    match ds.manifest.mode {
        DatasetMode::Classification => {
            groups.insert(
                "all".into(),
                evaluate_classification(ds, eval, full, scale)?,
            );
            if let Some((base, new)) = partition {
                let base_ids = ids_with_labels_in(ds, eval, base)?;
                let new_ids = ids_with_labels_in(ds, eval, new)?;
                groups.insert(
                    "base".into(),
                    evaluate_classification(ds, &base_ids, &full.restrict(base), scale)?,
                );
                groups.insert(
                    "new".into(),
                    evaluate_classification(ds, &new_ids, &full.restrict(new), scale)?,
                );
            }
        }
        DatasetMode::Region => {
            let report = evaluate_region(ds, eval, full, scale)?;
            if let Some(v) = report.all {
                groups.insert("all".into(), v);
            }
            if let Some(v) = report.frequent {
                groups.insert("frequent".into(), v);
            }
            if let Some(v) = report.common {
                groups.insert("common".into(), v);
            }
            if let Some(v) = report.rare {
                groups.insert("rare".into(), v);
            }
        }
    }
    Ok(groups)
}

fn make_report(
    task: TaskKind,
    ds: &Dataset,
    config: &TrainConfig,
    seeds: &[SeedRun],
) -> MetricsReport {
    let metric = match ds.manifest.mode {
        DatasetMode::Classification => "accuracy",
        DatasetMode::Region => "average_precision",
    };
    MetricsReport::from_seeds(
        task.as_str(),
        ds.manifest.mode,
        metric,
        serde_json::to_value(config).expect("config serializes"),
        seeds
            .iter()
            .map(|s| SeedMetrics {
                seed: s.seed,
                groups: s.groups.clone(),
            })
            .collect(),
    )
}

fn run_seeds<F>(seeds: &[u64], f: F) -> Result<Vec<SeedRun>>
where
    F: Fn(u64) -> Result<SeedRun> + Sync + Send,
{
    let runs = par::map_indexed(seeds.len(), |i| f(seeds[i]));
    runs.into_iter().collect()
}

/// Tasks 1 and 2: learn every class's slots on the train split and evaluate.
/// (For Task 2 the supplied checkpoint is the fine-tuned model; the pipeline
/// is identical.)
pub fn run_adaptation(
    model: &Model<f32>,
    vocab: &Vocabulary,
    ds: &Dataset,
    config: &TrainConfig,
    seeds: &[u64],
    task: TaskKind,
) -> Result<ProtocolRun> {
    let all: Vec<usize> = (0..ds.manifest.n_classes()).collect();
    let partition = ds.manifest.partition.clone();
    let seed_runs = run_seeds(seeds, |seed| {
        let mut cfg = config.clone();
        cfg.seed = seed;
        let (learned, context, _) = fresh_tables(model, vocab, ds, &cfg)?;
        let outcome = train_slots(model, vocab, ds, &all, &all, learned, context, &cfg)?;
        let selection: Vec<(usize, QueryKind)> =
            all.iter().map(|&c| (c, QueryKind::Learned)).collect();
        let qs = build_query_set(
            model,
            vocab,
            &ds.manifest.template,
            ds,
            &outcome.learned,
            outcome.context.as_ref(),
            &selection,
            &cfg,
        )?;
        let groups = group_metrics(
            model,
            ds,
            &qs,
            partition.as_ref().map(|p| (&p.base[..], &p.new[..])),
        )?;
        Ok(SeedRun {
            seed,
            learned: outcome.learned,
            context: outcome.context,
            groups,
        })
    })?;
    let report = make_report(task, ds, config, &seed_runs);
    Ok(ProtocolRun {
        task,
        seeds: seed_runs,
        report,
    })
}

/// Task 3: train base classes only, then evaluate the mixed query set:
/// learned slots for base classes, handcrafted names for new classes.
pub fn run_open_vocab(
    model: &Model<f32>,
    vocab: &Vocabulary,
    ds: &Dataset,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<ProtocolRun> {
    let (base, new) = partition_of(ds)?;
    let seed_runs = run_seeds(seeds, |seed| {
        let mut cfg = config.clone();
        cfg.seed = seed;
        let (learned, context, _) = fresh_tables(model, vocab, ds, &cfg)?;
        let outcome = train_slots(model, vocab, ds, &base, &base, learned, context, &cfg)?;
        let mut selection: Vec<(usize, QueryKind)> = Vec::new();
        for c in 0..ds.manifest.n_classes() {
            let kind = if base.contains(&c) {
                QueryKind::Learned
            } else {
                QueryKind::Named
            };
            selection.push((c, kind));
        }
        let qs = build_query_set(
            model,
            vocab,
            &ds.manifest.template,
            ds,
            &outcome.learned,
            outcome.context.as_ref(),
            &selection,
            &cfg,
        )?;
        let groups = group_metrics(model, ds, &qs, Some((&base, &new)))?;
        Ok(SeedRun {
            seed,
            learned: outcome.learned,
            context: outcome.context,
            groups,
        })
    })?;
    let report = make_report(TaskKind::OpenVocab, ds, config, &seed_runs);
    Ok(ProtocolRun {
        task: TaskKind::OpenVocab,
        seeds: seed_runs,
        report,
    })
}

/// Task 4: stage 1 trains base slots; stage 2 freezes them bitwise and
/// trains the new-class slots with the loss over stage-2 classes only; the
/// final evaluation uses all learned embeddings.
pub fn run_sequential(
    model: &Model<f32>,
    vocab: &Vocabulary,
    ds: &Dataset,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<ProtocolRun> {
    let (base, new) = partition_of(ds)?;
    let seed_runs = run_seeds(seeds, |seed| {
        let mut cfg = config.clone();
        cfg.seed = seed;
        let (learned, context, _) = fresh_tables(model, vocab, ds, &cfg)?;
        let stage1 = train_slots(model, vocab, ds, &base, &base, learned, context, &cfg)?;
        let mut learned = stage1.learned;
        for &c in &base {
            learned.freeze_class(c);
        }
        let outcome = if new.is_empty() {
            TrainOutcome {
                learned,
                context: stage1.context,
                steps: 0,
                final_loss: f64::NAN,
            }
        } else {
            let scored: Vec<usize> = match cfg.sequential_denominator {
                SequentialDenominator::AllClasses => (0..ds.manifest.n_classes()).collect(),
                SequentialDenominator::Stage2Only => new.clone(),
            };
            train_slots(model, vocab, ds, &scored, &new, learned, stage1.context, &cfg)?
        };
        let selection: Vec<(usize, QueryKind)> = (0..ds.manifest.n_classes())
            .map(|c| (c, QueryKind::Learned))
            .collect();
        let qs = build_query_set(
            model,
            vocab,
            &ds.manifest.template,
            ds,
            &outcome.learned,
            outcome.context.as_ref(),
            &selection,
            &cfg,
        )?;
        let groups = group_metrics(model, ds, &qs, Some((&base, &new)))?;
        Ok(SeedRun {
            seed,
            learned: outcome.learned,
            context: outcome.context,
            groups,
        })
    })?;
    let report = make_report(TaskKind::Sequential, ds, config, &seed_runs);
    Ok(ProtocolRun {
        task: TaskKind::Sequential,
        seeds: seed_runs,
        report,
    })
}

/// Optional baseline: learnable context slots shared across classes (class
/// tokens stay handcrafted), or combined context+class training when the
/// config selects `Both`.
pub fn learn_context_tokens(
    model: &Model<f32>,
    vocab: &Vocabulary,
    ds: &Dataset,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<ProtocolRun> {
    if config.trainable == TrainableSlots::Class {
        return Err(Error::InvalidConfig(
            "learn_context_tokens requires trainable = context or both".into(),
        ));
    }
    run_adaptation(model, vocab, ds, config, seeds, TaskKind::Adapt)
}

/// Zero-shot evaluation: every class queried by its handcrafted name with
/// untouched pretrained embeddings.
pub fn zero_shot_metrics(
    model: &Model<f32>,
    vocab: &Vocabulary,
    ds: &Dataset,
    config: &TrainConfig,
) -> Result<(QuerySet, BTreeMap<String, f64>)> {
    let (learned, _, _) = fresh_tables(model, vocab, ds, config)?;
    let selection: Vec<(usize, QueryKind)> = (0..ds.manifest.n_classes())
        .map(|c| (c, QueryKind::Named))
        .collect();
    let mut named_cfg = config.clone();
    named_cfg.trainable = TrainableSlots::Class;
    let qs = build_query_set(
        model,
        vocab,
        &ds.manifest.template,
        ds,
        &learned,
        None,
        &selection,
        &named_cfg,
    )?;
    let partition = ds.manifest.partition.clone();
    let groups = group_metrics(
        model,
        ds,
        &qs,
        partition.as_ref().map(|p| (&p.base[..], &p.new[..])),
    )?;
    Ok((qs, groups))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_boundary_values() {
        let base = 2e-4;
        let (total, warmup) = (40usize, 4usize);
        // end of warmup reaches base_lr exactly
        assert!((lr_at(warmup - 1, total, warmup, base).unwrap() - base).abs() < 1e-18);
        // first cosine step also equals base_lr (continuity)
        assert!((lr_at(warmup, total, warmup, base).unwrap() - base).abs() < 1e-18);
        // warmup ramps linearly from base/warmup
        assert!((lr_at(0, total, warmup, base).unwrap() - base / warmup as f64).abs() < 1e-18);
        // midpoint of the cosine phase is base/2
        let span = total - warmup;
        let mid = warmup + span / 2;
        assert!((lr_at(mid, total, warmup, base).unwrap() - base / 2.0).abs() < 1e-12);
        // final step matches the closed form
        let t = span as f64;
        let expect = base * 0.5 * (1.0 + (std::f64::consts::PI * (t - 1.0) / t).cos());
        assert!((lr_at(total - 1, total, warmup, base).unwrap() - expect).abs() < 1e-18);
    }

    #[test]
    fn lr_rejects_bad_ranges() {
        assert!(matches!(
            lr_at(0, 10, 10, 1.0),
            Err(Error::WarmupTooLong { .. })
        ));
        assert!(lr_at(10, 10, 2, 1.0).is_err());
    }

    #[test]
    fn sgd_vanilla_step() {
        let mut table = Tensor::from_vec(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let grad = Tensor::from_vec(&[1, 2], vec![0.5f32, -0.5]).unwrap();
        let mut opt = SgdMomentum::new(&[1, 2], 0.0);
        opt.step(&mut table, &[false], &grad, 0.1).unwrap();
        assert!((table.data()[0] - 0.95).abs() < 1e-7);
        assert!((table.data()[1] - 2.05).abs() < 1e-7);
    }

    #[test]
    fn sgd_frozen_row_is_bitwise_unchanged() {
        let mut table = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let before_row0 = table.row(0).to_vec();
        let grad = Tensor::from_vec(&[2, 2], vec![9.0f32, 9.0, 1.0, 1.0]).unwrap();
        let mut opt = SgdMomentum::new(&[2, 2], 0.9);
        for _ in 0..5 {
            opt.step(&mut table, &[true, false], &grad, 0.01).unwrap();
        }
        assert_eq!(table.row(0), &before_row0[..]);
        assert_ne!(table.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn sgd_momentum_unrolls_as_expected() {
        // two steps with momentum 0.9 and constant grad: total update
        // lr*g*(1 + 1.9)
        let g0 = 0.4f32;
        let lr = 0.05f64;
        let mut table = Tensor::from_vec(&[1, 1], vec![1.0f32]).unwrap();
        let grad = Tensor::from_vec(&[1, 1], vec![g0]).unwrap();
        let mut opt = SgdMomentum::new(&[1, 1], 0.9);
        opt.step(&mut table, &[false], &grad, lr).unwrap();
        opt.step(&mut table, &[false], &grad, lr).unwrap();
        let expect = 1.0 - (lr as f32) * g0 * (1.0 + 1.9);
        assert!((table.data()[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut table = Tensor::from_vec(&[1, 1], vec![1.0f32]).unwrap();
        let grad = Tensor::from_vec(&[1, 1], vec![f32::NAN]).unwrap();
        let mut opt = SgdMomentum::new(&[1, 1], 0.9);
        assert!(opt.step(&mut table, &[false], &grad, 0.1).is_err());
    }

    #[test]
    fn balanced_allocation_examples() {
        // 2 classes with 90/10 items, 20 total: 10 from each
        assert_eq!(balanced_allocation(&[90, 10], 20), vec![10, 10]);
        // identity fraction takes everything
        assert_eq!(balanced_allocation(&[3, 5], 8), vec![3, 5]);
        // a singleton class is always included once target >= class count
        let alloc = balanced_allocation(&[1, 50, 50], 3);
        assert_eq!(alloc[0], 1);
    }

    #[test]
    fn balanced_allocation_matches_round_robin_oracle() {
        // independent oracle: deal one item at a time, rarest class first
        fn round_robin(counts: &[usize], target: usize) -> Vec<usize> {
            let mut order: Vec<usize> = (0..counts.len()).collect();
            order.sort_by_key(|&i| (counts[i], i));
            let mut alloc = vec![0usize; counts.len()];
            let mut total = 0;
            while total < target {
                let mut progressed = false;
                for &i in &order {
                    if total >= target {
                        break;
                    }
                    if alloc[i] < counts[i] {
                        alloc[i] += 1;
                        total += 1;
                        progressed = true;
                    }
                }
                if !progressed {
                    break;
                }
            }
            alloc
        }
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..20 {
            let n = rng.gen_range(1..=10);
            let counts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=150)).collect();
            let total: usize = counts.iter().sum();
            let target = rng.gen_range(1..=total);
            assert_eq!(
                balanced_allocation(&counts, target),
                round_robin(&counts, target),
                "counts {counts:?} target {target}"
            );
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::classification();
        assert!(cfg.validate().is_ok());
        cfg.warmup_epochs = 200;
        assert!(matches!(cfg.validate(), Err(Error::WarmupTooLong { .. })));
        cfg.warmup_epochs = 1;
        cfg.base_lr = 0.0;
        assert!(cfg.validate().is_err());
    }
}
