//! Embedding tables, their initialization, and NVCK checkpoint serialization.
//!
//! The pretrained table `E` and the positional rows are frozen for the life
//! of a run; the learnable class table holds `m` rows per class with a
//! per-row freeze flag that the optimizer honors bitwise.
//!
//! Checkpoint format (NVCK, little-endian):
//!   magic "NVCK" | u32 version | u32 F | u32 C | u32 V | u32 layers |
//!   u32 heads | f32 logit_scale | records...
//! each record: u32 name_len | name bytes | u32 rank | u32 dims... |
//!   f32 data (row-major). Records run to end of file.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{EncoderConfig, EncoderWeights, LayerWeights, Model};
use crate::error::{Error, Result};
use crate::graph::RowSource;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize, SeqItem, TokenSequence, Vocabulary, NUM_SPECIALS};

/// Frozen pretrained word-embedding matrix `E` (V x F) plus positional rows
/// (C x F). Shared by reference; never mutated after load.
#[derive(Clone, Debug)]
pub struct PretrainedEmbeddings<S> {
    pub table: Arc<Tensor<S>>,
    pub positional: Arc<Tensor<S>>,
}

impl<S: Scalar> PretrainedEmbeddings<S> {
    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.table.cols()
    }

    pub fn context_len(&self) -> usize {
        self.positional.rows()
    }
}

/// Learnable class table `E^l` ((N*m) x F): `m` consecutive rows per class,
/// with per-row freeze flags (sequential adaptation keeps stage-1 rows
/// bitwise-unchanged).
#[derive(Clone, Debug, PartialEq)]
pub struct LearnableClassEmbeddings<S> {
    table: Tensor<S>,
    m: usize,
    frozen: Vec<bool>,
}

impl<S: Scalar> LearnableClassEmbeddings<S> {
    pub fn new(table: Tensor<S>, m: usize) -> Result<Self> {
        if m == 0 || table.rows() % m != 0 {
            return Err(Error::InvalidConfig(format!(
                "class table with {} rows cannot hold {} embeddings per class",
                table.rows(),
                m
            )));
        }
        let frozen = vec![false; table.rows()];
        Ok(LearnableClassEmbeddings { table, m, frozen })
    }

    pub fn n_classes(&self) -> usize {
        self.table.rows() / self.m
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn table(&self) -> &Tensor<S> {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Tensor<S> {
        &mut self.table
    }

    pub fn set_table(&mut self, t: Tensor<S>) -> Result<()> {
        if t.shape() != self.table.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_table",
                lhs: self.table.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.table = t;
        Ok(())
    }

    pub fn row_index(&self, class_id: usize, slot: usize) -> Result<usize> {
        if class_id >= self.n_classes() || slot >= self.m {
            return Err(Error::UnknownClass(class_id));
        }
        Ok(class_id * self.m + slot)
    }

    pub fn class_rows(&self, class_id: usize) -> std::ops::Range<usize> {
        class_id * self.m..(class_id + 1) * self.m
    }

    pub fn frozen_rows(&self) -> &[bool] {
        &self.frozen
    }

    pub fn freeze_class(&mut self, class_id: usize) {
        for r in self.class_rows(class_id) {
            self.frozen[r] = true;
        }
    }

    pub fn is_class_frozen(&self, class_id: usize) -> bool {
        self.class_rows(class_id).all(|r| self.frozen[r])
    }
}

/// Shared learnable context slots for the prompt-context baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEmbeddings<S> {
    pub table: Tensor<S>,
}

impl<S: Scalar> ContextEmbeddings<S> {
    /// Initializes `n_ctx` slots from the template prefix token embeddings
    /// (right-aligned, the way the context baseline seeds "a photo of a").
    /// Missing positions fall back to the mean embedding.
    pub fn from_prefix(
        prefix: &str,
        n_ctx: usize,
        vocab: &Vocabulary,
        pretrained: &PretrainedEmbeddings<S>,
    ) -> Self {
        let ids: Vec<u32> = tokenize(prefix, vocab)
            .into_iter()
            .filter(|&id| id >= NUM_SPECIALS)
            .collect();
        let f = pretrained.feat_dim();
        let mean = column_mean(&pretrained.table);
        let mut data = Vec::with_capacity(n_ctx * f);
        for k in 0..n_ctx {
            // right-align: the last n_ctx prefix tokens fill the slots
            if ids.len() >= n_ctx - k {
                let id = ids[ids.len() - (n_ctx - k)];
                data.extend_from_slice(pretrained.table.row(id as usize));
            } else {
                data.extend_from_slice(mean.data());
            }
        }
        ContextEmbeddings {
            table: Tensor::from_vec(&[n_ctx, f], data).expect("context table shape"),
        }
    }
}

fn column_mean<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (rows, cols) = (t.rows(), t.cols());
    let mut out = Tensor::zeros(&[cols]);
    for r in 0..rows {
        let row = t.row(r);
        for j in 0..cols {
            out.data_mut()[j] += row[j];
        }
    }
    let n = S::from_f64(rows as f64);
    for v in out.data_mut() {
        *v = *v / n;
    }
    out
}

/// Initializes each class's `m` rows to the mean pretrained embedding of the
/// in-vocabulary tokens of its handcrafted name. A fully out-of-vocabulary
/// name falls back to the column-wise mean of the whole table and is
/// reported in the warning list.
pub fn init_class_embeddings<S: Scalar>(
    class_names: &[String],
    vocab: &Vocabulary,
    pretrained: &PretrainedEmbeddings<S>,
    m: usize,
) -> Result<(LearnableClassEmbeddings<S>, Vec<String>)> {
    let f = pretrained.feat_dim();
    let mut warnings = Vec::new();
    let mut data = Vec::with_capacity(class_names.len() * m * f);
    let fallback = column_mean(&pretrained.table);
    for name in class_names {
        let word_ids: Vec<u32> = tokenize(name, vocab)
            .into_iter()
            .filter(|&id| id >= NUM_SPECIALS)
            .collect();
        let mean = if word_ids.is_empty() {
            warnings.push(format!(
                "class name {name:?} has no in-vocabulary tokens; initialized from the table mean"
            ));
            fallback.clone()
        } else {
            let mut acc = Tensor::zeros(&[f]);
            for &id in &word_ids {
                let row = pretrained.table.row(id as usize);
                for j in 0..f {
                    acc.data_mut()[j] += row[j];
                }
            }
            let n = S::from_f64(word_ids.len() as f64);
            for v in acc.data_mut() {
                *v = *v / n;
            }
            acc
        };
        for _ in 0..m {
            data.extend_from_slice(mean.data());
        }
    }
    let table = Tensor::from_vec(&[class_names.len() * m, f], data)?;
    Ok((LearnableClassEmbeddings::new(table, m)?, warnings))
}

/// Maps sequence items to graph row sources, validating slot references.
pub fn row_sources<S: Scalar>(
    seq: &TokenSequence,
    learned: &LearnableClassEmbeddings<S>,
    context_rows: usize,
) -> Result<Vec<RowSource>> {
    seq.items()
        .iter()
        .map(|item| match *item {
            SeqItem::Vocab(id) => Ok(RowSource::Pretrained(id as usize)),
            SeqItem::ClassSlot { class_id, slot } => {
                Ok(RowSource::Learnable(learned.row_index(class_id, slot)?))
            }
            SeqItem::ContextSlot { index } => {
                if index >= context_rows {
                    Err(Error::InvalidConfig(format!(
                        "context slot {index} out of range ({context_rows} slots)"
                    )))
                } else {
                    Ok(RowSource::Context(index))
                }
            }
        })
        .collect()
}

/// Resolves a rendered query to its (C x F) embedding matrix: each row is
/// the source table row plus the positional row, exactly.
pub fn resolve_sequence<S: Scalar>(
    seq: &TokenSequence,
    pretrained: &PretrainedEmbeddings<S>,
    learned: &LearnableClassEmbeddings<S>,
    context: Option<&ContextEmbeddings<S>>,
) -> Result<Tensor<S>> {
    let f = pretrained.feat_dim();
    let sources = row_sources(seq, learned, context.map(|c| c.table.rows()).unwrap_or(0))?;
    let mut data = Vec::with_capacity(sources.len() * f);
    for (c, src) in sources.iter().enumerate() {
        let row: &[S] = match *src {
            RowSource::Pretrained(r) => pretrained.table.row(r),
            RowSource::Learnable(r) => learned.table().row(r),
            RowSource::Context(r) => context.unwrap().table.row(r),
        };
        let pos = pretrained.positional.row(c);
        data.extend(row.iter().zip(pos).map(|(&a, &b)| a + b));
    }
    Tensor::from_vec(&[sources.len(), f], data)
}

// ---------------------------------------------------------------------------
// NVCK checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const REC_TOKEN_EMBEDDING: &str = "token_embedding";
pub const REC_POSITIONAL: &str = "positional_embedding";
pub const REC_FINAL_GAIN: &str = "final_norm.gain";
pub const REC_FINAL_BIAS: &str = "final_norm.bias";
pub const REC_PROJECTION: &str = "projection";
pub const REC_LEARNED_CLASS: &str = "learned.class_embeddings";
pub const REC_LEARNED_CONTEXT: &str = "learned.context_embeddings";

/// In-memory checkpoint: metadata plus named f32 tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub feat_dim: u32,
    pub context_len: u32,
    pub vocab_size: u32,
    pub layers: u32,
    pub heads: u32,
    pub logit_scale: f32,
    pub records: Vec<(String, Tensor<f32>)>,
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Truncated {
        kind: "checkpoint",
        what: what.to_string(),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, what: &str) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(f32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn record(&self, name: &str) -> Result<&Tensor<f32>> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingRecord(name.to_string()))
    }

    pub fn has_record(&self, name: &str) -> bool {
        self.records.iter().any(|(n, _)| n == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.feat_dim.to_le_bytes());
        buf.extend_from_slice(&self.context_len.to_le_bytes());
        buf.extend_from_slice(&self.vocab_size.to_le_bytes());
        buf.extend_from_slice(&self.layers.to_le_bytes());
        buf.extend_from_slice(&self.heads.to_le_bytes());
        buf.extend_from_slice(&self.logit_scale.to_le_bytes());
        for (name, tensor) in &self.records {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::data::atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadVersion {
                kind: "checkpoint",
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let feat_dim = read_u32(&mut r, "feat_dim")?;
        let context_len = read_u32(&mut r, "context_len")?;
        let vocab_size = read_u32(&mut r, "vocab_size")?;
        let layers = read_u32(&mut r, "layers")?;
        let heads = read_u32(&mut r, "heads")?;
        let logit_scale = read_f32(&mut r, "logit_scale")?;
        let mut records = Vec::new();
        loop {
            // A clean end of file is only legal at a record boundary.
            let mut len_buf = [0u8; 4];
            match r.read(&mut len_buf[..1])? {
                0 => break,
                _ => read_exact(&mut r, &mut len_buf[1..], "record name length")?,
            }
            let name_len = u32::from_le_bytes(len_buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes, "record name")?;
            let name = String::from_utf8(name_bytes).map_err(|_| Error::Truncated {
                kind: "checkpoint",
                what: "record name (invalid UTF-8)".into(),
            })?;
            let rank = read_u32(&mut r, &format!("rank of {name}"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r, &format!("dims of {name}"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut fbuf = [0u8; 4];
            for _ in 0..numel {
                read_exact(&mut r, &mut fbuf, &format!("data of {name}"))?;
                data.push(f32::from_le_bytes(fbuf));
            }
            records.push((name, Tensor::from_vec(&shape, data)?));
        }
        let ck = Checkpoint {
            feat_dim,
            context_len,
            vocab_size,
            layers,
            heads,
            logit_scale,
            records,
        };
        ck.validate()?;
        Ok(ck)
    }

    fn expect_shape(&self, name: &str, want: &[usize]) -> Result<()> {
        let t = self.record(name)?;
        if t.shape() != want {
            return Err(Error::RecordShapeMismatch {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                detail: format!("expected {want:?}"),
            });
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let (f, c, v) = (
            self.feat_dim as usize,
            self.context_len as usize,
            self.vocab_size as usize,
        );
        self.expect_shape(REC_TOKEN_EMBEDDING, &[v, f])?;
        self.expect_shape(REC_POSITIONAL, &[c, f])?;
        for l in 0..self.layers as usize {
            for w in ["wq", "wk", "wv", "wo"] {
                self.expect_shape(&format!("layers.{l}.attn.{w}"), &[f, f])?;
            }
            for b in ["bq", "bk", "bv", "bo"] {
                self.expect_shape(&format!("layers.{l}.attn.{b}"), &[f])?;
            }
            for ln in ["ln1", "ln2"] {
                self.expect_shape(&format!("layers.{l}.{ln}.gain"), &[f])?;
                self.expect_shape(&format!("layers.{l}.{ln}.bias"), &[f])?;
            }
            self.expect_shape(&format!("layers.{l}.ffn.w1"), &[f, 4 * f])?;
            self.expect_shape(&format!("layers.{l}.ffn.b1"), &[4 * f])?;
            self.expect_shape(&format!("layers.{l}.ffn.w2"), &[4 * f, f])?;
            self.expect_shape(&format!("layers.{l}.ffn.b2"), &[f])?;
        }
        self.expect_shape(REC_FINAL_GAIN, &[f])?;
        self.expect_shape(REC_FINAL_BIAS, &[f])?;
        let proj = self.record(REC_PROJECTION)?;
        if proj.shape().len() != 2 || proj.shape()[0] != f {
            return Err(Error::RecordShapeMismatch {
                name: REC_PROJECTION.to_string(),
                shape: proj.shape().to_vec(),
                detail: format!("expected [{f}, D]"),
            });
        }
        Ok(())
    }

    /// Materializes the frozen model at the requested precision.
    pub fn instantiate<S: Scalar>(&self) -> Result<Model<S>> {
        let f = self.feat_dim as usize;
        let proj = self.record(REC_PROJECTION)?;
        let config = EncoderConfig {
            feat_dim: f,
            joint_dim: proj.shape()[1],
            layers: self.layers as usize,
            heads: self.heads as usize,
            context_len: self.context_len as usize,
            eps: 1e-5,
            causal: true,
        };
        config.validate()?;
        let get = |name: &str| -> Result<Tensor<S>> { Ok(self.record(name)?.convert()) };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(LayerWeights {
                ln1_gain: get(&format!("layers.{l}.ln1.gain"))?,
                ln1_bias: get(&format!("layers.{l}.ln1.bias"))?,
                wq: get(&format!("layers.{l}.attn.wq"))?,
                bq: get(&format!("layers.{l}.attn.bq"))?,
                wk: get(&format!("layers.{l}.attn.wk"))?,
                bk: get(&format!("layers.{l}.attn.bk"))?,
                wv: get(&format!("layers.{l}.attn.wv"))?,
                bv: get(&format!("layers.{l}.attn.bv"))?,
                wo: get(&format!("layers.{l}.attn.wo"))?,
                bo: get(&format!("layers.{l}.attn.bo"))?,
                ln2_gain: get(&format!("layers.{l}.ln2.gain"))?,
                ln2_bias: get(&format!("layers.{l}.ln2.bias"))?,
                ffn_w1: get(&format!("layers.{l}.ffn.w1"))?,
                ffn_b1: get(&format!("layers.{l}.ffn.b1"))?,
                ffn_w2: get(&format!("layers.{l}.ffn.w2"))?,
                ffn_b2: get(&format!("layers.{l}.ffn.b2"))?,
            });
        }
        Ok(Model {
            config,
            pretrained: PretrainedEmbeddings {
                table: Arc::new(get(REC_TOKEN_EMBEDDING)?),
                positional: Arc::new(get(REC_POSITIONAL)?),
            },
            weights: EncoderWeights {
                layers,
                final_gain: get(REC_FINAL_GAIN)?,
                final_bias: get(REC_FINAL_BIAS)?,
                projection: get(REC_PROJECTION)?,
            },
            logit_scale: S::from_f64(self.logit_scale as f64),
        })
    }

    /// Extracts a learned class table if the checkpoint carries one.
    pub fn learned_class_table(&self, m: usize) -> Result<Option<LearnableClassEmbeddings<f32>>> {
        if !self.has_record(REC_LEARNED_CLASS) {
            return Ok(None);
        }
        let t = self.record(REC_LEARNED_CLASS)?.clone();
        Ok(Some(LearnableClassEmbeddings::new(t, m)?))
    }

    pub fn learned_context_table(&self) -> Result<Option<ContextEmbeddings<f32>>> {
        if !self.has_record(REC_LEARNED_CONTEXT) {
            return Ok(None);
        }
        Ok(Some(ContextEmbeddings {
            table: self.record(REC_LEARNED_CONTEXT)?.clone(),
        }))
    }
}

/// Builds a checkpoint from a 32-bit model and optional learned tables.
pub fn checkpoint_from_model(
    model: &Model<f32>,
    learned: Option<&LearnableClassEmbeddings<f32>>,
    context: Option<&ContextEmbeddings<f32>>,
) -> Checkpoint {
    let mut records: Vec<(String, Tensor<f32>)> = Vec::new();
    records.push((
        REC_TOKEN_EMBEDDING.into(),
        (*model.pretrained.table).clone(),
    ));
    records.push((REC_POSITIONAL.into(), (*model.pretrained.positional).clone()));
    for (l, lw) in model.weights.layers.iter().enumerate() {
        let mut put = |suffix: &str, t: &Tensor<f32>| {
            records.push((format!("layers.{l}.{suffix}"), t.clone()));
        };
        put("ln1.gain", &lw.ln1_gain);
        put("ln1.bias", &lw.ln1_bias);
        put("attn.wq", &lw.wq);
        put("attn.bq", &lw.bq);
        put("attn.wk", &lw.wk);
        put("attn.bk", &lw.bk);
        put("attn.wv", &lw.wv);
        put("attn.bv", &lw.bv);
        put("attn.wo", &lw.wo);
        put("attn.bo", &lw.bo);
        put("ln2.gain", &lw.ln2_gain);
        put("ln2.bias", &lw.ln2_bias);
        put("ffn.w1", &lw.ffn_w1);
        put("ffn.b1", &lw.ffn_b1);
        put("ffn.w2", &lw.ffn_w2);
        put("ffn.b2", &lw.ffn_b2);
    }
    records.push((REC_FINAL_GAIN.into(), model.weights.final_gain.clone()));
    records.push((REC_FINAL_BIAS.into(), model.weights.final_bias.clone()));
    records.push((REC_PROJECTION.into(), model.weights.projection.clone()));
    if let Some(l) = learned {
        records.push((REC_LEARNED_CLASS.into(), l.table().clone()));
    }
    if let Some(c) = context {
        records.push((REC_LEARNED_CONTEXT.into(), c.table.clone()));
    }
    Checkpoint {
        feat_dim: model.config.feat_dim as u32,
        context_len: model.config.context_len as u32,
        vocab_size: model.pretrained.vocab_size() as u32,
        layers: model.config.layers as u32,
        heads: model.config.heads as u32,
        logit_scale: model.logit_scale,
        records,
    }
}

pub fn save_checkpoint(
    model: &Model<f32>,
    learned: Option<&LearnableClassEmbeddings<f32>>,
    context: Option<&ContextEmbeddings<f32>>,
    path: &Path,
) -> Result<()> {
    checkpoint_from_model(model, learned, context).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

// ---------------------------------------------------------------------------
// Seeded pseudo-pretrained model generator
// ---------------------------------------------------------------------------

/// Generates a frozen stand-in model. Per-tensor scheme:
/// token embeddings N(0, 0.02); positional N(0, 0.01); query/key weights
/// N(0, 4/sqrt(F)) so attention is peaked and the class token carries real
/// weight in the pooled feature (distinct class queries then map to
/// well-separated features, as on trained encoders); value/output and
/// feed-forward weights N(0, 1/sqrt(fan_in)); biases zero; normalization
/// gain 1 / bias 0; projection N(0, 1/sqrt(F)); logit scale 100.
pub fn generate_model(config: &EncoderConfig, vocab_size: usize, seed: u64) -> Result<Model<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |shape: &[usize], std: f64| -> Tensor<f32> {
        let dist = Normal::new(0.0f64, std).expect("valid std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| dist.sample(&mut rng) as f32)
            .collect();
        Tensor::from_vec(shape, data).expect("generated shape")
    };
    let f = config.feat_dim;
    let w_std = 1.0 / (f as f64).sqrt();
    let qk_std = 4.0 / (f as f64).sqrt();
    let table = normal(&[vocab_size, f], 0.02);
    let positional = normal(&[config.context_len, f], 0.01);
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        layers.push(LayerWeights {
            ln1_gain: Tensor::filled(&[f], 1.0),
            ln1_bias: Tensor::zeros(&[f]),
            wq: normal(&[f, f], qk_std),
            bq: Tensor::zeros(&[f]),
            wk: normal(&[f, f], qk_std),
            bk: Tensor::zeros(&[f]),
            wv: normal(&[f, f], w_std),
            bv: Tensor::zeros(&[f]),
            wo: normal(&[f, f], w_std),
            bo: Tensor::zeros(&[f]),
            ln2_gain: Tensor::filled(&[f], 1.0),
            ln2_bias: Tensor::zeros(&[f]),
            ffn_w1: normal(&[f, 4 * f], w_std),
            ffn_b1: Tensor::zeros(&[4 * f]),
            ffn_w2: normal(&[4 * f, f], 1.0 / (4.0 * f as f64).sqrt()),
            ffn_b2: Tensor::zeros(&[f]),
        });
    }
    Ok(Model {
        config: config.clone(),
        pretrained: PretrainedEmbeddings {
            table: Arc::new(table),
            positional: Arc::new(positional),
        },
        weights: EncoderWeights {
            layers,
            final_gain: Tensor::filled(&[f], 1.0),
            final_bias: Tensor::zeros(&[f]),
            projection: normal(&[f, config.joint_dim], w_std),
        },
        logit_scale: 100.0,
    })
}
