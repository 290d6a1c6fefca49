//! Maps learned class embeddings back to human vocabulary: sentence-level
//! cosine neighbors against a reference name list, self-similarity to the
//! original class name, and the rarity/similarity correlation.
//!
//! All comparisons happen at the encoder output (the learned-slot sentence
//! feature against reference-name sentence features under one shared
//! template), never on raw embedding rows.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::atomic_write;
use crate::encoder::{encode_sequence, Model};
use crate::error::{Error, Result};
use crate::par;
use crate::store::LearnableClassEmbeddings;
use crate::tensor::Tensor;
use crate::tokenizer::{render_named_query, render_query, PromptTemplate, Vocabulary, UNK};

/// Reference object names with optional frequency counts and their encoded,
/// L2-normalized sentence features.
#[derive(Clone, Debug)]
pub struct ReferenceVocabulary {
    pub names: Vec<String>,
    pub counts: Vec<Option<u64>>,
    pub features: Tensor<f32>,
    /// Names that contained out-of-vocabulary words (encoded through <unk>).
    pub flagged: Vec<String>,
}

impl ReferenceVocabulary {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Loads a UTF-8 reference list: one name per line, optional tab-separated
/// frequency count.
pub fn load_reference_names(path: &Path) -> Result<Vec<(String, Option<u64>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((name, count)) => {
                let count = count.trim().parse::<u64>().map_err(|_| {
                    Error::InvalidConfig(format!("bad frequency count {count:?} for {name:?}"))
                })?;
                out.push((name.trim().to_string(), Some(count)));
            }
            None => out.push((line.to_string(), None)),
        }
    }
    Ok(out)
}

fn normalize_row(row: &[f32]) -> Result<Vec<f32>> {
    let norm: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm <= 0.0 {
        return Err(Error::DegenerateFeature { row: 0 });
    }
    Ok(row.iter().map(|&v| (v as f64 / norm) as f32).collect())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-300)
}

/// Encodes each reference name as `template + name` through the frozen
/// encoder. Duplicate names after lowercasing are dropped with a flag; names
/// with out-of-vocabulary words are encoded anyway and flagged.
pub fn encode_reference(
    entries: &[(String, Option<u64>)],
    template: &PromptTemplate,
    model: &Model<f32>,
    vocab: &Vocabulary,
) -> Result<ReferenceVocabulary> {
    let mut names = Vec::new();
    let mut counts = Vec::new();
    let mut flagged = Vec::new();
    let mut seen = BTreeSet::new();
    for (name, count) in entries {
        let key = name.to_ascii_lowercase();
        if !seen.insert(key.clone()) {
            flagged.push(format!("duplicate reference name {name:?} dropped"));
            continue;
        }
        names.push(key);
        counts.push(*count);
    }
    // the encoder never reads the class table for pure-name queries
    let dummy = LearnableClassEmbeddings::new(Tensor::zeros(&[1, model.config.feat_dim]), 1)?;
    let rows: Vec<Result<(Vec<f32>, bool)>> = par::map_indexed(names.len(), |i| {
        let (seq, warns) = render_named_query(template, &names[i], vocab, model.config.context_len)?;
        let oov = !warns.is_empty()
            || seq
                .items()
                .iter()
                .any(|item| matches!(item, crate::tokenizer::SeqItem::Vocab(id) if *id == UNK));
        let feat = encode_sequence(model, &seq, &dummy, None)?;
        Ok((normalize_row(feat.data())?, oov))
    });
    let d = model.config.joint_dim;
    let mut data = Vec::with_capacity(names.len() * d);
    for (i, r) in rows.into_iter().enumerate() {
        let (row, oov) = r?;
        if oov {
            flagged.push(format!(
                "reference name {:?} has out-of-vocabulary words",
                names[i]
            ));
        }
        data.extend_from_slice(&row);
    }
    Ok(ReferenceVocabulary {
        features: Tensor::from_vec(&[names.len(), d], data)?,
        names,
        counts,
        flagged,
    })
}

/// Sentence feature of a class's learned slots under the template.
pub fn learned_sentence_feature(
    class_id: usize,
    learned: &LearnableClassEmbeddings<f32>,
    template: &PromptTemplate,
    model: &Model<f32>,
    vocab: &Vocabulary,
) -> Result<Vec<f32>> {
    let seq = render_query(template, class_id, learned.m(), vocab, model.config.context_len)?;
    let feat = encode_sequence(model, &seq, learned, None)?;
    Ok(feat.data().to_vec())
}

/// Top-k reference names by cosine against the learned-slot sentence
/// feature, descending; ties break by ascending name order.
pub fn nearest_names(
    class_id: usize,
    learned: &LearnableClassEmbeddings<f32>,
    reference: &ReferenceVocabulary,
    template: &PromptTemplate,
    model: &Model<f32>,
    vocab: &Vocabulary,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if k > reference.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds the reference vocabulary size {}",
            reference.len()
        )));
    }
    let feat = learned_sentence_feature(class_id, learned, template, model, vocab)?;
    let mut scored: Vec<(String, f64)> = (0..reference.len())
        .map(|i| {
            (
                reference.names[i].clone(),
                cosine(&feat, reference.features.row(i)),
            )
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    Ok(scored)
}

/// Cosine between a class's learned-slot sentence feature and the sentence
/// feature of its original handcrafted name.
pub fn self_similarity(
    class_id: usize,
    class_name: &str,
    learned: &LearnableClassEmbeddings<f32>,
    template: &PromptTemplate,
    model: &Model<f32>,
    vocab: &Vocabulary,
) -> Result<f64> {
    let learned_feat = learned_sentence_feature(class_id, learned, template, model, vocab)?;
    let (seq, _) = render_named_query(template, class_name, vocab, model.config.context_len)?;
    let name_feat = encode_sequence(model, &seq, learned, None)?;
    Ok(cosine(&learned_feat, name_feat.data()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassNeighbors {
    pub class_id: usize,
    pub name: String,
    pub self_similarity: f64,
    /// (reference name, cosine), sorted by descending cosine.
    pub neighbors: Vec<(String, f64)>,
}

/// Per-class nearest reference names plus self-similarities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NeighborReport {
    pub format_version: u32,
    pub template: String,
    pub k: usize,
    pub classes: Vec<ClassNeighbors>,
}

impl NeighborReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        atomic_write(path, format!("{body}\n").as_bytes())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,name,self_similarity,rank,neighbor,cosine\n");
        for c in &self.classes {
            for (rank, (n, cos)) in c.neighbors.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{:.6},{},{},{:.6}\n",
                    c.class_id,
                    c.name,
                    c.self_similarity,
                    rank + 1,
                    n,
                    cos
                ));
            }
        }
        out
    }
}

pub fn neighbor_report(
    class_names: &[String],
    learned: &LearnableClassEmbeddings<f32>,
    reference: &ReferenceVocabulary,
    template: &PromptTemplate,
    model: &Model<f32>,
    vocab: &Vocabulary,
    k: usize,
) -> Result<NeighborReport> {
    let per_class: Vec<Result<ClassNeighbors>> = par::map_indexed(class_names.len(), |class_id| {
        Ok(ClassNeighbors {
            class_id,
            name: class_names[class_id].clone(),
            self_similarity: self_similarity(
                class_id,
                &class_names[class_id],
                learned,
                template,
                model,
                vocab,
            )?,
            neighbors: nearest_names(class_id, learned, reference, template, model, vocab, k)?,
        })
    });
    Ok(NeighborReport {
        format_version: 1,
        template: template.name.clone(),
        k,
        classes: per_class.into_iter().collect::<Result<_>>()?,
    })
}

/// Pearson correlation between log10(frequency count) and self-similarity.
/// Requires at least 3 classes and nonzero variance on both sides.
pub fn rarity_similarity_correlation(counts: &[u64], self_sims: &[f64]) -> Result<f64> {
    if counts.len() != self_sims.len() || counts.len() < 3 {
        return Err(Error::InvalidConfig(
            "correlation needs at least 3 (count, similarity) pairs".into(),
        ));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::InvalidConfig(
            "frequency counts must be >= 1 for the log scale".into(),
        ));
    }
    let xs: Vec<f64> = counts.iter().map(|&c| (c as f64).log10()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = self_sims.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(self_sims) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("log10(count)"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("self-similarity"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Scatter data for external plotting: one row per class.
pub fn correlation_csv(class_names: &[String], counts: &[u64], self_sims: &[f64]) -> String {
    let mut out = String::from("class,frequency_count,log10_count,self_similarity\n");
    for i in 0..class_names.len() {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            class_names[i],
            counts[i],
            (counts[i] as f64).log10(),
            self_sims[i]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_vocabulary;
    use crate::encoder::EncoderConfig;
    use crate::store::{generate_model, init_class_embeddings};

    fn setup() -> (Model<f32>, Vocabulary) {
        let vocab = default_vocabulary();
        let config = EncoderConfig {
            feat_dim: 16,
            joint_dim: 16,
            layers: 1,
            heads: 2,
            context_len: 16,
            eps: 1e-5,
            causal: true,
        };
        (generate_model(&config, vocab.len(), 21).unwrap(), vocab)
    }

    fn reference_of(model: &Model<f32>, vocab: &Vocabulary, names: &[&str]) -> ReferenceVocabulary {
        let entries: Vec<(String, Option<u64>)> =
            names.iter().map(|n| (n.to_string(), None)).collect();
        encode_reference(&entries, &PromptTemplate::default_photo(), model, vocab).unwrap()
    }

    #[test]
    fn singleton_reference_shape() {
        let (model, vocab) = setup();
        let r = reference_of(&model, &vocab, &["dog"]);
        assert_eq!(r.features.shape(), &[1, 16]);
        assert!(r.flagged.is_empty());
    }

    #[test]
    fn duplicates_dedupe_with_warning() {
        let (model, vocab) = setup();
        let r = reference_of(&model, &vocab, &["dog", "Dog"]);
        assert_eq!(r.len(), 1);
        assert_eq!(r.flagged.len(), 1);
    }

    #[test]
    fn encoding_is_deterministic() {
        let (model, vocab) = setup();
        let a = reference_of(&model, &vocab, &["cat"]);
        let b = reference_of(&model, &vocab, &["cat"]);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn self_retrieval_of_vocabulary_row() {
        // a class row set to a vocabulary word's embedding retrieves that
        // word at rank 1 with cosine 1.0
        let (model, vocab) = setup();
        let names = vec!["boot".to_string()];
        let (mut learned, _) =
            init_class_embeddings(&names, &vocab, &model.pretrained, 1).unwrap();
        let boot_id = vocab.lookup("boot").unwrap() as usize;
        learned
            .table_mut()
            .row_mut(0)
            .copy_from_slice(model.pretrained.table.row(boot_id));
        let reference = reference_of(&model, &vocab, &["anchor", "boot", "kettle", "owl"]);
        let top = nearest_names(
            0,
            &learned,
            &reference,
            &PromptTemplate::default_photo(),
            &model,
            &vocab,
            2,
        )
        .unwrap();
        assert_eq!(top[0].0, "boot");
        assert!((top[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn untrained_single_token_class_has_unit_self_similarity() {
        let (model, vocab) = setup();
        let names = vec!["kettle".to_string()];
        let (learned, _) = init_class_embeddings(&names, &vocab, &model.pretrained, 1).unwrap();
        let sim = self_similarity(
            0,
            "kettle",
            &learned,
            &PromptTemplate::default_photo(),
            &model,
            &vocab,
        )
        .unwrap();
        assert!((sim - 1.0).abs() < 1e-6);
    }

    #[test]
    fn full_ranking_is_a_permutation() {
        let (model, vocab) = setup();
        let names = vec!["dog".to_string()];
        let (learned, _) = init_class_embeddings(&names, &vocab, &model.pretrained, 1).unwrap();
        let reference = reference_of(&model, &vocab, &["cat", "dog", "owl", "fox", "bee"]);
        let all = nearest_names(
            0,
            &learned,
            &reference,
            &PromptTemplate::default_photo(),
            &model,
            &vocab,
            reference.len(),
        )
        .unwrap();
        let mut got: Vec<&str> = all.iter().map(|(n, _)| n.as_str()).collect();
        got.sort_unstable();
        assert_eq!(got, vec!["bee", "cat", "dog", "fox", "owl"]);
        // k beyond the reference size is rejected
        assert!(nearest_names(
            0,
            &learned,
            &reference,
            &PromptTemplate::default_photo(),
            &model,
            &vocab,
            reference.len() + 1,
        )
        .is_err());
    }

    #[test]
    fn growing_the_reference_preserves_relative_order() {
        let (model, vocab) = setup();
        let names = vec!["lamp".to_string()];
        let (learned, _) = init_class_embeddings(&names, &vocab, &model.pretrained, 1).unwrap();
        let small = reference_of(&model, &vocab, &["cat", "dog", "owl"]);
        let large = reference_of(&model, &vocab, &["cat", "dog", "owl", "vase", "sofa"]);
        let t = PromptTemplate::default_photo();
        let rank_small = nearest_names(0, &learned, &small, &t, &model, &vocab, 3).unwrap();
        let rank_large = nearest_names(0, &learned, &large, &t, &model, &vocab, 5).unwrap();
        let order_small: Vec<&str> = rank_small.iter().map(|(n, _)| n.as_str()).collect();
        let order_large: Vec<&str> = rank_large
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| order_small.contains(n))
            .collect();
        assert_eq!(order_small, order_large);
    }

    #[test]
    fn correlation_perfect_linear_relation() {
        let counts = vec![1u64, 10, 100, 1000];
        let sims: Vec<f64> = counts.iter().map(|&c| 0.1 * (c as f64).log10() + 0.2).collect();
        let r = rarity_similarity_correlation(&counts, &sims).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_rejects_zero_variance() {
        let counts = vec![1u64, 10, 100];
        let sims = vec![0.5, 0.5, 0.5];
        assert!(matches!(
            rarity_similarity_correlation(&counts, &sims),
            Err(Error::UndefinedCorrelation(_))
        ));
        let same_counts = vec![7u64, 7, 7];
        let sims2 = vec![0.1, 0.2, 0.3];
        assert!(matches!(
            rarity_similarity_correlation(&same_counts, &sims2),
            Err(Error::UndefinedCorrelation(_))
        ));
    }
}
