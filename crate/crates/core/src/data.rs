//! Dataset manifests, NVFT feature files, the synthetic planted-oracle
//! generator, and metrics reports.
//!
//! Control plane is JSON (manifests, configs, reports); the data plane is
//! binary and bit-exact. Feature ingestion is the system boundary: image and
//! region features arrive precomputed.
//!
//! NVFT feature format (little-endian):
//!   magic "NVFT" | u32 version | u32 count | u32 D | count sample records.
//! Classification record: u32 sample_id | u32 label | D f32.
//! Region record: u32 sample_id | u32 region_count | per region:
//!   u32 label_count | label_count u32 label ids | D f32.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_class_set, Model};
use crate::error::{Error, Result};
use crate::par;
use crate::store::LearnableClassEmbeddings;
use crate::tensor::Tensor;
use crate::tokenizer::{find_template, render_query, tokenize, Vocabulary, NUM_SPECIALS};

pub const MANIFEST_VERSION: u32 = 1;
pub const FEATURES_MAGIC: &[u8; 4] = b"NVFT";
pub const FEATURES_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

/// Writes a file atomically: the bytes land in a sibling temp file which is
/// renamed over the target, so a killed run never leaves a half-written
/// artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    Classification,
    Region,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    pub frequency_count: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<u32>,
    pub eval: Vec<u32>,
}

/// Optional base/new class partition; must cover all ids disjointly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Partition {
    pub base: Vec<usize>,
    pub new: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub mode: DatasetMode,
    pub template: String,
    pub classes: Vec<ClassEntry>,
    pub splits: Splits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Partition>,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn frequency_counts(&self) -> Vec<u64> {
        self.classes.iter().map(|c| c.frequency_count).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::BadVersion {
                kind: "manifest",
                expected: MANIFEST_VERSION,
                found: self.format_version,
            });
        }
        if self.classes.is_empty() {
            return Err(Error::InvalidManifest("no classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::InvalidManifest(format!(
                    "class ids must be dense 0..N-1; found id {} at position {i}",
                    c.id
                )));
            }
        }
        if let Some(p) = &self.partition {
            let mut seen = vec![false; self.classes.len()];
            for &id in p.base.iter().chain(&p.new) {
                if id >= seen.len() {
                    return Err(Error::InvalidManifest(format!(
                        "partition references unknown class id {id}"
                    )));
                }
                if seen[id] {
                    return Err(Error::InvalidManifest(format!(
                        "partition lists class id {id} twice"
                    )));
                }
                seen[id] = true;
            }
            if seen.iter().any(|&s| !s) {
                return Err(Error::InvalidManifest(
                    "partition must cover all class ids".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        atomic_write(path, format!("{body}\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.display().to_string(),
                source,
            })?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// One region: feature vector plus multi-label class-id set (empty set =
/// background).
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub labels: Vec<usize>,
    pub feature: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleFeatures {
    Classification { label: usize, feature: Vec<f32> },
    Region { regions: Vec<Region> },
}

/// Binary feature table keyed by sample id; file order is preserved for
/// deterministic round trips.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub dim: usize,
    samples: Vec<(u32, SampleFeatures)>,
    index: HashMap<u32, usize>,
}

impl FeatureFile {
    pub fn new(dim: usize) -> Self {
        FeatureFile {
            dim,
            samples: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, id: u32, features: SampleFeatures) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::InvalidManifest(format!(
                "duplicate sample id {id} in feature file"
            )));
        }
        self.index.insert(id, self.samples.len());
        self.samples.push((id, features));
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&SampleFeatures> {
        self.index.get(&id).map(|&i| &self.samples[i].1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(FEATURES_MAGIC);
        buf.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, sample) in &self.samples {
            buf.extend_from_slice(&id.to_le_bytes());
            match sample {
                SampleFeatures::Classification { label, feature } => {
                    buf.extend_from_slice(&(*label as u32).to_le_bytes());
                    for v in feature {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                SampleFeatures::Region { regions } => {
                    buf.extend_from_slice(&(regions.len() as u32).to_le_bytes());
                    for r in regions {
                        buf.extend_from_slice(&(r.labels.len() as u32).to_le_bytes());
                        for &l in &r.labels {
                            buf.extend_from_slice(&(l as u32).to_le_bytes());
                        }
                        for v in &r.feature {
                            buf.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
            }
        }
        atomic_write(path, &buf)
    }

    pub fn load(path: &Path, mode: DatasetMode) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = std::io::BufReader::new(file);
        let read_exact = |r: &mut dyn Read, buf: &mut [u8], what: &str| -> Result<()> {
            r.read_exact(buf).map_err(|_| Error::Truncated {
                kind: "features",
                what: what.to_string(),
            })
        };
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != FEATURES_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(FEATURES_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read, what: &str| -> Result<u32> {
            read_exact(r, &mut u32buf, what)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut r, "version")?;
        if version != FEATURES_VERSION {
            return Err(Error::BadVersion {
                kind: "features",
                expected: FEATURES_VERSION,
                found: version,
            });
        }
        let count = read_u32(&mut r, "count")? as usize;
        let dim = read_u32(&mut r, "dim")? as usize;
        let mut out = FeatureFile::new(dim);
        let mut fbuf = [0u8; 4];
        let mut read_feature = |r: &mut dyn Read, what: &str| -> Result<Vec<f32>> {
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut fbuf).map_err(|_| Error::Truncated {
                    kind: "features",
                    what: what.to_string(),
                })?;
                v.push(f32::from_le_bytes(fbuf));
            }
            Ok(v)
        };
        for i in 0..count {
            let id = read_u32(&mut r, &format!("sample {i} id"))?;
            let sample = match mode {
                DatasetMode::Classification => {
                    let label = read_u32(&mut r, &format!("sample {id} label"))? as usize;
                    let feature = read_feature(&mut r, &format!("sample {id} feature"))?;
                    SampleFeatures::Classification { label, feature }
                }
                DatasetMode::Region => {
                    let n_regions = read_u32(&mut r, &format!("sample {id} region count"))?;
                    let mut regions = Vec::with_capacity(n_regions as usize);
                    for k in 0..n_regions {
                        let n_labels =
                            read_u32(&mut r, &format!("sample {id} region {k} label count"))?;
                        let mut labels = Vec::with_capacity(n_labels as usize);
                        for _ in 0..n_labels {
                            labels.push(
                                read_u32(&mut r, &format!("sample {id} region {k} labels"))?
                                    as usize,
                            );
                        }
                        let feature =
                            read_feature(&mut r, &format!("sample {id} region {k} feature"))?;
                        regions.push(Region { labels, feature });
                    }
                    SampleFeatures::Region { regions }
                }
            };
            out.push(id, sample)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Truncated {
                kind: "features",
                what: "trailing bytes after the declared sample count".into(),
            });
        }
        Ok(out)
    }
}

/// A validated manifest/features pair.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub features: FeatureFile,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, features: FeatureFile) -> Result<Self> {
        manifest.validate()?;
        let n = manifest.n_classes();
        for &id in manifest.splits.train.iter().chain(&manifest.splits.eval) {
            match features.get(id) {
                None => return Err(Error::DanglingSample(id)),
                Some(SampleFeatures::Classification { label, .. }) => {
                    if manifest.mode != DatasetMode::Classification {
                        return Err(Error::InvalidManifest(format!(
                            "sample {id} is a classification record in a region dataset"
                        )));
                    }
                    if *label >= n {
                        return Err(Error::InvalidManifest(format!(
                            "sample {id} labels unknown class {label}"
                        )));
                    }
                }
                Some(SampleFeatures::Region { regions }) => {
                    if manifest.mode != DatasetMode::Region {
                        return Err(Error::InvalidManifest(format!(
                            "sample {id} is a region record in a classification dataset"
                        )));
                    }
                    for r in regions {
                        for &l in &r.labels {
                            if l >= n {
                                return Err(Error::InvalidManifest(format!(
                                    "sample {id} region labels unknown class {l}"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(Dataset { manifest, features })
    }

    pub fn load(manifest_path: &Path, features_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let features = FeatureFile::load(features_path, manifest.mode)?;
        Dataset::new(manifest, features)
    }

    /// Feature dimension must match the model's joint dimension.
    pub fn check_dim(&self, model_dim: usize) -> Result<()> {
        if self.features.dim != model_dim {
            return Err(Error::FeatureDimMismatch {
                features: self.features.dim,
                model: model_dim,
            });
        }
        Ok(())
    }

    pub fn classification_sample(&self, id: u32) -> Result<(&[f32], usize)> {
        match self.features.get(id) {
            Some(SampleFeatures::Classification { label, feature }) => Ok((feature, *label)),
            _ => Err(Error::DanglingSample(id)),
        }
    }

    pub fn region_sample(&self, id: u32) -> Result<&[Region]> {
        match self.features.get(id) {
            Some(SampleFeatures::Region { regions }) => Ok(regions),
            _ => Err(Error::DanglingSample(id)),
        }
    }

    /// Labels of the train split (classification mode), in split order.
    pub fn train_labels(&self) -> Result<Vec<(u32, usize)>> {
        self.manifest
            .splits
            .train
            .iter()
            .map(|&id| Ok((id, self.classification_sample(id)?.1)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Synthetic planted-oracle generation
// ---------------------------------------------------------------------------

/// What the planted per-class embedding is.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlantedKind {
    /// A random in-vocabulary token distinct from the class name: the name
    /// initialization is wrong and training must travel to the plant.
    DistinctToken,
    /// The class name's own token: zero-shot with planted names is perfect.
    MatchingToken,
    /// The name embedding plus a random offset of the given norm (scaled per
    /// rarity group); induces the rarity/similarity structure.
    OffsetFromName { offset: f64 },
}

/// Long-tail profile: the first classes are frequent, then common, the rest
/// rare. Rarer groups get fewer training samples, more feature noise, and a
/// larger planted offset.
#[derive(Clone, Debug, PartialEq)]
pub struct RareProfile {
    pub frequent_classes: usize,
    pub common_classes: usize,
    pub frequent_train: usize,
    pub common_train: usize,
    pub rare_train: usize,
    pub sigma_multiplier_common: f64,
    pub sigma_multiplier_rare: f64,
    pub offset_multiplier_common: f64,
    pub offset_multiplier_rare: f64,
}

impl RareProfile {
    pub fn desk() -> Self {
        RareProfile {
            frequent_classes: 3,
            common_classes: 3,
            frequent_train: 120,
            common_train: 20,
            rare_train: 2,
            sigma_multiplier_common: 1.5,
            sigma_multiplier_rare: 2.5,
            offset_multiplier_common: 1.5,
            offset_multiplier_rare: 2.5,
        }
    }

    fn group_of(&self, class_id: usize) -> usize {
        if class_id < self.frequent_classes {
            0
        } else if class_id < self.frequent_classes + self.common_classes {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub per_class_train: usize,
    pub per_class_eval: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub mode: DatasetMode,
    pub template: String,
    pub planted: PlantedKind,
    pub rare_profile: Option<RareProfile>,
    /// Foreground regions per image (region mode).
    pub regions_per_image: usize,
    /// Pure-noise background regions per image (region mode).
    pub background_per_image: usize,
    /// Emit a half/half base/new partition.
    pub with_partition: bool,
    /// Pairwise cosine cap between planted/name sentence features.
    pub separation_max_cos: f64,
}

impl SyntheticConfig {
    pub fn classification(n_classes: usize, shots: usize, eval: usize, sigma: f64, seed: u64) -> Self {
        SyntheticConfig {
            n_classes,
            per_class_train: shots,
            per_class_eval: eval,
            noise_sigma: sigma,
            seed,
            mode: DatasetMode::Classification,
            template: "default".into(),
            planted: PlantedKind::DistinctToken,
            rare_profile: None,
            regions_per_image: 3,
            background_per_image: 2,
            with_partition: false,
            separation_max_cos: 0.75,
        }
    }
}

/// A generated dataset plus the oracle: the planted embeddings and their
/// encoded (unnormalized) text features.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub manifest: DatasetManifest,
    pub features: FeatureFile,
    pub planted_embeddings: Tensor<f32>,
    pub planted_features: Tensor<f32>,
    pub planted_words: Vec<Option<String>>,
}

impl Synthetic {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(self.manifest.clone(), self.features.clone())
    }
}

fn shuffled_candidates(
    vocab: &Vocabulary,
    excluded: &[u32],
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let mut candidates: Vec<u32> = (NUM_SPECIALS..vocab.len() as u32)
        .filter(|id| !excluded.contains(id))
        .collect();
    for i in (1..candidates.len()).rev() {
        let j = rng.gen_range(0..=i);
        candidates.swap(i, j);
    }
    candidates
}

/// Picks `k` words whose named-query sentence features are mutually
/// separated (pairwise cosine at most `max_cos`, relaxed in steps when the
/// vocabulary cannot satisfy it). Separation keeps the planted inversion
/// problem well-posed: a class embedding recovered from one class's images
/// must not score other classes' images highly.
fn select_separated_words(
    vocab: &Vocabulary,
    model: &Model<f32>,
    template: &crate::tokenizer::PromptTemplate,
    excluded: &mut Vec<u32>,
    k: usize,
    max_cos: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>> {
    use crate::store::LearnableClassEmbeddings;
    use crate::tokenizer::render_named_query;

    let candidates = shuffled_candidates(vocab, excluded, rng);
    assert!(candidates.len() >= k, "vocabulary too small for {k} distinct words");
    let queries: Vec<_> = candidates
        .iter()
        .map(|&id| {
            render_named_query(template, vocab.token_at(id).unwrap(), vocab, model.config.context_len)
                .map(|(seq, _)| seq)
        })
        .collect::<Result<_>>()?;
    let dummy = LearnableClassEmbeddings::new(Tensor::zeros(&[1, model.config.feat_dim]), 1)?;
    let feats = encode_class_set(&queries, model, &dummy, None)?;
    let mut unit_rows: Vec<Vec<f64>> = Vec::with_capacity(candidates.len());
    for i in 0..candidates.len() {
        let row = feats.row(i);
        let norm: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        unit_rows.push(row.iter().map(|&v| v as f64 / norm.max(1e-12)).collect());
    }
    let mut cap = max_cos;
    loop {
        let mut picked: Vec<usize> = Vec::with_capacity(k);
        for i in 0..candidates.len() {
            let ok = picked.iter().all(|&j| {
                let cos: f64 = unit_rows[i]
                    .iter()
                    .zip(&unit_rows[j])
                    .map(|(a, b)| a * b)
                    .sum();
                cos <= cap
            });
            if ok {
                picked.push(i);
                if picked.len() == k {
                    let ids: Vec<u32> = picked.iter().map(|&i| candidates[i]).collect();
                    excluded.extend_from_slice(&ids);
                    return Ok(ids);
                }
            }
        }
        cap += 0.05;
        if cap > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "could not select {k} separated words from the vocabulary"
            )));
        }
    }
}

/// Plants one embedding per class, encodes the planted class text features
/// through the real frozen encoder, and emits image (or region) features as
/// the normalized planted feature plus Gaussian noise. The inversion problem
/// therefore has a known solution in embedding space.
pub fn generate_synthetic(
    config: &SyntheticConfig,
    model: &Model<f32>,
    vocab: &Vocabulary,
) -> Result<Synthetic> {
    if config.n_classes == 0 || config.per_class_eval == 0 {
        return Err(Error::EmptyDataset);
    }
    let template = find_template(&config.template)?;
    let f = model.config.feat_dim;
    let d = model.config.joint_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");

    // reserve template words so class names never collide with the prompt
    let mut excluded: Vec<u32> = tokenize(&template.prefix, vocab)
        .into_iter()
        .chain(tokenize(&template.suffix, vocab))
        .collect();
    // names (and, for distinct-token plants, the plants too) come from one
    // mutually separated pool
    let pool_size = match config.planted {
        PlantedKind::DistinctToken => 2 * config.n_classes,
        _ => config.n_classes,
    };
    let pool = select_separated_words(
        vocab,
        model,
        &template,
        &mut excluded,
        pool_size,
        config.separation_max_cos,
        &mut rng,
    )?;
    let name_ids: Vec<u32> = pool[..config.n_classes].to_vec();
    let class_names: Vec<String> = name_ids
        .iter()
        .map(|&id| vocab.token_at(id).unwrap().to_string())
        .collect();

    // embedding-space norm of a typical token row, used to scale offsets
    let typical_norm = {
        let t = &model.pretrained.table;
        let mut acc = 0.0f64;
        for r in NUM_SPECIALS as usize..t.rows() {
            acc += t.row(r).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        }
        acc / (t.rows() - NUM_SPECIALS as usize) as f64
    };

    let mut planted_words: Vec<Option<String>> = vec![None; config.n_classes];
    let mut planted = Tensor::<f32>::zeros(&[config.n_classes, f]);
    match config.planted {
        PlantedKind::MatchingToken => {
            for (i, &id) in name_ids.iter().enumerate() {
                planted
                    .row_mut(i)
                    .copy_from_slice(model.pretrained.table.row(id as usize));
                planted_words[i] = Some(class_names[i].clone());
            }
        }
        PlantedKind::DistinctToken => {
            let planted_ids: Vec<u32> = pool[config.n_classes..].to_vec();
            for (i, &id) in planted_ids.iter().enumerate() {
                planted
                    .row_mut(i)
                    .copy_from_slice(model.pretrained.table.row(id as usize));
                planted_words[i] = Some(vocab.token_at(id).unwrap().to_string());
            }
        }
        PlantedKind::OffsetFromName { offset } => {
            for (i, &id) in name_ids.iter().enumerate() {
                let mult = match &config.rare_profile {
                    Some(p) => match p.group_of(i) {
                        0 => 1.0,
                        1 => p.offset_multiplier_common,
                        _ => p.offset_multiplier_rare,
                    },
                    None => 1.0,
                };
                let dir: Vec<f64> = (0..f).map(|_| normal.sample(&mut rng)).collect();
                let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = offset * mult * typical_norm / norm.max(1e-12);
                let base = model.pretrained.table.row(id as usize);
                for (j, dst) in planted.row_mut(i).iter_mut().enumerate() {
                    *dst = base[j] + (dir[j] * scale) as f32;
                }
            }
        }
    }

    // planted class text features through the real frozen encoder
    let planted_store = LearnableClassEmbeddings::new(planted.clone(), 1)?;
    let queries: Vec<_> = (0..config.n_classes)
        .map(|c| render_query(&template, c, 1, vocab, model.config.context_len))
        .collect::<Result<_>>()?;
    let planted_features = encode_class_set(&queries, model, &planted_store, None)?;
    let mut targets = Tensor::<f32>::zeros(&[config.n_classes, d]);
    for c in 0..config.n_classes {
        let row = planted_features.row(c);
        let norm: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::DegenerateFeature { row: c });
        }
        for (j, dst) in targets.row_mut(c).iter_mut().enumerate() {
            *dst = (row[j] as f64 / norm) as f32;
        }
    }

    let train_count_of = |class_id: usize| -> usize {
        match &config.rare_profile {
            Some(p) => match p.group_of(class_id) {
                0 => p.frequent_train,
                1 => p.common_train,
                _ => p.rare_train,
            },
            None => config.per_class_train,
        }
    };
    let sigma_of = |class_id: usize| -> f64 {
        let mult = match &config.rare_profile {
            Some(p) => match p.group_of(class_id) {
                0 => 1.0,
                1 => p.sigma_multiplier_common,
                _ => p.sigma_multiplier_rare,
            },
            None => 1.0,
        };
        config.noise_sigma * mult
    };
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let noisy_feature = |rng: &mut ChaCha8Rng, class_id: usize| -> Vec<f32> {
        let sigma = sigma_of(class_id);
        let target = targets.row(class_id);
        let mut v: Vec<f64> = (0..d)
            .map(|j| target[j] as f64 + sigma * normal.sample(rng) * inv_sqrt_d)
            .collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm.max(1e-12);
        }
        v.into_iter().map(|x| x as f32).collect()
    };
    let background_feature = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng) * inv_sqrt_d).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm.max(1e-12);
        }
        v.into_iter().map(|x| x as f32).collect()
    };

    let mut features = FeatureFile::new(d);
    let mut train_ids = Vec::new();
    let mut eval_ids = Vec::new();
    let mut next_id: u32 = 0;
    let mut frequency = vec![0u64; config.n_classes];

    match config.mode {
        DatasetMode::Classification => {
            for class_id in 0..config.n_classes {
                for _ in 0..train_count_of(class_id) {
                    features.push(
                        next_id,
                        SampleFeatures::Classification {
                            label: class_id,
                            feature: noisy_feature(&mut rng, class_id),
                        },
                    )?;
                    train_ids.push(next_id);
                    frequency[class_id] += 1;
                    next_id += 1;
                }
            }
            for class_id in 0..config.n_classes {
                for _ in 0..config.per_class_eval {
                    features.push(
                        next_id,
                        SampleFeatures::Classification {
                            label: class_id,
                            feature: noisy_feature(&mut rng, class_id),
                        },
                    )?;
                    eval_ids.push(next_id);
                    next_id += 1;
                }
            }
        }
        DatasetMode::Region => {
            // queue of foreground region labels, interleaved across classes
            let mut build_split = |rng: &mut ChaCha8Rng,
                                   counts: Vec<usize>,
                                   ids: &mut Vec<u32>,
                                   next_id: &mut u32,
                                   count_freq: bool,
                                   frequency: &mut Vec<u64>|
             -> Result<()> {
                let mut queue: Vec<usize> = Vec::new();
                for (class_id, &n) in counts.iter().enumerate() {
                    queue.extend(std::iter::repeat(class_id).take(n));
                }
                for i in (1..queue.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    queue.swap(i, j);
                }
                for chunk in queue.chunks(config.regions_per_image.max(1)) {
                    let mut regions = Vec::new();
                    for &class_id in chunk {
                        regions.push(Region {
                            labels: vec![class_id],
                            feature: noisy_feature(rng, class_id),
                        });
                        if count_freq {
                            frequency[class_id] += 1;
                        }
                    }
                    for _ in 0..config.background_per_image {
                        regions.push(Region {
                            labels: vec![],
                            feature: background_feature(rng),
                        });
                    }
                    features.push(*next_id, SampleFeatures::Region { regions })?;
                    ids.push(*next_id);
                    *next_id += 1;
                }
                Ok(())
            };
            let train_counts: Vec<usize> = (0..config.n_classes).map(train_count_of).collect();
            build_split(
                &mut rng,
                train_counts,
                &mut train_ids,
                &mut next_id,
                true,
                &mut frequency,
            )?;
            let eval_counts = vec![config.per_class_eval; config.n_classes];
            build_split(
                &mut rng,
                eval_counts,
                &mut eval_ids,
                &mut next_id,
                false,
                &mut frequency,
            )?;
        }
    }

    let classes = (0..config.n_classes)
        .map(|id| ClassEntry {
            id,
            name: class_names[id].clone(),
            frequency_count: frequency[id],
        })
        .collect();
    let partition = config.with_partition.then(|| {
        let half = config.n_classes / 2;
        Partition {
            base: (0..half).collect(),
            new: (half..config.n_classes).collect(),
        }
    });
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        mode: config.mode,
        template: config.template.clone(),
        classes,
        splits: Splits {
            train: train_ids,
            eval: eval_ids,
        },
        partition,
    };
    manifest.validate()?;
    Ok(Synthetic {
        manifest,
        features,
        planted_embeddings: planted,
        planted_features,
        planted_words,
    })
}

/// The stock word list used for generated vocabularies: prompt words first,
/// then object nouns.
pub fn default_word_list() -> Vec<String> {
    let words = [
        // prompt/template words
        "a", "photo", "of", "person", "doing", "type", "flower", "pet", "aircraft", "food",
        "texture", "centered", "satellite", ".", ",",
        // object nouns
        "dog", "cat", "bird", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe",
        "car", "truck", "bus", "train", "boat", "plane", "bicycle", "motorcycle", "scooter",
        "wagon", "apple", "banana", "orange", "lemon", "grape", "melon", "pepper", "carrot",
        "celery", "onion", "chair", "table", "sofa", "bench", "desk", "lamp", "clock", "vase",
        "bottle", "cup", "fork", "knife", "spoon", "bowl", "plate", "pan", "pot", "kettle",
        "book", "pen", "pencil", "paper", "scissors", "hammer", "wrench", "drill", "saw",
        "ladder", "shirt", "jacket", "coat", "dress", "hat", "shoe", "boot", "glove", "scarf",
        "belt", "ball", "bat", "glove2", "racket", "net", "goal", "ski", "sled", "surfboard",
        "kite", "tree", "bush", "grass", "rock", "river", "lake", "mountain", "beach", "cloud",
        "star", "house", "barn", "tower", "bridge", "fence", "gate", "door", "window", "roof",
        "wall", "keyboard", "mouse", "screen", "laptop", "phone", "camera", "radio", "speaker",
        "drone", "robot", "pizza", "burger", "sandwich", "taco", "soup", "salad", "cake",
        "cookie", "bread", "cheese", "tiger", "lion", "wolf", "fox", "rabbit", "deer", "owl",
        "eagle", "shark", "whale", "crab", "snail", "frog", "snake", "lizard", "turtle", "bee",
        "ant", "moth", "spider", "basket", "bucket", "barrel", "crate", "box", "bag", "sack",
        "chest", "drawer", "shelf", "mirror", "towel", "pillow", "blanket", "curtain", "rug",
        "candle", "broom", "mop", "sponge", "soap", "brush", "comb", "razor", "toothbrush",
        "helmet", "anchor", "rope", "chain", "wheel", "engine", "propeller", "sail", "oar",
        "paddle", "tent",
    ];
    words.iter().map(|s| s.to_string()).collect()
}

pub fn default_vocabulary() -> Vocabulary {
    Vocabulary::new(default_word_list()).expect("stock word list is duplicate-free")
}

// ---------------------------------------------------------------------------
// Metrics reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub groups: BTreeMap<String, f64>,
}

/// Per-group metric values for every seed plus the mean, with the run config
/// echoed back. Groups are a subset of {base, new, all, frequent, common,
/// rare}.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub format_version: u32,
    pub task: String,
    pub mode: String,
    pub metric: String,
    pub config: serde_json::Value,
    pub seeds: Vec<SeedMetrics>,
    pub mean: BTreeMap<String, f64>,
}

pub const REPORT_GROUP_ORDER: [&str; 6] = ["base", "new", "all", "frequent", "common", "rare"];

impl MetricsReport {
    pub fn from_seeds(
        task: &str,
        mode: DatasetMode,
        metric: &str,
        config: serde_json::Value,
        seeds: Vec<SeedMetrics>,
    ) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for s in &seeds {
            for (k, v) in &s.groups {
                let e = sums.entry(k.clone()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        let mean = sums
            .into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect();
        MetricsReport {
            format_version: REPORT_VERSION,
            task: task.to_string(),
            mode: match mode {
                DatasetMode::Classification => "classification".into(),
                DatasetMode::Region => "region".into(),
            },
            metric: metric.to_string(),
            config,
            seeds,
            mean,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        atomic_write(path, format!("{body}\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let report: MetricsReport = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        if report.format_version != REPORT_VERSION {
            return Err(Error::BadVersion {
                kind: "report",
                expected: REPORT_VERSION,
                found: report.format_version,
            });
        }
        Ok(report)
    }

    /// Renders the paper-style table: one row per class group, one column
    /// per seed plus the mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_group");
        for s in &self.seeds {
            out.push_str(&format!(",seed{}", s.seed));
        }
        out.push_str(",mean\n");
        let groups: Vec<&str> = REPORT_GROUP_ORDER
            .iter()
            .copied()
            .filter(|g| self.mean.contains_key(*g))
            .collect();
        for g in groups {
            out.push_str(g);
            for s in &self.seeds {
                match s.groups.get(g) {
                    Some(v) => out.push_str(&format!(",{v:.4}")),
                    None => out.push(','),
                }
            }
            out.push_str(&format!(",{:.4}\n", self.mean[g]));
        }
        out
    }
}

/// Deterministic evaluation fan-out helper: scores every listed sample with
/// `f` (in parallel when enabled) and returns results in sample order.
pub fn map_samples<T: Send>(ids: &[u32], f: impl Fn(u32) -> T + Sync + Send) -> Vec<T> {
    par::map_indexed(ids.len(), |i| f(ids[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::store::generate_model;

    fn tiny_manifest() -> DatasetManifest {
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            mode: DatasetMode::Classification,
            template: "default".into(),
            classes: vec![ClassEntry {
                id: 0,
                name: "dog".into(),
                frequency_count: 1,
            }],
            splits: Splits {
                train: vec![0],
                eval: vec![0],
            },
            partition: None,
        }
    }

    #[test]
    fn minimal_dataset_loads_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest();
        let mut features = FeatureFile::new(4);
        features
            .push(
                0,
                SampleFeatures::Classification {
                    label: 0,
                    feature: vec![0.1, 0.2, 0.3, 0.4],
                },
            )
            .unwrap();
        let mpath = dir.path().join("manifest.json");
        let fpath = dir.path().join("features.nvft");
        manifest.save(&mpath).unwrap();
        features.save(&fpath).unwrap();
        let ds = Dataset::load(&mpath, &fpath).unwrap();
        assert_eq!(ds.features, features);
        assert_eq!(ds.manifest, manifest);
        // byte-identical on re-save
        let bytes1 = std::fs::read(&fpath).unwrap();
        ds.features.save(&fpath).unwrap();
        assert_eq!(bytes1, std::fs::read(&fpath).unwrap());
    }

    #[test]
    fn dangling_sample_id_is_named() {
        let mut manifest = tiny_manifest();
        manifest.splits.eval = vec![7];
        let mut features = FeatureFile::new(2);
        features
            .push(
                0,
                SampleFeatures::Classification {
                    label: 0,
                    feature: vec![1.0, 0.0],
                },
            )
            .unwrap();
        match Dataset::new(manifest, features) {
            Err(Error::DanglingSample(7)) => {}
            other => panic!("expected dangling sample 7, got {other:?}"),
        }
    }

    #[test]
    fn feature_dim_mismatch_is_rejected() {
        let manifest = tiny_manifest();
        let mut features = FeatureFile::new(64);
        features
            .push(
                0,
                SampleFeatures::Classification {
                    label: 0,
                    feature: vec![0.0; 64],
                },
            )
            .unwrap();
        let ds = Dataset::new(manifest, features).unwrap();
        match ds.check_dim(32) {
            Err(Error::FeatureDimMismatch {
                features: 64,
                model: 32,
            }) => {}
            other => panic!("expected dim mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_feature_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut features = FeatureFile::new(3);
        features
            .push(
                0,
                SampleFeatures::Classification {
                    label: 0,
                    feature: vec![1.0, 2.0, 3.0],
                },
            )
            .unwrap();
        let fpath = dir.path().join("features.nvft");
        features.save(&fpath).unwrap();
        let bytes = std::fs::read(&fpath).unwrap();
        std::fs::write(&fpath, &bytes[..bytes.len() - 1]).unwrap();
        match FeatureFile::load(&fpath, DatasetMode::Classification) {
            Err(Error::Truncated { .. }) => {}
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("features.nvft");
        std::fs::write(&fpath, b"XXXX\x01\x00\x00\x00").unwrap();
        match FeatureFile::load(&fpath, DatasetMode::Classification) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn partition_must_cover_all_classes() {
        let mut manifest = tiny_manifest();
        manifest.classes.push(ClassEntry {
            id: 1,
            name: "cat".into(),
            frequency_count: 1,
        });
        manifest.partition = Some(Partition {
            base: vec![0],
            new: vec![],
        });
        assert!(matches!(
            manifest.validate(),
            Err(Error::InvalidManifest(_))
        ));
    }

    #[test]
    fn synthetic_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
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
        let model = generate_model(&config, vocab.len(), 3).unwrap();
        let synth = generate_synthetic(
            &SyntheticConfig::classification(4, 3, 2, 0.05, 1),
            &model,
            &vocab,
        )
        .unwrap();
        let mpath = dir.path().join("manifest.json");
        let fpath = dir.path().join("features.nvft");
        synth.manifest.save(&mpath).unwrap();
        synth.features.save(&fpath).unwrap();
        let ds = Dataset::load(&mpath, &fpath).unwrap();
        assert_eq!(ds.manifest, synth.manifest);
        assert_eq!(ds.features, synth.features);
        assert_eq!(ds.manifest.splits.train.len(), 12);
        assert_eq!(ds.manifest.splits.eval.len(), 8);
        // frequency counts reflect the actual per-class train counts
        for c in &ds.manifest.classes {
            assert_eq!(c.frequency_count, 3);
        }
    }

    #[test]
    fn noiseless_plant_with_matching_names_scores_everything() {
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
        let model = generate_model(&config, vocab.len(), 4).unwrap();
        let mut cfg = SyntheticConfig::classification(3, 2, 2, 0.0, 9);
        cfg.planted = PlantedKind::MatchingToken;
        let synth = generate_synthetic(&cfg, &model, &vocab).unwrap();
        // sigma = 0: every image feature equals its normalized class text feature
        let ds = synth.dataset().unwrap();
        for &id in &ds.manifest.splits.eval {
            let (feat, label) = ds.classification_sample(id).unwrap();
            let planted = synth.planted_features.row(label);
            let norm: f64 = planted.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            for (a, &b) in feat.iter().zip(planted) {
                assert!((*a as f64 - b as f64 / norm).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rare_profile_counts_land_in_manifest() {
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
        let model = generate_model(&config, vocab.len(), 5).unwrap();
        let mut cfg = SyntheticConfig::classification(8, 16, 2, 0.05, 2);
        cfg.mode = DatasetMode::Region;
        cfg.planted = PlantedKind::OffsetFromName { offset: 1.0 };
        cfg.rare_profile = Some(RareProfile::desk());
        let synth = generate_synthetic(&cfg, &model, &vocab).unwrap();
        let counts = synth.manifest.frequency_counts();
        assert_eq!(&counts[..3], &[120, 120, 120]);
        assert_eq!(&counts[3..6], &[20, 20, 20]);
        assert_eq!(&counts[6..], &[2, 2]);
    }

    #[test]
    fn report_csv_layout() {
        let mut groups = BTreeMap::new();
        groups.insert("base".to_string(), 0.828);
        groups.insert("new".to_string(), 0.742);
        groups.insert("all".to_string(), 0.687);
        let report = MetricsReport::from_seeds(
            "openvocab",
            DatasetMode::Classification,
            "accuracy",
            serde_json::json!({}),
            vec![
                SeedMetrics {
                    seed: 0,
                    groups: groups.clone(),
                },
                SeedMetrics { seed: 1, groups },
            ],
        );
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class_group,seed0,seed1,mean");
        assert!(lines[1].starts_with("base,"));
        assert!(lines[2].starts_with("new,"));
        assert!(lines[3].starts_with("all,"));
    }
}
