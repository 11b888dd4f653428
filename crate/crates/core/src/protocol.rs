//! Episode construction and the on-disk dataset format.
//!
//! A dataset directory holds `dataset.json` (split, provenance, episode
//! labels) and `embeddings.emb`, an EMB1 container with tensors
//! `ep{i}/query/ch{m}` (1 x d_q) and `ep{i}/candidates/ch{n}` (T x d_r), plus
//! `ep{i}/raw/query` and `ep{i}/raw/candidates` when raw features exist.
//!
//! An item pool is an EMB1 file with tensors `ch{k}` (items x d) and an
//! optional `raw` (items x d_raw), plus a JSON labels file
//! `{"classes": [...], "superclasses": [...]}` (superclasses optional).

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Container, DType};
use crate::embed::{synth_channel, EmbeddingBundle, RawInputs};
use crate::error::{Error, Result};
use crate::model::canonical_order;
use crate::numkit::{DenseMatrix, Rng};

pub const DEFAULT_EPISODE_LEN: usize = 30;
pub const MAX_POSITIVES: usize = 9;
pub const NEWSGROUPS_RANGE: (usize, usize) = (3, 7);
pub const NEWSGROUPS_RETRIES: usize = 100;
pub const DATASET_FILE: &str = "dataset.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.emb";
const FORMAT: &str = "attrank-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEpisode {
    pub id: String,
    pub query_id: usize,
    pub candidate_ids: Vec<usize>,
    /// 0 unrelated, 1 related (or same superclass), 2 same topic.
    pub labels: Vec<u8>,
    /// Candidates by descending label, ties by ascending index.
    pub target: Vec<usize>,
    pub bundle: EmbeddingBundle,
}

impl QueryEpisode {
    pub fn new(id: String, query_id: usize, candidate_ids: Vec<usize>, labels: Vec<u8>, bundle: EmbeddingBundle) -> Result<Self> {
        if labels.len() != bundle.len() || candidate_ids.len() != bundle.len() {
            return Err(Error::invalid(format!(
                "episode {id}: {} labels and {} candidate ids for {} candidates",
                labels.len(),
                candidate_ids.len(),
                bundle.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 2) {
            return Err(Error::invalid(format!("episode {id}: label {bad} outside 0..=2")));
        }
        if labels.iter().all(|&l| l == 0) {
            return Err(Error::invalid(format!("episode {id}: no relevant candidate")));
        }
        let target = canonical_order(&labels);
        Ok(QueryEpisode {
            id,
            query_id,
            candidate_ids,
            labels,
            target,
            bundle,
        })
    }

    /// Labels binarized at `label >= threshold`.
    pub fn binary_labels(&self, threshold: u8) -> Vec<u8> {
        self.labels.iter().map(|&l| u8::from(l >= threshold)).collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub protocol: String,
    pub seed: u64,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub provenance: Provenance,
    /// Training relevance is `label >= target_threshold`.
    pub target_threshold: u8,
    pub episodes: Vec<QueryEpisode>,
}

impl Dataset {
    pub fn new(split: Split, provenance: Provenance, target_threshold: u8, episodes: Vec<QueryEpisode>) -> Result<Self> {
        let mut ids = HashSet::new();
        if let Some(dup) = episodes.iter().find(|e| !ids.insert(e.id.as_str())) {
            return Err(Error::invalid(format!("duplicate episode id {}", dup.id)));
        }
        if let Some(first) = episodes.first() {
            let shape = |b: &EmbeddingBundle| (b.query_channels(), b.candidate_channels(), b.query_dim(), b.candidate_dim());
            if episodes.iter().any(|e| shape(&e.bundle) != shape(&first.bundle)) {
                return Err(Error::invalid("episodes disagree on channel counts or dimensions"));
            }
        }
        Ok(Dataset {
            split,
            provenance,
            target_threshold,
            episodes,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Copy keeping only the first `query` / `candidate` channels of every bundle.
    pub fn select_channels(&self, query: usize, candidate: usize) -> Result<Self> {
        let episodes = self
            .episodes
            .iter()
            .map(|e| {
                Ok(QueryEpisode {
                    bundle: e.bundle.select_channels(query, candidate)?,
                    ..e.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            episodes,
            ..self.clone()
        })
    }

    /// Marks channels frozen (`true`) or trainable for every bundle.
    pub fn with_frozen(&self, query_frozen: &[bool], candidate_frozen: &[bool]) -> Result<Self> {
        let episodes = self
            .episodes
            .iter()
            .map(|e| {
                Ok(QueryEpisode {
                    bundle: e.bundle.clone().with_frozen(query_frozen.to_vec(), candidate_frozen.to_vec())?,
                    ..e.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            episodes,
            ..self.clone()
        })
    }
}

/// Labeled items with per-channel embeddings, shared by query and candidate roles.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemPool {
    classes: Vec<usize>,
    superclasses: Option<Vec<usize>>,
    /// `[item][channel]`
    embeddings: Vec<Vec<Vec<f64>>>,
    raw: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolLabels {
    pub classes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superclasses: Option<Vec<usize>>,
}

impl ItemPool {
    pub fn new(
        classes: Vec<usize>,
        superclasses: Option<Vec<usize>>,
        embeddings: Vec<Vec<Vec<f64>>>,
        raw: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let n = classes.len();
        if n == 0 || embeddings.len() != n {
            return Err(Error::invalid(format!("pool has {n} labels and {} embedded items", embeddings.len())));
        }
        if superclasses.as_ref().is_some_and(|s| s.len() != n) || raw.as_ref().is_some_and(|r| r.len() != n) {
            return Err(Error::invalid("pool superclass/raw lists must match the item count"));
        }
        let channels = embeddings[0].len();
        let dim = embeddings[0].first().map_or(0, Vec::len);
        if channels == 0 || dim == 0 {
            return Err(Error::invalid("pool items need at least one non-empty channel"));
        }
        if embeddings.iter().any(|e| e.len() != channels || e.iter().any(|v| v.len() != dim)) {
            return Err(Error::invalid("pool items disagree on channel count or dimension"));
        }
        if let Some(r) = &raw {
            if r.iter().any(|v| v.len() != r[0].len()) {
                return Err(Error::invalid("raw feature rows disagree in length"));
            }
        }
        Ok(ItemPool {
            classes,
            superclasses,
            embeddings,
            raw,
        })
    }

    /// `per_class` items for each of `config.classes` classes, class `i % C` at item `i`.
    /// Channel `k` of every item uses noise `noise[k]`.
    pub fn synthetic(rng: &mut Rng, classes: usize, per_class: usize, kappa: f64, noise: &[f64], superclass_of: Option<&[usize]>) -> Result<Self> {
        if classes < 2 || per_class == 0 || noise.is_empty() {
            return Err(Error::invalid("synthetic pool needs >= 2 classes, >= 1 item per class and >= 1 channel"));
        }
        if superclass_of.is_some_and(|s| s.len() != classes) {
            return Err(Error::invalid("superclass map must cover every class"));
        }
        let n = classes * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let embeddings = labels
            .iter()
            .map(|&c| noise.iter().map(|&s| synth_channel(rng, c, classes, kappa, s)).collect())
            .collect();
        let superclasses = superclass_of.map(|map| labels.iter().map(|&c| map[c]).collect());
        ItemPool::new(labels, superclasses, embeddings, None)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0][0].len()
    }

    pub fn class(&self, item: usize) -> usize {
        self.classes[item]
    }

    pub fn superclass(&self, item: usize) -> Option<usize> {
        self.superclasses.as_ref().map(|s| s[item])
    }

    pub fn labels(&self) -> PoolLabels {
        PoolLabels {
            classes: self.classes.clone(),
            superclasses: self.superclasses.clone(),
        }
    }

    fn bundle(&self, query: usize, candidates: &[usize]) -> Result<EmbeddingBundle> {
        let b = EmbeddingBundle::new(
            self.embeddings[query].clone(),
            candidates.iter().map(|&c| self.embeddings[c].clone()).collect(),
        )?;
        match &self.raw {
            None => Ok(b),
            Some(raw) => b.with_raw(RawInputs {
                query: raw[query].clone(),
                candidates: candidates.iter().map(|&c| raw[c].clone()).collect(),
            }),
        }
    }

    pub fn to_container(&self, dtype: DType) -> Container {
        let mut c = Container::new(dtype, json!({"kind": "item_pool", "items": self.len(), "channels": self.channels()}));
        for k in 0..self.channels() {
            let data = self.embeddings.iter().flat_map(|e| e[k].iter().copied()).collect();
            c.push(format!("ch{k}"), DenseMatrix::from_vec(self.len(), self.dim(), data).expect("validated pool"), None);
        }
        if let Some(raw) = &self.raw {
            c.push("raw", DenseMatrix::from_rows(raw).expect("validated raw"), None);
        }
        c
    }

    pub fn write(&self, embeddings: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
        self.to_container(DType::F64).write(embeddings)?;
        let path = labels.as_ref();
        let text = serde_json::to_string_pretty(&self.labels()).expect("labels serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(embeddings: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let c = Container::read(embeddings)?;
        let path = labels.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let labels: PoolLabels = from_json_str(&text)?;
        let mut embeddings = vec![Vec::new(); labels.classes.len()];
        let mut k = 0;
        while let Ok(m) = c.get(&format!("ch{k}")) {
            if m.rows() != embeddings.len() {
                return Err(Error::Schema {
                    path: format!("ch{k}"),
                    message: format!("{} rows for {} labels", m.rows(), embeddings.len()),
                });
            }
            for (i, e) in embeddings.iter_mut().enumerate() {
                e.push(m.row(i).to_vec());
            }
            k += 1;
        }
        if k == 0 {
            return Err(Error::MissingTensor("ch0".into()));
        }
        let raw = c.get("raw").ok().map(|m| (0..m.rows()).map(|i| m.row(i).to_vec()).collect());
        ItemPool::new(labels.classes, labels.superclasses, embeddings, raw)
    }
}

fn from_json_str<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: format!("$.{}", e.path()),
        message: e.inner().to_string(),
    })
}

fn class_counts(pool: &ItemPool) -> String {
    let mut counts = std::collections::BTreeMap::new();
    for &c in &pool.classes {
        *counts.entry(c).or_insert(0usize) += 1;
    }
    counts.iter().map(|(c, n)| format!("{c}:{n}")).collect::<Vec<_>>().join(", ")
}

fn query_count(pool: &ItemPool, queries: Option<usize>) -> Result<usize> {
    match queries {
        None => Ok(pool.len()),
        Some(n) if n <= pool.len() => Ok(n),
        Some(n) => Err(Error::InsufficientPool(format!("{n} queries requested from a pool of {}", pool.len()))),
    }
}

/// One episode per query item (the first `queries` items, or all): `k ~ U{1..9}` same-class
/// candidates (label 1) and `T - k` other-class candidates (label 0), shuffled.
/// The CIFAR-style protocol is this function applied to a different pool.
pub fn build_mnist_style(rng: &mut Rng, pool: &ItemPool, t: usize, queries: Option<usize>, split: Split) -> Result<Dataset> {
    if t <= MAX_POSITIVES {
        return Err(Error::invalid(format!("episode length {t} must exceed {MAX_POSITIVES}")));
    }
    let n_queries = query_count(pool, queries)?;
    let max_class = pool.classes.iter().copied().max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); max_class + 1];
    for (i, &c) in pool.classes.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut episodes = Vec::with_capacity(n_queries);
    for q in 0..n_queries {
        let class = pool.class(q);
        let same: Vec<usize> = by_class[class].iter().copied().filter(|&i| i != q).collect();
        let other: Vec<usize> = (0..pool.len()).filter(|&i| pool.class(i) != class).collect();
        if same.len() < MAX_POSITIVES || other.len() < t - 1 {
            return Err(Error::InsufficientPool(format!(
                "query {q} (class {class}) has {} same-class and {} other-class items; need {MAX_POSITIVES} and {} (class counts {})",
                same.len(),
                other.len(),
                t - 1,
                class_counts(pool)
            )));
        }
        let k = rng.inclusive(1, MAX_POSITIVES);
        let mut picks: Vec<(usize, u8)> = rng.sample(&same, k).into_iter().map(|i| (i, 1)).collect();
        picks.extend(rng.sample(&other, t - k).into_iter().map(|i| (i, 0)));
        rng.shuffle(&mut picks);
        let ids: Vec<usize> = picks.iter().map(|p| p.0).collect();
        let labels = picks.iter().map(|p| p.1).collect();
        let bundle = pool.bundle(q, &ids)?;
        episodes.push(QueryEpisode::new(format!("{split}-{q}"), q, ids, labels, bundle)?);
    }
    let provenance = Provenance {
        protocol: "mnist-style".into(),
        seed: rng.seed(),
        params: json!({"t": t, "queries": n_queries, "max_positives": MAX_POSITIVES}),
    };
    Dataset::new(split, provenance, 1, episodes)
}

/// One episode per query item: `a ~ U{3..7}` same-topic (label 2), `b ~ U{3..7}` same-superclass
/// other-topic (label 1) and `T - a - b` other-superclass (label 0) candidates, shuffled.
/// Draws the pools cannot satisfy are redrawn up to 100 times. Training targets use
/// the topic-level binary order.
pub fn build_newsgroups_style(rng: &mut Rng, pool: &ItemPool, t: usize, queries: Option<usize>, split: Split) -> Result<Dataset> {
    let (lo, hi) = NEWSGROUPS_RANGE;
    if t < 2 * hi + 1 {
        return Err(Error::invalid(format!("episode length {t} must be at least {}", 2 * hi + 1)));
    }
    let supers = pool
        .superclasses
        .as_ref()
        .ok_or_else(|| Error::InsufficientPool("newsgroups-style episodes need superclass labels".into()))?;
    let n_queries = query_count(pool, queries)?;
    let mut episodes = Vec::with_capacity(n_queries);
    for q in 0..n_queries {
        let (topic, sup) = (pool.class(q), supers[q]);
        let same: Vec<usize> = (0..pool.len()).filter(|&i| i != q && pool.class(i) == topic).collect();
        let near: Vec<usize> = (0..pool.len()).filter(|&i| pool.class(i) != topic && supers[i] == sup).collect();
        let far: Vec<usize> = (0..pool.len()).filter(|&i| supers[i] != sup).collect();
        let mut draw = None;
        for _ in 0..NEWSGROUPS_RETRIES {
            let (a, b) = (rng.inclusive(lo, hi), rng.inclusive(lo, hi));
            if a <= same.len() && b <= near.len() && t - a - b <= far.len() {
                draw = Some((a, b));
                break;
            }
        }
        let (a, b) = draw.ok_or_else(|| {
            Error::InsufficientPool(format!(
                "query {q}: {} same-topic, {} same-superclass and {} other items cannot fill {t} candidates after {NEWSGROUPS_RETRIES} draws (class counts {})",
                same.len(),
                near.len(),
                far.len(),
                class_counts(pool)
            ))
        })?;
        let mut picks: Vec<(usize, u8)> = rng.sample(&same, a).into_iter().map(|i| (i, 2)).collect();
        picks.extend(rng.sample(&near, b).into_iter().map(|i| (i, 1)));
        picks.extend(rng.sample(&far, t - a - b).into_iter().map(|i| (i, 0)));
        rng.shuffle(&mut picks);
        let ids: Vec<usize> = picks.iter().map(|p| p.0).collect();
        let labels = picks.iter().map(|p| p.1).collect();
        let bundle = pool.bundle(q, &ids)?;
        episodes.push(QueryEpisode::new(format!("{split}-{q}"), q, ids, labels, bundle)?);
    }
    let provenance = Provenance {
        protocol: "newsgroups-style".into(),
        seed: rng.seed(),
        params: json!({"t": t, "queries": n_queries, "range": [lo, hi]}),
    };
    Dataset::new(split, provenance, 2, episodes)
}

/// Synthetic multi-channel benchmark: each split gets its own item pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub classes: usize,
    pub kappa: f64,
    pub noise: Vec<f64>,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub t: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            classes: 10,
            kappa: 5.0,
            noise: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            train: 2000,
            validation: 200,
            test: 500,
            t: DEFAULT_EPISODE_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

pub fn build_benchmark(seed: u64, config: &BenchmarkConfig) -> Result<Splits> {
    let root = Rng::new(seed);
    let make = |split: Split, queries: usize| -> Result<Dataset> {
        // Enough items that every class has the positives and every query enough negatives.
        let per_class = queries.div_ceil(config.classes).max(MAX_POSITIVES + 1).max(config.t);
        let mut pool_rng = root.fork(&format!("pool/{split}"));
        let pool = ItemPool::synthetic(&mut pool_rng, config.classes, per_class, config.kappa, &config.noise, None)?;
        let mut rng = root.fork(&format!("episodes/{split}"));
        let mut ds = build_mnist_style(&mut rng, &pool, config.t, Some(queries), split)?;
        ds.provenance = Provenance {
            protocol: "synthetic-benchmark".into(),
            seed,
            params: serde_json::to_value(config).expect("config serializes"),
        };
        Ok(ds)
    };
    Ok(Splits {
        train: make(Split::Train, config.train)?,
        validation: make(Split::Validation, config.validation)?,
        test: make(Split::Test, config.test)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    id: String,
    query_id: usize,
    candidate_ids: Vec<usize>,
    labels: Vec<u8>,
    target: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    version: u32,
    split: Split,
    provenance: Provenance,
    target_threshold: u8,
    query_channels: usize,
    candidate_channels: usize,
    embeddings: String,
    episodes: Vec<EpisodeRecord>,
}

fn manifest_of(ds: &Dataset) -> DatasetManifest {
    let (m, n) = ds
        .episodes
        .first()
        .map_or((0, 0), |e| (e.bundle.query_channels(), e.bundle.candidate_channels()));
    DatasetManifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        split: ds.split,
        provenance: ds.provenance.clone(),
        target_threshold: ds.target_threshold,
        query_channels: m,
        candidate_channels: n,
        embeddings: EMBEDDINGS_FILE.into(),
        episodes: ds
            .episodes
            .iter()
            .map(|e| EpisodeRecord {
                id: e.id.clone(),
                query_id: e.query_id,
                candidate_ids: e.candidate_ids.clone(),
                labels: e.labels.clone(),
                target: e.target.clone(),
            })
            .collect(),
    }
}

/// Writes `dataset.json` and `embeddings.emb` into `dir` (created if missing).
pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset, dtype: DType) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = manifest_of(ds);
    let mut c = Container::new(dtype, json!({"kind": "dataset_embeddings", "episodes": ds.len()}));
    for (i, e) in ds.episodes.iter().enumerate() {
        e.bundle.append_to(&mut c, &format!("ep{i}/"));
    }
    c.write(dir.join(EMBEDDINGS_FILE))?;
    let path = dir.join(DATASET_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(DATASET_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = from_json_str(&text)?;
    let schema = |path: String, message: String| Error::Schema { path, message };
    if manifest.format != FORMAT {
        return Err(schema("$.format".into(), format!("expected \"{FORMAT}\"")));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(schema("$.version".into(), format!("unsupported version {}", manifest.version)));
    }
    let c = Container::read(dir.join(&manifest.embeddings))?;
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for (i, rec) in manifest.episodes.into_iter().enumerate() {
        let bundle = EmbeddingBundle::from_container(&c, &format!("ep{i}/"), manifest.query_channels, manifest.candidate_channels)?;
        let ep = QueryEpisode::new(rec.id, rec.query_id, rec.candidate_ids, rec.labels, bundle)
            .map_err(|e| schema(format!("$.episodes[{i}]"), e.to_string()))?;
        if ep.target != rec.target {
            return Err(schema(format!("$.episodes[{i}].target"), "not the canonical order of the labels".into()));
        }
        episodes.push(ep);
    }
    Dataset::new(manifest.split, manifest.provenance, manifest.target_threshold, episodes)
        .map_err(|e| schema("$.episodes".into(), e.to_string()))
}
