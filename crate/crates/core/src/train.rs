//! Minibatch SGD for the ranking network, validation-based epoch selection,
//! channel-count sweeps and parameter-norm diagnostics.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{rank_beam, Ranking, DEFAULT_BEAM_WIDTH};
use crate::metrics::{LabelView, MetricReport, MetricSummary};
use crate::model::{self, canonical_order, init_params, AttRNParams, Dims, InitScheme, LossKind, Pooling, DEFAULT_ATTENTION_DIM, DEFAULT_DECODER_DIM};
use crate::numkit::Rng;
use crate::protocol::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Mnist,
    Cifar,
    Newsgroups,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beam_width: usize,
    pub seed: u64,
    pub pooling: Pooling,
    pub init: InitScheme,
    /// Use only the first `k` query channels (all when absent).
    pub query_channels: Option<usize>,
    pub candidate_channels: Option<usize>,
    pub decoder_dim: usize,
    pub attention_dim: usize,
    /// Wall-clock seconds per epoch in the log; off keeps logs reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Mnist)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (batch_size, learning_rate, epochs) = match preset {
            Preset::Mnist => (100, 0.001, 20),
            Preset::Cifar => (50, 0.0005, 20),
            Preset::Newsgroups => (100, 0.0001, 50),
        };
        TrainConfig {
            loss: LossKind::Hinge,
            batch_size,
            learning_rate,
            epochs,
            beam_width: DEFAULT_BEAM_WIDTH,
            seed: 0,
            pooling: Pooling::Mean,
            init: InitScheme::SmallRandom,
            query_channels: None,
            candidate_channels: None,
            decoder_dim: DEFAULT_DECODER_DIM,
            attention_dim: DEFAULT_ATTENTION_DIM,
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.beam_width == 0 {
            return Err(Error::invalid("batch_size, epochs and beam_width must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.decoder_dim == 0 || self.attention_dim == 0 {
            return Err(Error::invalid("decoder_dim and attention_dim must be positive"));
        }
        Ok(())
    }

    /// Applies the channel subset to a dataset.
    pub fn select(&self, ds: &Dataset) -> Result<Dataset> {
        let first = ds.episodes.first().ok_or_else(|| Error::invalid("empty dataset"))?;
        let m = self.query_channels.unwrap_or(first.bundle.query_channels());
        let n = self.candidate_channels.unwrap_or(first.bundle.candidate_channels());
        if m == first.bundle.query_channels() && n == first.bundle.candidate_channels() {
            return Ok(ds.clone());
        }
        ds.select_channels(m, n)
    }

    /// Seeded initial parameters sized for `ds` (after channel selection).
    pub fn init_for(&self, ds: &Dataset) -> Result<AttRNParams> {
        let first = ds.episodes.first().ok_or_else(|| Error::invalid("empty dataset"))?;
        let dims = Dims::for_bundle(&first.bundle, self.decoder_dim, self.attention_dim);
        init_params(dims, self.pooling, self.init, &mut Rng::new(self.seed).fork("init"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-episode training loss over the epoch.
    pub train_loss: f64,
    pub validation_map: f64,
    pub norms: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_norms: BTreeMap<String, f64>,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("log serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: AttRNParams,
    pub log: TrainLog,
}

/// Frobenius norm per parameter group.
pub fn param_norms(p: &AttRNParams) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for (name, m) in p.tensors() {
        let group = match name.split('.').collect::<Vec<_>>().as_slice() {
            [layer, l, _] if layer.starts_with("embedder") => format!("{layer}.{l}"),
            [group, ..] => group.to_string(),
            [] => unreachable!(),
        };
        *sums.entry(group).or_insert(0.0) += m.as_slice().iter().map(|v| v * v).sum::<f64>();
    }
    sums.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increased,
    Decreased,
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub group: String,
    pub before: f64,
    pub after: f64,
    pub direction: Direction,
}

/// Before/after norms per group, in group-name order.
pub fn norm_report(before: &AttRNParams, after: &AttRNParams) -> Vec<NormRow> {
    let a = param_norms(after);
    param_norms(before)
        .into_iter()
        .map(|(group, b)| {
            let after = a.get(&group).copied().unwrap_or(f64::NAN);
            let direction = match after.partial_cmp(&b) {
                Some(std::cmp::Ordering::Greater) => Direction::Increased,
                Some(std::cmp::Ordering::Less) => Direction::Decreased,
                _ => Direction::Unchanged,
            };
            NormRow {
                group,
                before: b,
                after,
                direction,
            }
        })
        .collect()
}

/// Relevance used for training targets and validation.
fn training_relevance(ds: &Dataset) -> Vec<Vec<u8>> {
    ds.episodes.iter().map(|e| e.binary_labels(ds.target_threshold)).collect()
}

/// Averaged loss and gradient over a minibatch (ordered reduction).
pub fn batch_gradient(
    params: &AttRNParams,
    ds: &Dataset,
    relevance: &[Vec<u8>],
    indices: &[usize],
    loss: LossKind,
) -> Result<(f64, AttRNParams)> {
    let results: Vec<Result<model::LossAndGrad>> = indices
        .par_iter()
        .map(|&i| {
            let order = canonical_order(&relevance[i]);
            model::loss(loss, params, &ds.episodes[i].bundle, &order, &relevance[i])
        })
        .collect();
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for r in results {
        let lg = r?;
        total += lg.loss;
        grads.add_scaled(1.0, &lg.grads)?;
    }
    let n = indices.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Beam-search rankings for every episode, in dataset order.
pub fn rank_dataset(params: &AttRNParams, ds: &Dataset, beam_width: usize) -> Result<Vec<Ranking>> {
    ds.episodes.par_iter().map(|e| rank_beam(params, &e.bundle, beam_width)).collect()
}

pub fn evaluate(params: &AttRNParams, ds: &Dataset, beam_width: usize, view: LabelView) -> Result<MetricReport> {
    let rankings = rank_dataset(params, ds, beam_width)?;
    let labels: Vec<Vec<u8>> = rankings
        .iter()
        .zip(&ds.episodes)
        .map(|(r, e)| r.order.iter().map(|&t| e.labels[t]).collect())
        .collect();
    MetricReport::from_rankings(labels.iter().map(Vec::as_slice), view)
}

pub fn train(config: &TrainConfig, train_set: &Dataset, validation: &Dataset, params: AttRNParams) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let relevance = training_relevance(train_set);
    let view = LabelView::AtLeast(validation.target_threshold);
    let root = Rng::new(config.seed).fork("train");
    let mut params = params;
    let mut best: Option<(f64, usize, AttRNParams)> = None;
    let mut log = TrainLog {
        initial_norms: param_norms(&params),
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        root.fork_indexed("epoch", epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let divergence = Error::Divergence { epoch, batch: b + 1 };
            let (loss, grads) = match batch_gradient(&params, train_set, &relevance, chunk, config.loss) {
                Ok(v) => v,
                Err(e) if e.is_numeric() => return Err(divergence),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.is_finite() {
                return Err(divergence);
            }
            loss_sum += loss * chunk.len() as f64;
            params.add_scaled(-config.learning_rate, &grads)?;
        }
        let validation_map = match evaluate(&params, validation, config.beam_width, view) {
            Ok(r) => r.map.mean,
            Err(e) if e.is_numeric() => return Err(Error::Divergence { epoch, batch: 0 }),
            Err(e) => return Err(e),
        };
        log::info!("epoch {epoch}: train loss {:.6}, validation MAP {validation_map:.6}", loss_sum / train_set.len() as f64);
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            validation_map,
            norms: param_norms(&params),
            wall_seconds: config.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        });
        if best.as_ref().is_none_or(|(m, _, _)| validation_map > *m) {
            best = Some((validation_map, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    log.best_epoch = best_epoch;
    Ok(TrainOutcome { params: best_params, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub channels: usize,
    pub runs: usize,
    pub map: MetricSummary,
    pub ndcg3: MetricSummary,
    pub ndcg5: MetricSummary,
}

/// One model per (channel count, seed) on the first `k` query and candidate channels;
/// test metrics are aggregated over seeds.
pub fn sweep_channels(
    config: &TrainConfig,
    train_set: &Dataset,
    validation: &Dataset,
    test: &Dataset,
    counts: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one seed"));
    }
    let view = LabelView::AtLeast(test.target_threshold);
    counts
        .iter()
        .map(|&k| {
            let cfg = TrainConfig {
                query_channels: Some(k),
                candidate_channels: Some(k),
                ..config.clone()
            };
            let reports = seeds
                .iter()
                .map(|&seed| {
                    let cfg = TrainConfig { seed, ..cfg.clone() };
                    let (tr, va, te) = (cfg.select(train_set)?, cfg.select(validation)?, cfg.select(test)?);
                    let out = train(&cfg, &tr, &va, cfg.init_for(&tr)?)?;
                    evaluate(&out.params, &te, cfg.beam_width, view)
                })
                .collect::<Result<Vec<_>>>()?;
            let combined = MetricReport::combine_runs(&reports)?;
            Ok(SweepRow {
                channels: k,
                runs: seeds.len(),
                map: combined.map,
                ndcg3: combined.ndcg3,
                ndcg5: combined.ndcg5,
            })
        })
        .collect()
}

/// Error-rate table (percent) of a sweep.
pub fn format_sweep(rows: &[SweepRow]) -> String {
    let cell = |s: &MetricSummary| match s.sd {
        Some(sd) => format!("{:.2} ± {:.2}", 100.0 * s.error, 100.0 * sd),
        None => format!("{:.2}", 100.0 * s.error),
    };
    let mut out = format!("{:>8}  {:>14}  {:>14}  {:>14}\n", "channels", "MAP", "NDCG3", "NDCG5");
    for r in rows {
        out.push_str(&format!("{:>8}  {:>14}  {:>14}  {:>14}\n", r.channels, cell(&r.map), cell(&r.ndcg3), cell(&r.ndcg5)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::DenseMatrix;
    use crate::protocol::{build_benchmark, build_mnist_style, BenchmarkConfig, ItemPool, Split, Splits};

    fn small(seed: u64) -> Splits {
        let cfg = BenchmarkConfig {
            train: 30,
            validation: 10,
            test: 10,
            noise: vec![1.0, 1.5],
            t: 12,
            ..BenchmarkConfig::default()
        };
        build_benchmark(seed, &cfg).unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            batch_size: 7,
            learning_rate: 0.05,
            epochs: 3,
            decoder_dim: 6,
            attention_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn presets_and_validation() {
        let m = TrainConfig::preset(Preset::Mnist);
        assert_eq!((m.batch_size, m.learning_rate, m.epochs), (100, 0.001, 20));
        let c = TrainConfig::preset(Preset::Cifar);
        assert_eq!((c.batch_size, c.learning_rate), (50, 0.0005));
        let n = TrainConfig::preset(Preset::Newsgroups);
        assert_eq!((n.batch_size, n.learning_rate, n.epochs), (100, 0.0001, 50));
        assert!(TrainConfig { batch_size: 0, ..m.clone() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..m.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..m }.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_identical() {
        let s = small(1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick_config()
        };
        let p0 = cfg.init_for(&s.train).unwrap();
        let out = train(&cfg, &s.train, &s.validation, p0.clone()).unwrap();
        assert_eq!(out.params, p0);
        assert_eq!(out.log.epochs.len(), 3);
        assert_eq!(out.log.best_epoch, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let s = small(2);
        let cfg = quick_config();
        let a = train(&cfg, &s.train, &s.validation, cfg.init_for(&s.train).unwrap()).unwrap();
        let b = train(&cfg, &s.train, &s.validation, cfg.init_for(&s.train).unwrap()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
        assert_eq!(a.params, b.params);
        assert!(!a.log.to_jsonl().contains("wall_seconds"));
    }

    #[test]
    fn best_epoch_is_earliest_maximum() {
        let s = small(3);
        let cfg = quick_config();
        let out = train(&cfg, &s.train, &s.validation, cfg.init_for(&s.train).unwrap()).unwrap();
        let maps: Vec<f64> = out.log.epochs.iter().map(|e| e.validation_map).collect();
        let best = maps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let earliest = maps.iter().position(|&m| m == best).unwrap() + 1;
        assert_eq!(out.log.best_epoch, earliest);
        let report = evaluate(&out.params, &s.validation, cfg.beam_width, LabelView::AtLeast(1)).unwrap();
        assert_eq!(report.map.mean, best);
    }

    #[test]
    fn duplicated_batch_equals_single_episode_update() {
        let s = small(4);
        let cfg = quick_config();
        let p = cfg.init_for(&s.train).unwrap();
        let rel = training_relevance(&s.train);
        let (l1, g1) = batch_gradient(&p, &s.train, &rel, &[5], LossKind::Hinge).unwrap();
        let (l4, g4) = batch_gradient(&p, &s.train, &rel, &[5, 5, 5, 5], LossKind::Hinge).unwrap();
        assert_eq!(l1, l4);
        assert_eq!(g1.to_flat(), g4.to_flat());
    }

    #[test]
    fn overfitting_one_episode_reduces_loss_and_grows_similarity_norms() {
        let mut rng = Rng::new(5);
        let pool = ItemPool::synthetic(&mut rng, 4, 15, 3.0, &[0.8, 0.8, 0.8], None).unwrap();
        let ds = build_mnist_style(&mut rng, &pool, 12, Some(1), Split::Train).unwrap();
        let cfg = TrainConfig {
            loss: LossKind::Softmax,
            batch_size: 1,
            learning_rate: 0.05,
            decoder_dim: 8,
            attention_dim: 4,
            ..TrainConfig::default()
        };
        let mut p = cfg.init_for(&ds).unwrap();
        let before = p.clone();
        let rel = training_relevance(&ds);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let (loss, g) = batch_gradient(&p, &ds, &rel, &[0], LossKind::Softmax).unwrap();
            losses.push(loss);
            p.add_scaled(-cfg.learning_rate, &g).unwrap();
        }
        let last = batch_gradient(&p, &ds, &rel, &[0], LossKind::Softmax).unwrap().0;
        assert!(last < losses[0], "{} -> {last}", losses[0]);
        let rows = norm_report(&before, &p);
        for group in ["W", "V"] {
            let row = rows.iter().find(|r| r.group == group).unwrap();
            assert!(row.after >= row.before, "{row:?}");
        }
    }

    #[test]
    fn norm_examples() {
        let d = Dims {
            query_channels: 2,
            candidate_channels: 2,
            query_dim: 10,
            candidate_dim: 10,
            decoder_dim: 4,
            attention_dim: 3,
        };
        let zeros = AttRNParams::zeros(d, Pooling::Mean);
        let norms = param_norms(&zeros);
        assert!(norms.values().all(|&v| v == 0.0));
        assert_eq!(
            norms.keys().cloned().collect::<Vec<_>>(),
            ["V", "W", "decoder", "query_attention", "result_attention"]
        );
        let mut p = zeros.clone();
        p.w = DenseMatrix::identity(10);
        assert!((param_norms(&p)["W"] - 10f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sweep_rows_match_plain_runs() {
        let s = small(6);
        let cfg = quick_config();
        let rows = sweep_channels(&cfg, &s.train, &s.validation, &s.test, &[1], &[cfg.seed]).unwrap();
        assert_eq!(rows.len(), 1);
        let one = TrainConfig {
            query_channels: Some(1),
            candidate_channels: Some(1),
            ..cfg.clone()
        };
        let tr = one.select(&s.train).unwrap();
        let out = train(&one, &tr, &one.select(&s.validation).unwrap(), one.init_for(&tr).unwrap()).unwrap();
        let report = evaluate(&out.params, &one.select(&s.test).unwrap(), cfg.beam_width, LabelView::AtLeast(1)).unwrap();
        assert_eq!(rows[0].map.mean, report.map.mean);
        assert_eq!(rows[0].map.sd, None);
        let both = sweep_channels(&cfg, &s.train, &s.validation, &s.test, &[1, 2], &[1, 2]).unwrap();
        assert_eq!(both.len(), 2);
        assert!(both.iter().all(|r| r.runs == 2 && r.map.sd.is_some()));
        assert_eq!(format_sweep(&both).lines().count(), 3);
    }
}
