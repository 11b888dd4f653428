//! Bilinear similarity baseline `S_W(q, r) = qᵀ W r` trained with a pairwise hinge.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Container, DType};
use crate::embed::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::metrics::{LabelView, MetricReport};
use crate::numkit::{dot, DenseMatrix, Rng};
use crate::protocol::Dataset;

/// Which embedding the model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Channel `k` on both sides.
    Single(usize),
    /// Mean of the first `k` channels on both sides.
    Averaged(usize),
}

impl ChannelMode {
    pub fn label(self) -> String {
        match self {
            ChannelMode::Single(0) => "OASIS-1".into(),
            ChannelMode::Single(k) => format!("OASIS-ch{k}"),
            ChannelMode::Averaged(k) => format!("OASIS-{k}"),
        }
    }

    /// `(query, candidates)` as seen under this mode.
    pub fn view(self, b: &EmbeddingBundle) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if b.query_dim() != b.candidate_dim() {
            return Err(Error::shape("OASIS view", format!("d_q = {}", b.query_dim()), format!("d_r = {}", b.candidate_dim())));
        }
        match self {
            ChannelMode::Single(k) => {
                if k >= b.query_channels() || k >= b.candidate_channels() {
                    return Err(Error::invalid(format!("channel {k} not present in bundle")));
                }
                Ok((b.query(k).to_vec(), (0..b.len()).map(|t| b.candidate(t, k).to_vec()).collect()))
            }
            ChannelMode::Averaged(k) => {
                if k == 0 || k > b.query_channels() || k > b.candidate_channels() {
                    return Err(Error::invalid(format!("cannot average {k} channels of this bundle")));
                }
                let mean = |vs: &mut dyn Iterator<Item = &[f64]>| {
                    let mut out = vec![0.0; b.query_dim()];
                    for v in vs {
                        out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
                    }
                    out.iter_mut().for_each(|o| *o /= k as f64);
                    out
                };
                let q = mean(&mut (0..k).map(|m| b.query(m)));
                let c = (0..b.len()).map(|t| mean(&mut (0..k).map(|n| b.candidate(t, n)))).collect();
                Ok((q, c))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OasisModel {
    pub w: DenseMatrix,
    pub mode: ChannelMode,
}

impl OasisModel {
    pub fn identity(dim: usize, mode: ChannelMode) -> Self {
        OasisModel {
            w: DenseMatrix::identity(dim),
            mode,
        }
    }

    pub fn to_container(&self, extra: serde_json::Value) -> Container {
        let mut meta = json!({"kind": "oasis", "mode": self.mode});
        if let (Some(obj), serde_json::Value::Object(extra)) = (meta.as_object_mut(), extra) {
            obj.extend(extra);
        }
        let mut c = Container::new(DType::F64, meta);
        c.push("W", self.w.clone(), None);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("oasis") {
            return Err(Error::Schema {
                path: "$.meta.kind".into(),
                message: "expected \"oasis\"".into(),
            });
        }
        let mode = serde_json::from_value(c.meta["mode"].clone()).map_err(|e| Error::Schema {
            path: "$.meta.mode".into(),
            message: e.to_string(),
        })?;
        Ok(OasisModel {
            w: c.get("W")?.clone(),
            mode,
        })
    }
}

pub fn oasis_score(m: &OasisModel, q: &[f64], r: &[f64]) -> Result<f64> {
    m.w.bilinear(q, r)
}

/// Candidate indices by descending score, ties by ascending index.
pub fn oasis_rank(m: &OasisModel, b: &EmbeddingBundle) -> Result<Vec<usize>> {
    let (q, cands) = m.mode.view(b)?;
    let wq = m.w.matvec_transposed(&q)?;
    let scores: Vec<f64> = cands.iter().map(|r| dot(&wq, r)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// `max(0, 1 - S(q, pos) + S(q, neg))`
pub fn oasis_hinge(m: &OasisModel, q: &[f64], pos: &[f64], neg: &[f64]) -> Result<f64> {
    Ok((1.0 - oasis_score(m, q, pos)? + oasis_score(m, q, neg)?).max(0.0))
}

/// One online update; returns whether the hinge was active.
pub fn oasis_step(m: &mut OasisModel, q: &[f64], pos: &[f64], neg: &[f64], lr: f64) -> Result<bool> {
    if oasis_hinge(m, q, pos, neg)? <= 0.0 {
        return Ok(false);
    }
    let diff: Vec<f64> = pos.iter().zip(neg).map(|(p, n)| p - n).collect();
    let mut update = DenseMatrix::zeros(m.w.rows(), m.w.cols());
    update.add_outer(1.0, q, &diff)?;
    m.w.add_scaled(lr, &update)?;
    Ok(true)
}

/// Averaged update over a minibatch of `(q, pos, neg)` triplets, all evaluated at the current `W`.
pub fn oasis_batch_step(m: &mut OasisModel, batch: &[(&[f64], &[f64], &[f64])], lr: f64) -> Result<usize> {
    if batch.is_empty() {
        return Ok(0);
    }
    let mut update = DenseMatrix::zeros(m.w.rows(), m.w.cols());
    let mut active = 0;
    for &(q, pos, neg) in batch {
        if oasis_hinge(m, q, pos, neg)? > 0.0 {
            let diff: Vec<f64> = pos.iter().zip(neg).map(|(p, n)| p - n).collect();
            update.add_outer(1.0, q, &diff)?;
            active += 1;
        }
    }
    m.w.add_scaled(lr / batch.len() as f64, &update)?;
    Ok(active)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OasisConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mode: ChannelMode,
    pub seed: u64,
}

impl Default for OasisConfig {
    /// Ten passes over all pairs with the ranking network's MNIST minibatch settings.
    fn default() -> Self {
        OasisConfig {
            epochs: 10,
            batch_size: 100,
            learning_rate: 0.001,
            mode: ChannelMode::Single(0),
            seed: 0,
        }
    }
}

/// `W = I`, then per epoch every (more relevant, less relevant) pair of every episode,
/// shuffled, consumed in minibatches.
pub fn oasis_train(train: &Dataset, config: &OasisConfig) -> Result<OasisModel> {
    if config.batch_size == 0 || !(config.learning_rate >= 0.0) {
        return Err(Error::invalid("OASIS needs batch_size >= 1 and a non-negative learning rate"));
    }
    let first = train.episodes.first().ok_or_else(|| Error::invalid("empty training set"))?;
    let views: Vec<(Vec<f64>, Vec<Vec<f64>>)> = train.episodes.iter().map(|e| config.mode.view(&e.bundle)).collect::<Result<_>>()?;
    let mut model = OasisModel::identity(first.bundle.query_dim(), config.mode);
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (i, e) in train.episodes.iter().enumerate() {
        let rel = e.binary_labels(train.target_threshold);
        for p in 0..rel.len() {
            for n in 0..rel.len() {
                if rel[p] > rel[n] {
                    pairs.push((i, p, n));
                }
            }
        }
    }
    let root = Rng::new(config.seed).fork("oasis");
    for epoch in 0..config.epochs {
        let mut rng = root.fork_indexed("epoch", epoch as u64);
        rng.shuffle(&mut pairs);
        for chunk in pairs.chunks(config.batch_size) {
            let batch: Vec<(&[f64], &[f64], &[f64])> = chunk
                .iter()
                .map(|&(i, p, n)| (views[i].0.as_slice(), views[i].1[p].as_slice(), views[i].1[n].as_slice()))
                .collect();
            oasis_batch_step(&mut model, &batch, config.learning_rate)?;
        }
        if !model.w.is_finite() {
            return Err(Error::Divergence { epoch: epoch + 1, batch: 0 });
        }
    }
    Ok(model)
}

pub fn evaluate_oasis(m: &OasisModel, ds: &Dataset, view: LabelView) -> Result<MetricReport> {
    let ranked: Vec<Vec<u8>> = ds
        .episodes
        .iter()
        .map(|e| Ok(oasis_rank(m, &e.bundle)?.into_iter().map(|t| e.labels[t]).collect()))
        .collect::<Result<_>>()?;
    MetricReport::from_rankings(ranked.iter().map(Vec::as_slice), view)
}
