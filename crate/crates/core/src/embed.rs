//! Embedding bundles, the feedforward embedder, synthetic class embeddings and
//! bundle persistence.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Container, DType};
use crate::error::{Error, ParseErrorKind, Result};
use crate::numkit::{self, DenseMatrix, Rng};

/// Default logit sharpness of the synthetic class generator.
pub const DEFAULT_KAPPA: f64 = 5.0;

/// Raw feature vectors for embedder-backed channels: one for the query and one per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInputs {
    pub query: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
}

/// The `M` query embeddings and `T x N` candidate embeddings of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    query: Vec<Vec<f64>>,
    candidates: Vec<Vec<Vec<f64>>>,
    query_frozen: Vec<bool>,
    candidate_frozen: Vec<bool>,
    raw: Option<RawInputs>,
}

impl EmbeddingBundle {
    /// `query[m]` is channel `m` of the query; `candidates[t][n]` is channel `n` of candidate `t`.
    /// All channels start frozen.
    pub fn new(query: Vec<Vec<f64>>, candidates: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if query.is_empty() {
            return Err(Error::invalid("bundle needs at least one query channel"));
        }
        if candidates.len() < 2 {
            return Err(Error::invalid(format!(
                "bundle needs at least two candidates, got {}",
                candidates.len()
            )));
        }
        let n = candidates[0].len();
        if n == 0 {
            return Err(Error::invalid("bundle needs at least one candidate channel"));
        }
        let dq = query[0].len();
        if dq == 0 {
            return Err(Error::invalid("query embeddings must be non-empty"));
        }
        if let Some(m) = query.iter().position(|q| q.len() != dq) {
            return Err(Error::shape(
                "EmbeddingBundle::new",
                format!("query channel 0 of dim {dq}"),
                format!("query channel {m} of dim {}", query[m].len()),
            ));
        }
        let dr = candidates[0][0].len();
        if dr == 0 {
            return Err(Error::invalid("candidate embeddings must be non-empty"));
        }
        for (t, channels) in candidates.iter().enumerate() {
            if channels.len() != n {
                return Err(Error::shape(
                    "EmbeddingBundle::new",
                    format!("{n} candidate channels"),
                    format!("candidate {t} with {}", channels.len()),
                ));
            }
            if let Some(k) = channels.iter().position(|r| r.len() != dr) {
                return Err(Error::shape(
                    "EmbeddingBundle::new",
                    format!("candidate dim {dr}"),
                    format!("candidate {t} channel {k} of dim {}", channels[k].len()),
                ));
            }
        }
        let all = query.iter().chain(candidates.iter().flatten()).flatten();
        if let Some(index) = all.clone().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "embedding bundle".into(),
                index,
            });
        }
        Ok(EmbeddingBundle {
            query_frozen: vec![true; query.len()],
            candidate_frozen: vec![true; n],
            query,
            candidates,
            raw: None,
        })
    }

    pub fn with_frozen(mut self, query_frozen: Vec<bool>, candidate_frozen: Vec<bool>) -> Result<Self> {
        if query_frozen.len() != self.query_channels() || candidate_frozen.len() != self.candidate_channels() {
            return Err(Error::shape(
                "EmbeddingBundle::with_frozen",
                format!("{} query / {} candidate channels", self.query_channels(), self.candidate_channels()),
                format!("{} / {} flags", query_frozen.len(), candidate_frozen.len()),
            ));
        }
        self.query_frozen = query_frozen;
        self.candidate_frozen = candidate_frozen;
        Ok(self)
    }

    pub fn with_raw(mut self, raw: RawInputs) -> Result<Self> {
        if raw.candidates.len() != self.len() {
            return Err(Error::shape(
                "EmbeddingBundle::with_raw",
                format!("{} candidates", self.len()),
                format!("{} raw candidate rows", raw.candidates.len()),
            ));
        }
        let dim = raw.query.len();
        if raw.candidates.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("raw feature rows must share one dimension"));
        }
        self.raw = Some(raw);
        Ok(self)
    }

    /// Number of query channels `M`.
    pub fn query_channels(&self) -> usize {
        self.query.len()
    }

    /// Number of candidate channels `N`.
    pub fn candidate_channels(&self) -> usize {
        self.candidates[0].len()
    }

    /// Number of candidates `T`.
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn query_dim(&self) -> usize {
        self.query[0].len()
    }

    pub fn candidate_dim(&self) -> usize {
        self.candidates[0][0].len()
    }

    pub fn query(&self, m: usize) -> &[f64] {
        &self.query[m]
    }

    pub fn queries(&self) -> &[Vec<f64>] {
        &self.query
    }

    pub fn candidate(&self, t: usize, n: usize) -> &[f64] {
        &self.candidates[t][n]
    }

    pub fn candidates(&self) -> &[Vec<Vec<f64>>] {
        &self.candidates
    }

    pub fn query_frozen(&self) -> &[bool] {
        &self.query_frozen
    }

    pub fn candidate_frozen(&self) -> &[bool] {
        &self.candidate_frozen
    }

    pub fn raw(&self) -> Option<&RawInputs> {
        self.raw.as_ref()
    }

    pub(crate) fn set_query(&mut self, m: usize, v: Vec<f64>) {
        self.query[m] = v;
    }

    pub(crate) fn set_candidate(&mut self, t: usize, n: usize, v: Vec<f64>) {
        self.candidates[t][n] = v;
    }

    /// Keeps the first `query` query channels and first `candidate` candidate channels.
    pub fn select_channels(&self, query: usize, candidate: usize) -> Result<Self> {
        if query == 0 || query > self.query_channels() || candidate == 0 || candidate > self.candidate_channels() {
            return Err(Error::invalid(format!(
                "cannot select {query}/{candidate} channels from a bundle with {}/{}",
                self.query_channels(),
                self.candidate_channels()
            )));
        }
        Ok(EmbeddingBundle {
            query: self.query[..query].to_vec(),
            candidates: self.candidates.iter().map(|c| c[..candidate].to_vec()).collect(),
            query_frozen: self.query_frozen[..query].to_vec(),
            candidate_frozen: self.candidate_frozen[..candidate].to_vec(),
            raw: self.raw.clone(),
        })
    }

    /// Bundle whose query channel `m` is this bundle's channel `perm[m]`.
    pub fn permute_query_channels(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.query_channels())?;
        let mut out = self.clone();
        out.query = perm.iter().map(|&i| self.query[i].clone()).collect();
        out.query_frozen = perm.iter().map(|&i| self.query_frozen[i]).collect();
        Ok(out)
    }

    /// Bundle whose candidate `t` is this bundle's candidate `perm[t]`.
    pub fn permute_candidates(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.len())?;
        let mut out = self.clone();
        out.candidates = perm.iter().map(|&i| self.candidates[i].clone()).collect();
        if let Some(raw) = &self.raw {
            out.raw = Some(RawInputs {
                query: raw.query.clone(),
                candidates: perm.iter().map(|&i| raw.candidates[i].clone()).collect(),
            });
        }
        Ok(out)
    }

    /// Appends this bundle's tensors under `prefix` (e.g. `"ep3/"`).
    pub fn append_to(&self, container: &mut Container, prefix: &str) {
        for (m, q) in self.query.iter().enumerate() {
            let matrix = DenseMatrix::from_vec(1, q.len(), q.clone()).expect("validated bundle");
            container.push(format!("{prefix}query/ch{m}"), matrix, Some(self.query_frozen[m]));
        }
        for n in 0..self.candidate_channels() {
            let data: Vec<f64> = self.candidates.iter().flat_map(|c| c[n].iter().copied()).collect();
            let matrix = DenseMatrix::from_vec(self.len(), self.candidate_dim(), data).expect("validated bundle");
            container.push(format!("{prefix}candidates/ch{n}"), matrix, Some(self.candidate_frozen[n]));
        }
        if let Some(raw) = &self.raw {
            let q = DenseMatrix::from_vec(1, raw.query.len(), raw.query.clone()).expect("validated raw");
            container.push(format!("{prefix}raw/query"), q, None);
            let c = DenseMatrix::from_rows(&raw.candidates).expect("validated raw");
            container.push(format!("{prefix}raw/candidates"), c, None);
        }
    }

    /// Reads a bundle with `query_channels` / `candidate_channels` channels stored under `prefix`.
    pub fn from_container(
        container: &Container,
        prefix: &str,
        query_channels: usize,
        candidate_channels: usize,
    ) -> Result<Self> {
        let mut query = Vec::with_capacity(query_channels);
        let mut query_frozen = Vec::with_capacity(query_channels);
        for m in 0..query_channels {
            let (entry, matrix) = container.entry(&format!("{prefix}query/ch{m}"))?;
            if matrix.rows() != 1 {
                return Err(dimension_error(format!("{} must have one row", entry.name)));
            }
            query.push(matrix.as_slice().to_vec());
            query_frozen.push(entry.frozen.unwrap_or(true));
        }
        let mut candidate_rows: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut candidate_frozen = Vec::with_capacity(candidate_channels);
        for n in 0..candidate_channels {
            let (entry, matrix) = container.entry(&format!("{prefix}candidates/ch{n}"))?;
            if n == 0 {
                candidate_rows = vec![Vec::with_capacity(candidate_channels); matrix.rows()];
            } else if matrix.rows() != candidate_rows.len() {
                return Err(dimension_error(format!(
                    "{} has {} rows, expected {}",
                    entry.name,
                    matrix.rows(),
                    candidate_rows.len()
                )));
            }
            for (t, row) in candidate_rows.iter_mut().enumerate() {
                row.push(matrix.row(t).to_vec());
            }
            candidate_frozen.push(entry.frozen.unwrap_or(true));
        }
        let bundle = EmbeddingBundle::new(query, candidate_rows)
            .map_err(|e| dimension_error(format!("{prefix}: {e}")))?
            .with_frozen(query_frozen, candidate_frozen)?;
        let raw_query = container.get(&format!("{prefix}raw/query"));
        match raw_query {
            Ok(q) => {
                let c = container.get(&format!("{prefix}raw/candidates"))?;
                let raw = RawInputs {
                    query: q.as_slice().to_vec(),
                    candidates: (0..c.rows()).map(|t| c.row(t).to_vec()).collect(),
                };
                bundle.with_raw(raw).map_err(|e| dimension_error(e.to_string()))
            }
            Err(Error::MissingTensor(_)) => Ok(bundle),
            Err(e) => Err(e),
        }
    }
}

fn dimension_error(msg: String) -> Error {
    // Semantic checks happen after the manifest (which starts at byte 9) has been parsed.
    Error::Parse {
        offset: 9,
        kind: ParseErrorKind::Dimensions(msg),
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::invalid(format!("permutation of length {} for {n} items", perm.len())));
    }
    for &i in perm {
        if i >= n || seen[i] {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Writes one bundle as an EMB1 file.
pub fn save_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    bundle_container(bundle, dtype).write(path)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    bundle_from_bytes(&std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?)
}

pub fn bundle_container(bundle: &EmbeddingBundle, dtype: DType) -> Container {
    let mut c = Container::new(
        dtype,
        json!({
            "kind": "embedding_bundle",
            "query_channels": bundle.query_channels(),
            "candidate_channels": bundle.candidate_channels(),
            "candidates": bundle.len(),
            "query_dim": bundle.query_dim(),
            "candidate_dim": bundle.candidate_dim(),
        }),
    );
    bundle.append_to(&mut c, "");
    c
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<EmbeddingBundle> {
    let c = Container::decode(bytes)?;
    let field = |name: &str| {
        c.meta
            .get(name)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Parse {
                offset: 9,
                kind: ParseErrorKind::Manifest(format!("meta.{name} missing or not an integer")),
            })
    };
    let (m, n) = (field("query_channels")?, field("candidate_channels")?);
    let bundle = EmbeddingBundle::from_container(&c, "", m, n)?;
    if bundle.len() != field("candidates")?
        || bundle.query_dim() != field("query_dim")?
        || bundle.candidate_dim() != field("candidate_dim")?
    {
        return Err(dimension_error("declared dimensions disagree with tensors".into()));
    }
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Hidden layers use the activation, the last layer is a softmax over classes.
    Softmax,
    /// Every layer uses the activation; the last layer's output is the embedding.
    LastHidden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

/// Feedforward embedder `x_{l+1} = f(W_l x_l + b_l)` with an optional softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEmbedder {
    pub layers: Vec<MlpLayer>,
    pub activation: Activation,
    pub output: OutputMode,
}

/// Per-layer outputs of one forward pass, `outputs[0]` being the input.
#[derive(Debug, Clone)]
pub(crate) struct MlpTrace {
    outputs: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub(crate) fn output(&self) -> &[f64] {
        self.outputs.last().expect("non-empty trace")
    }
}

impl MlpEmbedder {
    pub fn new(layers: Vec<MlpLayer>, activation: Activation, output: OutputMode) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("embedder needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.cols() != 1 || layer.bias.rows() != layer.weight.rows() {
                return Err(Error::shape(
                    "MlpEmbedder::new",
                    format!("layer {l} weight {}", layer.weight.shape_string()),
                    format!("bias {}", layer.bias.shape_string()),
                ));
            }
            if l > 0 && layers[l - 1].weight.rows() != layer.weight.cols() {
                return Err(Error::shape(
                    "MlpEmbedder::new",
                    format!("layer {} output {}", l - 1, layers[l - 1].weight.rows()),
                    format!("layer {l} input {}", layer.weight.cols()),
                ));
            }
        }
        Ok(MlpEmbedder {
            layers,
            activation,
            output,
        })
    }

    /// Layer sizes `[d_0, d_1, ..., d_out]` with weights ~ Uniform(-scale, scale) and zero biases.
    pub fn random(sizes: &[usize], activation: Activation, output: OutputMode, scale: f64, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("embedder needs input and output sizes"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let data = (0..w[0] * w[1]).map(|_| rng.uniform(-scale, scale)).collect();
                MlpLayer {
                    weight: DenseMatrix::from_vec(w[1], w[0], data).expect("finite"),
                    bias: DenseMatrix::zeros(w[1], 1),
                }
            })
            .collect();
        Self::new(layers, activation, output)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn zeros_like(&self) -> Self {
        MlpEmbedder {
            layers: self
                .layers
                .iter()
                .map(|l| MlpLayer {
                    weight: DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: DenseMatrix::zeros(l.bias.rows(), 1),
                })
                .collect(),
            activation: self.activation,
            output: self.output,
        }
    }

    pub fn forward(&self, x0: &[f64]) -> Result<Vec<f64>> {
        if x0.len() != self.input_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input dim {}", self.input_dim()),
                format!("features of {}", x0.len()),
            ));
        }
        Ok(self.forward_cached(x0).outputs.pop().unwrap())
    }

    pub(crate) fn forward_cached(&self, x0: &[f64]) -> MlpTrace {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x0.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = layer.bias.as_slice().to_vec();
            layer.weight.matvec_cols_add(0, &outputs[l], &mut pre);
            if l == last && self.output == OutputMode::Softmax {
                let mut y = vec![0.0; pre.len()];
                numkit::softmax_into(&pre, &mut y);
                outputs.push(y);
            } else {
                pre.iter_mut().for_each(|v| *v = self.activation.apply(*v));
                outputs.push(pre);
            }
        }
        MlpTrace { outputs }
    }

    /// Accumulates parameter gradients of a loss whose gradient wrt the output is `dy`.
    pub(crate) fn backward(&self, trace: &MlpTrace, dy: &[f64], grads: &mut MlpEmbedder) {
        let last = self.layers.len() - 1;
        let mut upstream = dy.to_vec();
        for l in (0..self.layers.len()).rev() {
            let y = &trace.outputs[l + 1];
            let mut dpre = vec![0.0; y.len()];
            if l == last && self.output == OutputMode::Softmax {
                numkit::softmax_backward(y, &upstream, &mut dpre);
            } else {
                for ((d, &u), &yi) in dpre.iter_mut().zip(&upstream).zip(y) {
                    *d = u * self.activation.derivative_from_output(yi);
                }
            }
            let x = &trace.outputs[l];
            grads.layers[l].weight.add_outer_cols(0, 1.0, &dpre, x);
            numkit::axpy(1.0, &dpre, grads.layers[l].bias.as_mut_slice());
            if l > 0 {
                let mut dx = vec![0.0; x.len()];
                self.layers[l].weight.matvec_t_cols_add(0, &dpre, &mut dx);
                upstream = dx;
            }
        }
    }
}

/// Parameters of the synthetic class-softmax generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    /// Logit sharpness; `f64::INFINITY` yields exact one-hot vectors.
    pub kappa: f64,
    pub query_noise: Vec<f64>,
    pub candidate_noise: Vec<f64>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.query_noise.is_empty() || self.candidate_noise.is_empty() {
            return Err(Error::invalid("noise lists must be non-empty"));
        }
        if self.query_noise.iter().chain(&self.candidate_noise).any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::invalid("noise standard deviations must be finite and >= 0"));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::invalid(format!("kappa must be positive, got {}", self.kappa)));
        }
        Ok(())
    }
}

/// `softmax(kappa * onehot(class) + N(0, noise^2 I))`.
///
/// Always consumes `classes` normal draws so streams stay aligned across noise levels.
/// With `kappa = inf` the result is exactly `onehot(class)`.
pub fn synth_channel(rng: &mut Rng, class: usize, classes: usize, kappa: f64, noise: f64) -> Vec<f64> {
    let mut logits: Vec<f64> = (0..classes).map(|_| rng.normal(noise)).collect();
    if kappa.is_infinite() {
        return (0..classes).map(|c| if c == class { 1.0 } else { 0.0 }).collect();
    }
    logits[class] += kappa;
    let mut out = vec![0.0; classes];
    numkit::softmax_into(&logits, &mut out);
    out
}

/// Synthetic bundle for one query of class `query_class` and candidates of `candidate_classes`.
pub fn synth_class_bundle(
    rng: &mut Rng,
    query_class: usize,
    candidate_classes: &[usize],
    config: &SynthConfig,
) -> Result<EmbeddingBundle> {
    config.validate()?;
    if let Some(bad) = std::iter::once(&query_class).chain(candidate_classes).find(|&&c| c >= config.classes) {
        return Err(Error::invalid(format!("class {bad} out of range 0..{}", config.classes)));
    }
    let query = config
        .query_noise
        .iter()
        .map(|&s| synth_channel(rng, query_class, config.classes, config.kappa, s))
        .collect();
    let candidates = candidate_classes
        .iter()
        .map(|&class| {
            config
                .candidate_noise
                .iter()
                .map(|&s| synth_channel(rng, class, config.classes, config.kappa, s))
                .collect()
        })
        .collect();
    EmbeddingBundle::new(query, candidates)
}
