//! The attention-based ranking network.
//!
//! Per step `t = 1..T`, with `z_0 = 0`, `α_0 = 1/M`, `β_0 = 1/N`:
//!
//! ```text
//! e_tm = u_eᵀ tanh(W_e [z_{t-1}; q_m;  g;   α_{t-1,m}; sort↓ β_{t-1}] + b_e)
//! f_tn = u_fᵀ tanh(W_f [z_{t-1}; q̄;   h_n; β_{t-1,n}; sort↓ α_{t-1}] + b_f)
//! α_t = softmax(e_t)         β_t = softmax(f_t)
//! c_t = Σ_m α_tm q_m         d̄_t = Σ_n β_tn h_n
//! z_t = tanh(A z_{t-1} + B c_t + D d̄_t + b_z)
//! s_{t,t'} = d_{t,t'}ᵀ W c_t + d_{t,t'}ᵀ V z_t      with d_{t,t'} = Σ_n β_tn r_{t'n}
//! ```
//!
//! `g`, `h_n` and `q̄` pool the candidate grid, candidate channel `n` and the
//! query channels (mean or element-wise max). Each attention layer sees the
//! previous weight of the channel it scores plus the other side's previous
//! weights in descending order, so the whole network is equivariant under
//! reordering of query channels.
//!
//! The recurrence never looks at which candidates were picked; only the set
//! over which step `t`'s softmax normalizes does. A single unrolled pass
//! therefore yields the full `T x T` score table for any ranking.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Container, DType};
use crate::embed::{check_permutation, Activation, EmbeddingBundle, MlpEmbedder, MlpLayer, MlpTrace, OutputMode};
use crate::error::{Error, Result};
use crate::numkit::{self, axpy, dot, log_sum_exp, DenseMatrix, Rng};

pub const DEFAULT_DECODER_DIM: usize = 32;
pub const DEFAULT_ATTENTION_DIM: usize = 16;
/// Half-width of the uniform initialization used by [`InitScheme::SmallRandom`].
pub const SMALL_RANDOM_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `W = I`, every other parameter zero.
    IdentityZeros,
    /// `W = I`, attention and decoder weights ~ Uniform(-0.05, 0.05), biases and `V` zero.
    #[default]
    SmallRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Softmax,
    #[default]
    Hinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// `M`
    pub query_channels: usize,
    /// `N`
    pub candidate_channels: usize,
    pub query_dim: usize,
    pub candidate_dim: usize,
    pub decoder_dim: usize,
    pub attention_dim: usize,
}

impl Dims {
    pub fn for_bundle(bundle: &EmbeddingBundle, decoder_dim: usize, attention_dim: usize) -> Self {
        Dims {
            query_channels: bundle.query_channels(),
            candidate_channels: bundle.candidate_channels(),
            query_dim: bundle.query_dim(),
            candidate_dim: bundle.candidate_dim(),
            decoder_dim,
            attention_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.query_channels,
            self.candidate_channels,
            self.query_dim,
            self.candidate_dim,
            self.decoder_dim,
            self.attention_dim,
        ];
        if all.contains(&0) {
            return Err(Error::invalid(format!("all dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    fn query_attention_inputs(&self) -> usize {
        self.decoder_dim + self.query_dim + self.candidate_dim + 1 + self.candidate_channels
    }

    fn result_attention_inputs(&self) -> usize {
        self.decoder_dim + self.query_dim + self.candidate_dim + 1 + self.query_channels
    }

    fn check_bundle(&self, b: &EmbeddingBundle) -> Result<()> {
        let got = (b.query_channels(), b.candidate_channels(), b.query_dim(), b.candidate_dim());
        let want = (self.query_channels, self.candidate_channels, self.query_dim, self.candidate_dim);
        if got != want {
            return Err(Error::shape(
                "bundle vs parameters",
                format!("parameters for (M, N, d_q, d_r) = {want:?}"),
                format!("bundle with {got:?}"),
            ));
        }
        Ok(())
    }
}

/// Shared tanh layer followed by a scalar projection: `uᵀ tanh(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
    pub proj: DenseMatrix,
}

impl AttentionLayer {
    fn zeros(hidden: usize, inputs: usize) -> Self {
        AttentionLayer {
            weight: DenseMatrix::zeros(hidden, inputs),
            bias: DenseMatrix::zeros(hidden, 1),
            proj: DenseMatrix::zeros(hidden, 1),
        }
    }
}

/// `z_t = tanh(A z_{t-1} + B c_t + D d̄_t + b_z)`
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub state: DenseMatrix,
    pub query: DenseMatrix,
    pub result: DenseMatrix,
    pub bias: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttRNParams {
    pub dims: Dims,
    pub pooling: Pooling,
    pub query_attention: AttentionLayer,
    pub result_attention: AttentionLayer,
    pub decoder: DecoderLayer,
    /// `d_r x d_q`
    pub w: DenseMatrix,
    /// `d_r x d_z`
    pub v: DenseMatrix,
    /// Optional trainable embedder per channel index; channel `k`'s embedder feeds query
    /// channel `k` and candidate channel `k` whenever the bundle marks them unfrozen.
    pub embedders: Vec<Option<MlpEmbedder>>,
}

pub fn init_params(dims: Dims, pooling: Pooling, scheme: InitScheme, rng: &mut Rng) -> Result<AttRNParams> {
    dims.validate()?;
    if scheme == InitScheme::IdentityZeros && dims.query_dim != dims.candidate_dim {
        return Err(Error::invalid(format!(
            "identity-zeros initialization needs W = I, but d_r = {} != d_q = {}",
            dims.candidate_dim, dims.query_dim
        )));
    }
    let mut p = AttRNParams::zeros(dims, pooling);
    for i in 0..dims.candidate_dim.min(dims.query_dim) {
        p.w.set(i, i, 1.0);
    }
    if scheme == InitScheme::SmallRandom {
        let mut fill = |m: &mut DenseMatrix| {
            for v in m.as_mut_slice() {
                *v = rng.uniform(-SMALL_RANDOM_SCALE, SMALL_RANDOM_SCALE);
            }
        };
        fill(&mut p.query_attention.weight);
        fill(&mut p.query_attention.proj);
        fill(&mut p.result_attention.weight);
        fill(&mut p.result_attention.proj);
        fill(&mut p.decoder.state);
        fill(&mut p.decoder.query);
        fill(&mut p.decoder.result);
    }
    Ok(p)
}

impl AttRNParams {
    /// All-zero parameters (including `W`) with the given shape.
    pub fn zeros(dims: Dims, pooling: Pooling) -> Self {
        let (dz, dq, dr, da) = (dims.decoder_dim, dims.query_dim, dims.candidate_dim, dims.attention_dim);
        AttRNParams {
            dims,
            pooling,
            query_attention: AttentionLayer::zeros(da, dims.query_attention_inputs()),
            result_attention: AttentionLayer::zeros(da, dims.result_attention_inputs()),
            decoder: DecoderLayer {
                state: DenseMatrix::zeros(dz, dz),
                query: DenseMatrix::zeros(dz, dq),
                result: DenseMatrix::zeros(dz, dr),
                bias: DenseMatrix::zeros(dz, 1),
            },
            w: DenseMatrix::zeros(dr, dq),
            v: DenseMatrix::zeros(dr, dz),
            embedders: Vec::new(),
        }
    }

    /// Attaches a trainable embedder for channel `k`.
    pub fn with_embedder(mut self, k: usize, embedder: MlpEmbedder) -> Result<Self> {
        let needs_q = k < self.dims.query_channels;
        let needs_r = k < self.dims.candidate_channels;
        if !needs_q && !needs_r {
            return Err(Error::invalid(format!("channel {k} does not exist")));
        }
        if (needs_q && embedder.output_dim() != self.dims.query_dim)
            || (needs_r && embedder.output_dim() != self.dims.candidate_dim)
        {
            return Err(Error::shape(
                "with_embedder",
                format!("channel dims d_q = {}, d_r = {}", self.dims.query_dim, self.dims.candidate_dim),
                format!("embedder output {}", embedder.output_dim()),
            ));
        }
        if self.embedders.len() <= k {
            self.embedders.resize(k + 1, None);
        }
        self.embedders[k] = Some(embedder);
        Ok(self)
    }

    /// Same shape, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = AttRNParams::zeros(self.dims, self.pooling);
        z.embedders = self.embedders.iter().map(|e| e.as_ref().map(MlpEmbedder::zeros_like)).collect();
        z
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out: Vec<(String, &DenseMatrix)> = vec![
            ("query_attention.weight".into(), &self.query_attention.weight),
            ("query_attention.bias".into(), &self.query_attention.bias),
            ("query_attention.proj".into(), &self.query_attention.proj),
            ("result_attention.weight".into(), &self.result_attention.weight),
            ("result_attention.bias".into(), &self.result_attention.bias),
            ("result_attention.proj".into(), &self.result_attention.proj),
            ("decoder.state".into(), &self.decoder.state),
            ("decoder.query".into(), &self.decoder.query),
            ("decoder.result".into(), &self.decoder.result),
            ("decoder.bias".into(), &self.decoder.bias),
            ("W".into(), &self.w),
            ("V".into(), &self.v),
        ];
        for (k, e) in self.embedders.iter().enumerate() {
            if let Some(e) = e {
                for (l, layer) in e.layers.iter().enumerate() {
                    out.push((format!("embedder{k}.layer{l}.weight"), &layer.weight));
                    out.push((format!("embedder{k}.layer{l}.bias"), &layer.bias));
                }
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = vec![
            &mut self.query_attention.weight,
            &mut self.query_attention.bias,
            &mut self.query_attention.proj,
            &mut self.result_attention.weight,
            &mut self.result_attention.bias,
            &mut self.result_attention.proj,
            &mut self.decoder.state,
            &mut self.decoder.query,
            &mut self.decoder.result,
            &mut self.decoder.bias,
            &mut self.w,
            &mut self.v,
        ];
        for e in self.embedders.iter_mut().flatten() {
            for layer in &mut e.layers {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, m)| m.as_slice().to_vec()).collect()
    }

    /// Overwrites every parameter from a flat vector laid out as [`Self::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::shape(
                "set_flat",
                format!("{} parameters", self.num_parameters()),
                format!("{} values", flat.len()),
            ));
        }
        let mut offset = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += scale · other` over every tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &AttRNParams) -> Result<()> {
        let theirs = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::shape(
                "AttRNParams::add_scaled",
                format!("{} tensors", mine.len()),
                format!("{} tensors", theirs.len()),
            ));
        }
        for (a, (_, b)) in mine.into_iter().zip(theirs) {
            a.add_scaled(scale, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for m in self.tensors_mut() {
            m.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Checkpoint container. `extra` is merged into the manifest metadata.
    pub fn to_container(&self, extra: serde_json::Value) -> Container {
        let embedders: Vec<serde_json::Value> = self
            .embedders
            .iter()
            .map(|e| match e {
                None => serde_json::Value::Null,
                Some(e) => json!({"layers": e.layers.len(), "activation": e.activation, "output": e.output}),
            })
            .collect();
        let mut meta = json!({
            "kind": "attrn_params",
            "dims": self.dims,
            "pooling": self.pooling,
            "embedders": embedders,
        });
        if let (Some(obj), serde_json::Value::Object(extra)) = (meta.as_object_mut(), extra) {
            obj.extend(extra);
        }
        let mut c = Container::new(DType::F64, meta);
        for (name, m) in self.tensors() {
            c.push(name, m.clone(), None);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let schema = |path: &str, message: String| Error::Schema {
            path: path.to_string(),
            message,
        };
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("attrn_params") {
            return Err(schema("$.meta.kind", "expected \"attrn_params\"".into()));
        }
        let dims: Dims = serde_json::from_value(c.meta["dims"].clone()).map_err(|e| schema("$.meta.dims", e.to_string()))?;
        let pooling: Pooling =
            serde_json::from_value(c.meta["pooling"].clone()).map_err(|e| schema("$.meta.pooling", e.to_string()))?;
        dims.validate()?;
        let mut p = AttRNParams::zeros(dims, pooling);
        if let Some(list) = c.meta.get("embedders").and_then(|e| e.as_array()) {
            for (k, spec) in list.iter().enumerate() {
                if spec.is_null() {
                    p.embedders.push(None);
                    continue;
                }
                let path = format!("$.meta.embedders[{k}]");
                let layers = spec["layers"].as_u64().ok_or_else(|| schema(&path, "missing layers".into()))? as usize;
                let activation: Activation =
                    serde_json::from_value(spec["activation"].clone()).map_err(|e| schema(&path, e.to_string()))?;
                let output: OutputMode =
                    serde_json::from_value(spec["output"].clone()).map_err(|e| schema(&path, e.to_string()))?;
                let layers = (0..layers)
                    .map(|l| {
                        Ok(MlpLayer {
                            weight: c.get(&format!("embedder{k}.layer{l}.weight"))?.clone(),
                            bias: c.get(&format!("embedder{k}.layer{l}.bias"))?.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                p.embedders.push(Some(MlpEmbedder::new(layers, activation, output)?));
            }
        }
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(p.tensors_mut()) {
            let m = c.get(name)?;
            if m.shape() != slot.shape() {
                return Err(Error::shape("checkpoint tensor", format!("{name} {}", slot.shape_string()), m.shape_string()));
            }
            *slot = m.clone();
        }
        Ok(p)
    }
}

/// Attention/decoder state after step `t` (`t = 0` is the initial state).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub t: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub z: Vec<f64>,
    pub c: Vec<f64>,
    pub d_bar: Vec<f64>,
}

impl AttentionState {
    /// `z_0 = 0`, uniform `α_0` and `β_0`, zero contexts.
    pub fn initial(dims: &Dims) -> Self {
        AttentionState {
            t: 0,
            alpha: vec![1.0 / dims.query_channels as f64; dims.query_channels],
            beta: vec![1.0 / dims.candidate_channels as f64; dims.candidate_channels],
            z: vec![0.0; dims.decoder_dim],
            c: vec![0.0; dims.query_dim],
            d_bar: vec![0.0; dims.candidate_dim],
        }
    }
}

/// Output of one attention step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub c: Vec<f64>,
    pub d_bar: Vec<f64>,
}

/// Scores and selection distribution over a set of unranked candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingTrace {
    /// States after steps `1..=T`.
    pub states: Vec<AttentionState>,
    /// Per step: `(candidate, score)` over the candidates still unranked at that step.
    pub scores: Vec<Vec<(usize, f64)>>,
    pub order: Vec<usize>,
    /// `log P(r̃_t | r̃_1..r̃_{t-1})` per step.
    pub log_probs: Vec<f64>,
}

impl RankingTrace {
    pub fn log_likelihood(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Gradient of a loss wrt every parameter, laid out like the parameters themselves.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grads: AttRNParams,
}

/// Gradients wrt the (materialized) embeddings of one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub query: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<Vec<f64>>>,
}

/// Candidates sorted by descending relevance, ties by ascending index.
pub fn canonical_order(relevance: &[u8]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..relevance.len()).collect();
    order.sort_by(|&a, &b| relevance[b].cmp(&relevance[a]).then(a.cmp(&b)));
    order
}

/// `g`: pool over every candidate and channel.
pub fn pool_g(b: &EmbeddingBundle, mode: Pooling) -> Vec<f64> {
    pooled(b.candidates().iter().flatten().map(Vec::as_slice), b.candidate_dim(), mode).0
}

/// `h_n`: pool channel `n` over all candidates.
pub fn pool_h(b: &EmbeddingBundle, n: usize, mode: Pooling) -> Result<Vec<f64>> {
    if n >= b.candidate_channels() {
        return Err(Error::invalid(format!("channel {n} >= N = {}", b.candidate_channels())));
    }
    Ok(pooled(b.candidates().iter().map(|c| c[n].as_slice()), b.candidate_dim(), mode).0)
}

/// Pools vectors; for max pooling also returns, per coordinate, the index of the winning vector.
fn pooled<'a>(vectors: impl Iterator<Item = &'a [f64]>, dim: usize, mode: Pooling) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; dim];
    let mut arg = vec![0usize; dim];
    let mut count = 0usize;
    for (i, v) in vectors.enumerate() {
        match mode {
            Pooling::Mean => axpy(1.0, v, &mut out),
            Pooling::Max => {
                for k in 0..dim {
                    if i == 0 || v[k] > out[k] {
                        out[k] = v[k];
                        arg[k] = i;
                    }
                }
            }
        }
        count += 1;
    }
    if mode == Pooling::Mean {
        out.iter_mut().for_each(|x| *x /= count as f64);
    }
    (out, arg)
}

/// Routes a pooled-vector gradient back to its inputs.
fn pool_backward(mode: Pooling, arg: &[usize], count: usize, d_pooled: &[f64], mut sink: impl FnMut(usize, usize, f64)) {
    match mode {
        Pooling::Mean => {
            let w = 1.0 / count as f64;
            for i in 0..count {
                for (k, &d) in d_pooled.iter().enumerate() {
                    sink(i, k, d * w);
                }
            }
        }
        Pooling::Max => {
            for (k, &d) in d_pooled.iter().enumerate() {
                sink(arg[k], k, d);
            }
        }
    }
}

fn sorted_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

/// Column offsets inside an attention layer's input.
#[derive(Clone, Copy)]
struct AttnCols {
    z: usize,
    item: usize,
    ctx: usize,
    own: usize,
    other: usize,
}

impl AttnCols {
    fn new(d: &Dims) -> Self {
        let item = d.decoder_dim;
        let ctx = item + d.query_dim;
        let own = ctx + d.candidate_dim;
        AttnCols {
            z: 0,
            item,
            ctx,
            own,
            other: own + 1,
        }
    }
}

/// Per-episode quantities that do not change across steps.
struct Context<'b> {
    b: Cow<'b, EmbeddingBundle>,
    g: Vec<f64>,
    g_arg: Vec<usize>,
    h: Vec<Vec<f64>>,
    h_arg: Vec<Vec<usize>>,
    q_bar: Vec<f64>,
    q_bar_arg: Vec<usize>,
    /// `W_e[item] q_m + W_e[ctx] g + b_e` per query channel.
    e_static: Vec<Vec<f64>>,
    /// `W_f[item] q̄ + W_f[ctx] h_n + b_f` per candidate channel.
    f_static: Vec<Vec<f64>>,
    cols: AttnCols,
}

impl<'b> Context<'b> {
    fn new(p: &AttRNParams, b: Cow<'b, EmbeddingBundle>) -> Self {
        let d = &p.dims;
        let cols = AttnCols::new(d);
        let (n_ch, dr) = (b.candidate_channels(), b.candidate_dim());
        let (g, g_arg) = pooled(b.candidates().iter().flatten().map(Vec::as_slice), dr, p.pooling);
        let (h, h_arg): (Vec<_>, Vec<_>) = (0..n_ch)
            .map(|n| pooled(b.candidates().iter().map(|c| c[n].as_slice()), dr, p.pooling))
            .unzip();
        let (q_bar, q_bar_arg) = pooled(b.queries().iter().map(Vec::as_slice), b.query_dim(), p.pooling);

        let qa = &p.query_attention;
        let mut shared_e = qa.bias.as_slice().to_vec();
        qa.weight.matvec_cols_add(cols.ctx, &g, &mut shared_e);
        let e_static = b
            .queries()
            .iter()
            .map(|q| {
                let mut v = shared_e.clone();
                qa.weight.matvec_cols_add(cols.item, q, &mut v);
                v
            })
            .collect();
        let ra = &p.result_attention;
        let mut shared_f = ra.bias.as_slice().to_vec();
        ra.weight.matvec_cols_add(cols.item, &q_bar, &mut shared_f);
        let f_static = h
            .iter()
            .map(|hn| {
                let mut v = shared_f.clone();
                ra.weight.matvec_cols_add(cols.ctx, hn, &mut v);
                v
            })
            .collect();
        Context {
            b,
            g,
            g_arg,
            h,
            h_arg,
            q_bar,
            q_bar_arg,
            e_static,
            f_static,
            cols,
        }
    }
}

/// Everything the backward pass needs from one step.
struct StepCache {
    state: AttentionState,
    /// Descending order of `β_{t-1}` (fed to the query attention) and `α_{t-1}`.
    beta_prev_order: Vec<usize>,
    alpha_prev_order: Vec<usize>,
    a_e: Vec<Vec<f64>>,
    a_f: Vec<Vec<f64>>,
    /// `W c_t + V z_t`
    u: Vec<f64>,
    /// `r_{t'n} · u_t`, indexed `[t'][n]`.
    proj: Vec<Vec<f64>>,
    /// `s_{t,t'}` for every candidate `t'`.
    scores: Vec<f64>,
}

/// Full forward pass over `T` steps.
pub(crate) struct Unrolled<'b> {
    ctx: Context<'b>,
    steps: Vec<StepCache>,
    embed: Option<EmbedCache>,
}

impl Unrolled<'_> {
    pub(crate) fn score_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.steps.iter().map(|s| s.scores.as_slice())
    }

    pub(crate) fn len(&self) -> usize {
        self.steps.len()
    }

    pub(crate) fn state(&self, t: usize) -> &AttentionState {
        &self.steps[t].state
    }
}

fn attention_forward(p: &AttRNParams, ctx: &Context, prev: &AttentionState) -> (AttentionOutput, [Vec<usize>; 2], [Vec<Vec<f64>>; 2]) {
    let d = &p.dims;
    let cols = ctx.cols;
    let da = d.attention_dim;
    let beta_order = sorted_desc(&prev.beta);
    let alpha_order = sorted_desc(&prev.alpha);
    let beta_sorted: Vec<f64> = beta_order.iter().map(|&i| prev.beta[i]).collect();
    let alpha_sorted: Vec<f64> = alpha_order.iter().map(|&i| prev.alpha[i]).collect();

    let qa = &p.query_attention;
    let mut shared = vec![0.0; da];
    qa.weight.matvec_cols_add(cols.z, &prev.z, &mut shared);
    qa.weight.matvec_cols_add(cols.other, &beta_sorted, &mut shared);
    let mut e = vec![0.0; d.query_channels];
    let mut a_e = Vec::with_capacity(d.query_channels);
    for m in 0..d.query_channels {
        let a: Vec<f64> = (0..da)
            .map(|i| (ctx.e_static[m][i] + shared[i] + qa.weight.get(i, cols.own) * prev.alpha[m]).tanh())
            .collect();
        e[m] = dot(qa.proj.as_slice(), &a);
        a_e.push(a);
    }

    let ra = &p.result_attention;
    let mut shared = vec![0.0; da];
    ra.weight.matvec_cols_add(cols.z, &prev.z, &mut shared);
    ra.weight.matvec_cols_add(cols.other, &alpha_sorted, &mut shared);
    let mut f = vec![0.0; d.candidate_channels];
    let mut a_f = Vec::with_capacity(d.candidate_channels);
    for n in 0..d.candidate_channels {
        let a: Vec<f64> = (0..da)
            .map(|i| (ctx.f_static[n][i] + shared[i] + ra.weight.get(i, cols.own) * prev.beta[n]).tanh())
            .collect();
        f[n] = dot(ra.proj.as_slice(), &a);
        a_f.push(a);
    }

    let mut alpha = vec![0.0; e.len()];
    numkit::softmax_into(&e, &mut alpha);
    let mut beta = vec![0.0; f.len()];
    numkit::softmax_into(&f, &mut beta);

    let mut c = vec![0.0; d.query_dim];
    for (m, q) in ctx.b.queries().iter().enumerate() {
        axpy(alpha[m], q, &mut c);
    }
    let mut d_bar = vec![0.0; d.candidate_dim];
    for (n, hn) in ctx.h.iter().enumerate() {
        axpy(beta[n], hn, &mut d_bar);
    }
    (AttentionOutput { alpha, beta, c, d_bar }, [beta_order, alpha_order], [a_e, a_f])
}

fn decoder_forward(p: &AttRNParams, prev_z: &[f64], c: &[f64], d_bar: &[f64]) -> Vec<f64> {
    let dec = &p.decoder;
    let mut z = dec.bias.as_slice().to_vec();
    dec.state.matvec_cols_add(0, prev_z, &mut z);
    dec.query.matvec_cols_add(0, c, &mut z);
    dec.result.matvec_cols_add(0, d_bar, &mut z);
    z.iter_mut().for_each(|v| *v = v.tanh());
    z
}

/// `(u, proj, scores)` for every candidate given the step's `β`, `c`, `z`.
fn score_all(p: &AttRNParams, b: &EmbeddingBundle, beta: &[f64], c: &[f64], z: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let mut u = vec![0.0; p.dims.candidate_dim];
    p.w.matvec_cols_add(0, c, &mut u);
    p.v.matvec_cols_add(0, z, &mut u);
    let proj: Vec<Vec<f64>> = b
        .candidates()
        .iter()
        .map(|channels| channels.iter().map(|r| dot(r, &u)).collect())
        .collect();
    let scores = proj.iter().map(|row| dot(row, beta)).collect();
    (u, proj, scores)
}

struct EmbedCache {
    /// `(channel, query trace, candidate traces)`; either side may be absent.
    channels: Vec<(usize, Option<MlpTrace>, Option<Vec<MlpTrace>>)>,
}

/// Replaces unfrozen embedder-backed channels with freshly computed embeddings.
fn materialize<'b>(p: &AttRNParams, b: &'b EmbeddingBundle) -> Result<(Cow<'b, EmbeddingBundle>, Option<EmbedCache>)> {
    let active: Vec<(usize, &MlpEmbedder, bool, bool)> = p
        .embedders
        .iter()
        .enumerate()
        .filter_map(|(k, e)| e.as_ref().map(|e| (k, e)))
        .map(|(k, e)| {
            let q = k < b.query_channels() && !b.query_frozen()[k];
            let r = k < b.candidate_channels() && !b.candidate_frozen()[k];
            (k, e, q, r)
        })
        .filter(|&(_, _, q, r)| q || r)
        .collect();
    if active.is_empty() {
        return Ok((Cow::Borrowed(b), None));
    }
    let raw = b
        .raw()
        .ok_or_else(|| Error::invalid("bundle has unfrozen embedder-backed channels but no raw features"))?;
    let mut out = b.clone();
    let mut channels = Vec::with_capacity(active.len());
    for (k, e, use_q, use_r) in active {
        if e.input_dim() != raw.query.len() {
            return Err(Error::shape(
                "embedder input",
                format!("embedder{k} input {}", e.input_dim()),
                format!("raw features of {}", raw.query.len()),
            ));
        }
        let q_trace = use_q.then(|| {
            let tr = e.forward_cached(&raw.query);
            out.set_query(k, tr.output().to_vec());
            tr
        });
        let r_traces = use_r.then(|| {
            raw.candidates
                .iter()
                .enumerate()
                .map(|(t, x)| {
                    let tr = e.forward_cached(x);
                    out.set_candidate(t, k, tr.output().to_vec());
                    tr
                })
                .collect()
        });
        channels.push((k, q_trace, r_traces));
    }
    Ok((Cow::Owned(out), Some(EmbedCache { channels })))
}

pub(crate) fn unroll<'b>(p: &AttRNParams, b: &'b EmbeddingBundle) -> Result<Unrolled<'b>> {
    p.dims.check_bundle(b)?;
    let (mat, embed) = materialize(p, b)?;
    let ctx = Context::new(p, mat);
    let t_len = ctx.b.len();
    let mut steps: Vec<StepCache> = Vec::with_capacity(t_len);
    let initial = AttentionState::initial(&p.dims);
    for t in 1..=t_len {
        let prev = steps.last().map_or(&initial, |s| &s.state);
        let (att, [beta_prev_order, alpha_prev_order], [a_e, a_f]) = attention_forward(p, &ctx, prev);
        let z = decoder_forward(p, &prev.z, &att.c, &att.d_bar);
        let (u, proj, scores) = score_all(p, &ctx.b, &att.beta, &att.c, &z);
        if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("scores at step {t}"),
                index,
            });
        }
        steps.push(StepCache {
            state: AttentionState {
                t,
                alpha: att.alpha,
                beta: att.beta,
                z,
                c: att.c,
                d_bar: att.d_bar,
            },
            beta_prev_order,
            alpha_prev_order,
            a_e,
            a_f,
            u,
            proj,
            scores,
        });
    }
    Ok(Unrolled { ctx, steps, embed })
}

/// `log P(candidate | remaining)` for every candidate in `remaining` (ascending index order).
pub(crate) fn selection_log_probs(row: &[f64], remaining: &[usize]) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(remaining.iter().map(|&i| row[i]));
    (lse, remaining.iter().map(|&i| row[i] - lse).collect())
}

/// One attention step (query and result attention, softmax, context vectors).
pub fn attention_step(p: &AttRNParams, b: &EmbeddingBundle, prev: &AttentionState) -> Result<AttentionOutput> {
    p.dims.check_bundle(b)?;
    let d = &p.dims;
    if prev.alpha.len() != d.query_channels || prev.beta.len() != d.candidate_channels || prev.z.len() != d.decoder_dim {
        return Err(Error::shape(
            "attention_step",
            format!("dims {d:?}"),
            format!(
                "state with |α| = {}, |β| = {}, |z| = {}",
                prev.alpha.len(),
                prev.beta.len(),
                prev.z.len()
            ),
        ));
    }
    let (mat, _) = materialize(p, b)?;
    let ctx = Context::new(p, mat);
    Ok(attention_forward(p, &ctx, prev).0)
}

/// `z_t = tanh(A z_{t-1} + B c_t + D d̄_t + b_z)`
pub fn decoder_step(p: &AttRNParams, prev_z: &[f64], c: &[f64], d_bar: &[f64]) -> Result<Vec<f64>> {
    let d = &p.dims;
    if prev_z.len() != d.decoder_dim || c.len() != d.query_dim || d_bar.len() != d.candidate_dim {
        return Err(Error::shape(
            "decoder_step",
            format!("(d_z, d_q, d_r) = ({}, {}, {})", d.decoder_dim, d.query_dim, d.candidate_dim),
            format!("({}, {}, {})", prev_z.len(), c.len(), d_bar.len()),
        ));
    }
    Ok(decoder_forward(p, prev_z, c, d_bar))
}

/// Scores `s_{t,t'}` of the `unranked` candidates under `state`, and their selection distribution.
pub fn score_candidates(p: &AttRNParams, b: &EmbeddingBundle, state: &AttentionState, unranked: &[usize]) -> Result<ScoreMap> {
    p.dims.check_bundle(b)?;
    if unranked.is_empty() {
        return Err(Error::invalid("no unranked candidates to score"));
    }
    let mut seen = vec![false; b.len()];
    for &t in unranked {
        if t >= b.len() || std::mem::replace(&mut seen[t], true) {
            return Err(Error::invalid(format!("{unranked:?} is not a set of candidates of 0..{}", b.len())));
        }
    }
    let (mat, _) = materialize(p, b)?;
    let (_, _, all) = score_all(p, &mat, &state.beta, &state.c, &state.z);
    let scores: Vec<f64> = unranked.iter().map(|&t| all[t]).collect();
    let probabilities = numkit::stable_softmax(&scores)?;
    Ok(ScoreMap {
        candidates: unranked.to_vec(),
        scores,
        probabilities,
    })
}

/// Runs the recurrence over all `T` steps. With a `target_order` the selections follow it
/// (teacher forcing); otherwise each step picks the highest-scoring unranked candidate,
/// ties going to the lowest index.
pub fn forward_episode(p: &AttRNParams, b: &EmbeddingBundle, target_order: Option<&[usize]>) -> Result<RankingTrace> {
    if let Some(order) = target_order {
        check_permutation(order, b.len())?;
    }
    let un = unroll(p, b)?;
    let mut remaining: Vec<usize> = (0..b.len()).collect();
    let mut trace = RankingTrace {
        states: Vec::with_capacity(b.len()),
        scores: Vec::with_capacity(b.len()),
        order: Vec::with_capacity(b.len()),
        log_probs: Vec::with_capacity(b.len()),
    };
    for (t, step) in un.steps.iter().enumerate() {
        let row = &step.scores;
        let choice = match target_order {
            Some(order) => order[t],
            None => argmax_lowest(row, &remaining),
        };
        let (_, lps) = selection_log_probs(row, &remaining);
        let pos = remaining.binary_search(&choice).expect("choice is unranked");
        trace.scores.push(remaining.iter().map(|&i| (i, row[i])).collect());
        trace.log_probs.push(lps[pos]);
        trace.order.push(choice);
        trace.states.push(step.state.clone());
        remaining.remove(pos);
    }
    Ok(trace)
}

pub(crate) fn argmax_lowest(row: &[f64], remaining: &[usize]) -> usize {
    let mut best = remaining[0];
    for &i in &remaining[1..] {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// Negative log-likelihood of `target_order` under teacher forcing, with gradients.
pub fn nll_loss(p: &AttRNParams, b: &EmbeddingBundle, target_order: &[usize]) -> Result<LossAndGrad> {
    check_permutation(target_order, b.len())?;
    let un = unroll(p, b)?;
    let mut remaining: Vec<usize> = (0..b.len()).collect();
    let mut loss = 0.0;
    let mut d_scores = Vec::with_capacity(b.len());
    for (t, step) in un.steps.iter().enumerate() {
        let target = target_order[t];
        let (lse, _) = selection_log_probs(&step.scores, &remaining);
        let term = lse - step.scores[target];
        if !term.is_finite() {
            return Err(Error::NonFinite {
                context: "nll loss".into(),
                index: t + 1,
            });
        }
        loss += term;
        let mut ds = vec![0.0; b.len()];
        for &i in &remaining {
            ds[i] = (step.scores[i] - lse).exp();
        }
        ds[target] -= 1.0;
        d_scores.push(ds);
        remaining.retain(|&i| i != target);
    }
    let grads = backward(p, &un, &d_scores);
    Ok(LossAndGrad { loss, grads })
}

/// Pairwise hinge loss summed over steps: at step `t`, the target `r̃_t` against every unranked
/// candidate of strictly lower relevance. Subgradient 0 at the kink.
pub fn hinge_loss(p: &AttRNParams, b: &EmbeddingBundle, target_order: &[usize], relevance: &[u8]) -> Result<LossAndGrad> {
    check_permutation(target_order, b.len())?;
    if relevance.len() != b.len() {
        return Err(Error::shape(
            "hinge_loss",
            format!("{} candidates", b.len()),
            format!("{} relevance labels", relevance.len()),
        ));
    }
    let un = unroll(p, b)?;
    let mut ranked = vec![false; b.len()];
    let mut loss = 0.0;
    let mut d_scores = Vec::with_capacity(b.len());
    for (t, step) in un.steps.iter().enumerate() {
        let target = target_order[t];
        ranked[target] = true;
        let mut ds = vec![0.0; b.len()];
        for other in 0..b.len() {
            if ranked[other] || relevance[target] <= relevance[other] {
                continue;
            }
            let margin = 1.0 - step.scores[target] + step.scores[other];
            if margin > 0.0 {
                loss += margin;
                ds[target] -= 1.0;
                ds[other] += 1.0;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "hinge loss".into(),
                index: t + 1,
            });
        }
        d_scores.push(ds);
    }
    let grads = backward(p, &un, &d_scores);
    Ok(LossAndGrad { loss, grads })
}

/// Dispatches on `kind`; `relevance` is only read by the hinge loss.
pub fn loss(kind: LossKind, p: &AttRNParams, b: &EmbeddingBundle, target_order: &[usize], relevance: &[u8]) -> Result<LossAndGrad> {
    match kind {
        LossKind::Softmax => nll_loss(p, b, target_order),
        LossKind::Hinge => hinge_loss(p, b, target_order, relevance),
    }
}

/// Hinge margins `s_{t,r̃_t} - s_{t,r_{t'}}` of every counted pair (for kink avoidance in tests).
pub fn hinge_margins(p: &AttRNParams, b: &EmbeddingBundle, target_order: &[usize], relevance: &[u8]) -> Result<Vec<f64>> {
    check_permutation(target_order, b.len())?;
    let un = unroll(p, b)?;
    let mut ranked = vec![false; b.len()];
    let mut out = Vec::new();
    for (t, step) in un.steps.iter().enumerate() {
        let target = target_order[t];
        ranked[target] = true;
        for other in 0..b.len() {
            if !ranked[other] && relevance[target] > relevance[other] {
                out.push(step.scores[target] - step.scores[other]);
            }
        }
    }
    Ok(out)
}

/// Gradients wrt the bundle's embeddings for a loss with score gradients `d_scores`
/// (exposed for verification of the input path).
pub fn input_gradients(p: &AttRNParams, b: &EmbeddingBundle, d_scores: &[Vec<f64>]) -> Result<InputGrads> {
    let un = unroll(p, b)?;
    if d_scores.len() != un.len() || d_scores.iter().any(|r| r.len() != b.len()) {
        return Err(Error::shape("input_gradients", format!("{0}x{0} score table", b.len()), "score gradients"));
    }
    let mut inputs = InputGrads {
        query: vec![vec![0.0; b.query_dim()]; b.query_channels()],
        candidates: vec![vec![vec![0.0; b.candidate_dim()]; b.candidate_channels()]; b.len()],
    };
    backward_into(p, &un, d_scores, &mut p.zeros_like(), Some(&mut inputs));
    Ok(inputs)
}

fn backward(p: &AttRNParams, un: &Unrolled, d_scores: &[Vec<f64>]) -> AttRNParams {
    let mut grads = p.zeros_like();
    match &un.embed {
        None => backward_into(p, un, d_scores, &mut grads, None),
        Some(cache) => {
            let b = &un.ctx.b;
            let mut inputs = InputGrads {
                query: vec![vec![0.0; b.query_dim()]; b.query_channels()],
                candidates: vec![vec![vec![0.0; b.candidate_dim()]; b.candidate_channels()]; b.len()],
            };
            backward_into(p, un, d_scores, &mut grads, Some(&mut inputs));
            for (k, q_trace, r_traces) in &cache.channels {
                let embedder = p.embedders[*k].as_ref().expect("active embedder");
                let g = grads.embedders[*k].as_mut().expect("gradient slot");
                if let Some(tr) = q_trace {
                    embedder.backward(tr, &inputs.query[*k], g);
                }
                if let Some(trs) = r_traces {
                    for (t, tr) in trs.iter().enumerate() {
                        embedder.backward(tr, &inputs.candidates[t][*k], g);
                    }
                }
            }
        }
    }
    grads
}

/// Backpropagation through the full recurrence.
fn backward_into(p: &AttRNParams, un: &Unrolled, d_scores: &[Vec<f64>], grads: &mut AttRNParams, mut inputs: Option<&mut InputGrads>) {
    let d = p.dims;
    let ctx = &un.ctx;
    let b = &ctx.b;
    let cols = ctx.cols;
    let (m_ch, n_ch, da) = (d.query_channels, d.candidate_channels, d.attention_dim);
    let t_len = un.steps.len();
    let initial = AttentionState::initial(&d);

    let mut dz_carry = vec![0.0; d.decoder_dim];
    let mut dalpha_carry = vec![0.0; m_ch];
    let mut dbeta_carry = vec![0.0; n_ch];
    // Σ_t dpre for the step-invariant parts of the attention inputs.
    let mut e_static_grad = vec![vec![0.0; da]; m_ch];
    let mut f_static_grad = vec![vec![0.0; da]; n_ch];

    for t in (0..t_len).rev() {
        let step = &un.steps[t];
        let st = &step.state;
        let prev = if t == 0 { &initial } else { &un.steps[t - 1].state };
        let ds = &d_scores[t];

        let mut dz = std::mem::take(&mut dz_carry);
        let mut dalpha = std::mem::take(&mut dalpha_carry);
        let mut dbeta = std::mem::take(&mut dbeta_carry);

        // scores: s_{t'} = Σ_n β_n r_{t'n}·u
        let mut du = vec![0.0; d.candidate_dim];
        for (tp, &g) in ds.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for n in 0..n_ch {
                dbeta[n] += g * step.proj[tp][n];
                axpy(g * st.beta[n], b.candidate(tp, n), &mut du);
            }
            if let Some(inp) = inputs.as_deref_mut() {
                for n in 0..n_ch {
                    axpy(g * st.beta[n], &step.u, &mut inp.candidates[tp][n]);
                }
            }
        }
        // u = W c + V z
        grads.w.add_outer_cols(0, 1.0, &du, &st.c);
        grads.v.add_outer_cols(0, 1.0, &du, &st.z);
        let mut dc = vec![0.0; d.query_dim];
        p.w.matvec_t_cols_add(0, &du, &mut dc);
        p.v.matvec_t_cols_add(0, &du, &mut dz);

        // decoder
        let dpre: Vec<f64> = dz.iter().zip(&st.z).map(|(g, z)| g * (1.0 - z * z)).collect();
        let dec = &p.decoder;
        let gdec = &mut grads.decoder;
        gdec.state.add_outer_cols(0, 1.0, &dpre, &prev.z);
        gdec.query.add_outer_cols(0, 1.0, &dpre, &st.c);
        gdec.result.add_outer_cols(0, 1.0, &dpre, &st.d_bar);
        axpy(1.0, &dpre, gdec.bias.as_mut_slice());
        let mut dz_prev = vec![0.0; d.decoder_dim];
        dec.state.matvec_t_cols_add(0, &dpre, &mut dz_prev);
        dec.query.matvec_t_cols_add(0, &dpre, &mut dc);
        let mut dd_bar = vec![0.0; d.candidate_dim];
        dec.result.matvec_t_cols_add(0, &dpre, &mut dd_bar);

        // contexts
        for (m, q) in b.queries().iter().enumerate() {
            dalpha[m] += dot(&dc, q);
        }
        for (n, hn) in ctx.h.iter().enumerate() {
            dbeta[n] += dot(&dd_bar, hn);
        }
        if let Some(inp) = inputs.as_deref_mut() {
            for m in 0..m_ch {
                axpy(st.alpha[m], &dc, &mut inp.query[m]);
            }
        }

        // softmax
        let mut de = vec![0.0; m_ch];
        numkit::softmax_backward(&st.alpha, &dalpha, &mut de);
        let mut df = vec![0.0; n_ch];
        numkit::softmax_backward(&st.beta, &dbeta, &mut df);

        let mut dalpha_prev = vec![0.0; m_ch];
        let mut dbeta_prev = vec![0.0; n_ch];

        // query attention
        let qa = &p.query_attention;
        let mut dpre_sum = vec![0.0; da];
        for m in 0..m_ch {
            let a = &step.a_e[m];
            axpy(de[m], a, grads.query_attention.proj.as_mut_slice());
            let dpre: Vec<f64> = (0..da).map(|i| de[m] * qa.proj.as_slice()[i] * (1.0 - a[i] * a[i])).collect();
            let mut own = 0.0;
            for i in 0..da {
                grads.query_attention.weight.as_mut_slice()[i * qa.weight.cols() + cols.own] += dpre[i] * prev.alpha[m];
                own += qa.weight.get(i, cols.own) * dpre[i];
            }
            dalpha_prev[m] += own;
            axpy(1.0, &dpre, &mut dpre_sum);
            axpy(1.0, &dpre, &mut e_static_grad[m]);
        }
        let beta_sorted: Vec<f64> = step.beta_prev_order.iter().map(|&i| prev.beta[i]).collect();
        grads.query_attention.weight.add_outer_cols(cols.z, 1.0, &dpre_sum, &prev.z);
        grads.query_attention.weight.add_outer_cols(cols.other, 1.0, &dpre_sum, &beta_sorted);
        qa.weight.matvec_t_cols_add(cols.z, &dpre_sum, &mut dz_prev);
        let mut d_sorted = vec![0.0; n_ch];
        qa.weight.matvec_t_cols_add(cols.other, &dpre_sum, &mut d_sorted);
        for (j, &i) in step.beta_prev_order.iter().enumerate() {
            dbeta_prev[i] += d_sorted[j];
        }

        // result attention
        let ra = &p.result_attention;
        let mut dpre_sum = vec![0.0; da];
        for n in 0..n_ch {
            let a = &step.a_f[n];
            axpy(df[n], a, grads.result_attention.proj.as_mut_slice());
            let dpre: Vec<f64> = (0..da).map(|i| df[n] * ra.proj.as_slice()[i] * (1.0 - a[i] * a[i])).collect();
            let mut own = 0.0;
            for i in 0..da {
                grads.result_attention.weight.as_mut_slice()[i * ra.weight.cols() + cols.own] += dpre[i] * prev.beta[n];
                own += ra.weight.get(i, cols.own) * dpre[i];
            }
            dbeta_prev[n] += own;
            axpy(1.0, &dpre, &mut dpre_sum);
            axpy(1.0, &dpre, &mut f_static_grad[n]);
        }
        let alpha_sorted: Vec<f64> = step.alpha_prev_order.iter().map(|&i| prev.alpha[i]).collect();
        grads.result_attention.weight.add_outer_cols(cols.z, 1.0, &dpre_sum, &prev.z);
        grads.result_attention.weight.add_outer_cols(cols.other, 1.0, &dpre_sum, &alpha_sorted);
        ra.weight.matvec_t_cols_add(cols.z, &dpre_sum, &mut dz_prev);
        let mut d_sorted = vec![0.0; m_ch];
        ra.weight.matvec_t_cols_add(cols.other, &dpre_sum, &mut d_sorted);
        for (j, &i) in step.alpha_prev_order.iter().enumerate() {
            dalpha_prev[i] += d_sorted[j];
        }

        // d̄_t = Σ β_n h_n feeds h_n's gradient
        if let Some(inp) = inputs.as_deref_mut() {
            let mut dh = vec![vec![0.0; d.candidate_dim]; n_ch];
            for n in 0..n_ch {
                axpy(st.beta[n], &dd_bar, &mut dh[n]);
            }
            route_h(p.pooling, ctx, &dh, inp);
        }

        dz_carry = dz_prev;
        dalpha_carry = dalpha_prev;
        dbeta_carry = dbeta_prev;
    }

    // Step-invariant attention inputs: q_m, g (query side) and q̄, h_n (result side).
    let qa = &p.query_attention;
    let ge = &mut grads.query_attention;
    let mut e_total = vec![0.0; da];
    for (m, q) in b.queries().iter().enumerate() {
        ge.weight.add_outer_cols(cols.item, 1.0, &e_static_grad[m], q);
        axpy(1.0, &e_static_grad[m], &mut e_total);
    }
    ge.weight.add_outer_cols(cols.ctx, 1.0, &e_total, &ctx.g);
    axpy(1.0, &e_total, ge.bias.as_mut_slice());

    let ra = &p.result_attention;
    let gf = &mut grads.result_attention;
    let mut f_total = vec![0.0; da];
    for (n, hn) in ctx.h.iter().enumerate() {
        gf.weight.add_outer_cols(cols.ctx, 1.0, &f_static_grad[n], hn);
        axpy(1.0, &f_static_grad[n], &mut f_total);
    }
    gf.weight.add_outer_cols(cols.item, 1.0, &f_total, &ctx.q_bar);
    axpy(1.0, &f_total, gf.bias.as_mut_slice());

    if let Some(inp) = inputs {
        for (m, grad) in e_static_grad.iter().enumerate() {
            qa.weight.matvec_t_cols_add(cols.item, grad, &mut inp.query[m]);
        }
        let mut dg = vec![0.0; d.candidate_dim];
        qa.weight.matvec_t_cols_add(cols.ctx, &e_total, &mut dg);
        pool_backward(p.pooling, &ctx.g_arg, t_len * n_ch, &dg, |i, k, v| {
            inp.candidates[i / n_ch][i % n_ch][k] += v;
        });
        let mut dq_bar = vec![0.0; d.query_dim];
        ra.weight.matvec_t_cols_add(cols.item, &f_total, &mut dq_bar);
        pool_backward(p.pooling, &ctx.q_bar_arg, m_ch, &dq_bar, |m, k, v| {
            inp.query[m][k] += v;
        });
        let dh: Vec<Vec<f64>> = f_static_grad
            .iter()
            .map(|grad| {
                let mut v = vec![0.0; d.candidate_dim];
                ra.weight.matvec_t_cols_add(cols.ctx, grad, &mut v);
                v
            })
            .collect();
        route_h(p.pooling, ctx, &dh, inp);
    }
}

fn route_h(pooling: Pooling, ctx: &Context, dh: &[Vec<f64>], inp: &mut InputGrads) {
    let t_len = ctx.b.len();
    for (n, grad) in dh.iter().enumerate() {
        pool_backward(pooling, &ctx.h_arg[n], t_len, grad, |t, k, v| {
            inp.candidates[t][n][k] += v;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::RawInputs;
    use crate::numkit::{grad_check, Rng};
    use proptest::prelude::*;

    fn dims(m: usize, n: usize, dq: usize, dr: usize, dz: usize, da: usize) -> Dims {
        Dims {
            query_channels: m,
            candidate_channels: n,
            query_dim: dq,
            candidate_dim: dr,
            decoder_dim: dz,
            attention_dim: da,
        }
    }

    fn random_bundle(rng: &mut Rng, d: &Dims, t: usize) -> EmbeddingBundle {
        let query = (0..d.query_channels)
            .map(|_| (0..d.query_dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let cands = (0..t)
            .map(|_| {
                (0..d.candidate_channels)
                    .map(|_| (0..d.candidate_dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
                    .collect()
            })
            .collect();
        EmbeddingBundle::new(query, cands).unwrap()
    }

    fn random_params(rng: &mut Rng, d: Dims, pooling: Pooling, scale: f64) -> AttRNParams {
        let mut p = AttRNParams::zeros(d, pooling);
        let flat: Vec<f64> = (0..p.num_parameters()).map(|_| rng.uniform(-scale, scale)).collect();
        p.set_flat(&flat).unwrap();
        p
    }

    // Independent oracle: explicit concatenation and dense layers, no precomputation.
    fn naive_layer(layer: &AttentionLayer, x: &[f64]) -> f64 {
        (0..layer.weight.rows())
            .map(|i| {
                let pre: f64 = layer.bias.get(i, 0) + (0..x.len()).map(|j| layer.weight.get(i, j) * x[j]).sum::<f64>();
                layer.proj.get(i, 0) * pre.tanh()
            })
            .sum()
    }

    fn naive_softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn sorted_copy(v: &[f64]) -> Vec<f64> {
        let mut s = v.to_vec();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s
    }

    fn naive_mean(vs: &[&[f64]]) -> Vec<f64> {
        let mut out = vec![0.0; vs[0].len()];
        for v in vs {
            for k in 0..out.len() {
                out[k] += v[k];
            }
        }
        out.iter().map(|x| x / vs.len() as f64).collect()
    }

    /// `(α, β, c, d̄, z)` from an independent recomputation.
    fn naive_step(p: &AttRNParams, b: &EmbeddingBundle, prev: &AttentionState) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let all: Vec<&[f64]> = b.candidates().iter().flatten().map(|v| v.as_slice()).collect();
        let g = naive_mean(&all);
        let h: Vec<Vec<f64>> = (0..b.candidate_channels())
            .map(|n| naive_mean(&b.candidates().iter().map(|c| c[n].as_slice()).collect::<Vec<_>>()))
            .collect();
        let qbar = naive_mean(&b.queries().iter().map(|v| v.as_slice()).collect::<Vec<_>>());
        let e: Vec<f64> = (0..b.query_channels())
            .map(|m| {
                let mut x = prev.z.clone();
                x.extend(b.query(m));
                x.extend(&g);
                x.push(prev.alpha[m]);
                x.extend(sorted_copy(&prev.beta));
                naive_layer(&p.query_attention, &x)
            })
            .collect();
        let f: Vec<f64> = (0..b.candidate_channels())
            .map(|n| {
                let mut x = prev.z.clone();
                x.extend(&qbar);
                x.extend(&h[n]);
                x.push(prev.beta[n]);
                x.extend(sorted_copy(&prev.alpha));
                naive_layer(&p.result_attention, &x)
            })
            .collect();
        let alpha = naive_softmax(&e);
        let beta = naive_softmax(&f);
        let c: Vec<f64> = (0..b.query_dim()).map(|k| (0..alpha.len()).map(|m| alpha[m] * b.query(m)[k]).sum()).collect();
        let d_bar: Vec<f64> = (0..b.candidate_dim()).map(|k| (0..beta.len()).map(|n| beta[n] * h[n][k]).sum()).collect();
        let dec = &p.decoder;
        let z: Vec<f64> = (0..p.dims.decoder_dim)
            .map(|i| {
                let mut s = dec.bias.get(i, 0);
                s += (0..prev.z.len()).map(|j| dec.state.get(i, j) * prev.z[j]).sum::<f64>();
                s += (0..c.len()).map(|j| dec.query.get(i, j) * c[j]).sum::<f64>();
                s += (0..d_bar.len()).map(|j| dec.result.get(i, j) * d_bar[j]).sum::<f64>();
                s.tanh()
            })
            .collect();
        (alpha, beta, c, d_bar, z)
    }

    /// `s_{t'} = (Σ_n β_n r_{t'n})ᵀ (W c + V z)` via explicit matrix products.
    fn naive_score(p: &AttRNParams, b: &EmbeddingBundle, beta: &[f64], c: &[f64], z: &[f64], t: usize) -> f64 {
        let dvec: Vec<f64> = (0..b.candidate_dim())
            .map(|k| (0..beta.len()).map(|n| beta[n] * b.candidate(t, n)[k]).sum())
            .collect();
        p.w.bilinear(&dvec, c).unwrap() + p.v.bilinear(&dvec, z).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_zeros_layout() {
        let d = dims(3, 2, 10, 10, 4, 5);
        let p = init_params(d, Pooling::Mean, InitScheme::IdentityZeros, &mut Rng::new(0)).unwrap();
        assert_eq!(p.w, DenseMatrix::identity(10));
        assert!(p.query_attention.proj.as_slice().iter().all(|&v| v == 0.0));
        assert!(p.result_attention.proj.as_slice().iter().all(|&v| v == 0.0));
        assert!(p.v.as_slice().iter().all(|&v| v == 0.0));
        let bad = dims(3, 2, 10, 8, 4, 5);
        assert!(matches!(
            init_params(bad, Pooling::Mean, InitScheme::IdentityZeros, &mut Rng::new(0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn identity_zeros_attention_stays_uniform() {
        let mut rng = Rng::new(1);
        let d = dims(3, 4, 5, 5, 6, 3);
        let p = init_params(d, Pooling::Mean, InitScheme::IdentityZeros, &mut rng).unwrap();
        let b = random_bundle(&mut rng, &d, 6);
        let trace = forward_episode(&p, &b, None).unwrap();
        for s in &trace.states {
            assert!(s.alpha.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
            assert!(s.beta.iter().all(|&x| (x - 0.25).abs() < 1e-15));
            assert!(s.z.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn small_random_is_seeded() {
        let d = dims(2, 3, 4, 4, 5, 3);
        let a = init_params(d, Pooling::Max, InitScheme::SmallRandom, &mut Rng::new(9)).unwrap();
        let b = init_params(d, Pooling::Max, InitScheme::SmallRandom, &mut Rng::new(9)).unwrap();
        let c = init_params(d, Pooling::Max, InitScheme::SmallRandom, &mut Rng::new(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.w, DenseMatrix::identity(4));
        assert!(a.query_attention.weight.as_slice().iter().all(|v| v.abs() <= SMALL_RANDOM_SCALE));
    }

    #[test]
    fn zero_attention_gives_uniform_weights_and_mean_context() {
        let mut rng = Rng::new(2);
        let d = dims(3, 2, 4, 4, 3, 2);
        let p = AttRNParams::zeros(d, Pooling::Mean);
        let b = random_bundle(&mut rng, &d, 3);
        let out = attention_step(&p, &b, &AttentionState::initial(&d)).unwrap();
        assert!(close(&out.alpha, &[1.0 / 3.0; 3], 1e-15));
        assert!(close(&out.beta, &[0.5; 2], 1e-15));
        let mean = naive_mean(&b.queries().iter().map(|v| v.as_slice()).collect::<Vec<_>>());
        assert!(close(&out.c, &mean, 1e-15));
    }

    #[test]
    fn one_hot_alpha_selects_query_channel() {
        // Huge logit on channel 1 through the own-weight column and a non-uniform α_{t-1}.
        let mut rng = Rng::new(3);
        let d = dims(3, 2, 4, 4, 2, 1);
        let mut p = AttRNParams::zeros(d, Pooling::Mean);
        let own = AttnCols::new(&d).own;
        p.query_attention.weight.set(0, own, 1e3);
        p.query_attention.proj.set(0, 0, 1e3);
        let b = random_bundle(&mut rng, &d, 3);
        let mut prev = AttentionState::initial(&d);
        prev.alpha = vec![0.0, 1.0, 0.0];
        let out = attention_step(&p, &b, &prev).unwrap();
        assert_eq!(out.alpha, vec![0.0, 1.0, 0.0]);
        assert_eq!(out.c, b.query(1).to_vec());
    }

    #[test]
    fn attention_step_matches_scalar_oracle() {
        let mut rng = Rng::new(4);
        let d = dims(2, 2, 2, 2, 2, 3);
        let p = init_params(d, Pooling::Mean, InitScheme::SmallRandom, &mut rng).unwrap();
        let b = random_bundle(&mut rng, &d, 4);
        let mut prev = AttentionState::initial(&d);
        for _ in 0..3 {
            let out = attention_step(&p, &b, &prev).unwrap();
            let (alpha, beta, c, d_bar, z) = naive_step(&p, &b, &prev);
            assert!(close(&out.alpha, &alpha, 1e-14));
            assert!(close(&out.beta, &beta, 1e-14));
            assert!(close(&out.c, &c, 1e-14));
            assert!(close(&out.d_bar, &d_bar, 1e-14));
            let z_fast = decoder_step(&p, &prev.z, &out.c, &out.d_bar).unwrap();
            assert!(close(&z_fast, &z, 1e-14));
            prev = AttentionState {
                t: prev.t + 1,
                alpha,
                beta,
                z,
                c,
                d_bar,
            };
        }
    }

    #[test]
    fn attention_step_rejects_mismatched_bundle() {
        let mut rng = Rng::new(5);
        let d = dims(2, 2, 2, 2, 2, 2);
        let p = AttRNParams::zeros(d, Pooling::Mean);
        let b = random_bundle(&mut rng, &dims(3, 2, 2, 2, 2, 2), 3);
        assert!(matches!(
            attention_step(&p, &b, &AttentionState::initial(&d)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn pooling_examples() {
        let v = vec![0.3, -1.0, 2.0];
        let b = EmbeddingBundle::new(vec![v.clone()], vec![vec![v.clone(), v.clone()]; 3]).unwrap();
        for mode in [Pooling::Mean, Pooling::Max] {
            assert!(close(&pool_g(&b, mode), &v, 1e-15));
            assert!(close(&pool_h(&b, 1, mode).unwrap(), &v, 1e-15));
        }
        let b = EmbeddingBundle::new(vec![vec![0.0, 0.0]], vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]).unwrap();
        assert_eq!(pool_h(&b, 0, Pooling::Mean).unwrap(), vec![0.5, 0.5]);
        assert_eq!(pool_h(&b, 0, Pooling::Max).unwrap(), vec![1.0, 1.0]);
        assert!(pool_h(&b, 1, Pooling::Mean).is_err());
    }

    #[test]
    fn mean_pool_matches_flat_sum() {
        let mut rng = Rng::new(6);
        let d = dims(2, 3, 4, 5, 2, 2);
        let b = random_bundle(&mut rng, &d, 7);
        let mut sum = vec![0.0; 5];
        let mut count = 0.0;
        for t in 0..7 {
            for n in 0..3 {
                for k in 0..5 {
                    sum[k] += b.candidate(t, n)[k];
                }
                count += 1.0;
            }
        }
        let oracle: Vec<f64> = sum.iter().map(|s| s / count).collect();
        assert!(close(&pool_g(&b, Pooling::Mean), &oracle, 1e-12));
    }

    #[test]
    fn decoder_examples() {
        let d = dims(1, 1, 3, 3, 3, 1);
        let mut p = AttRNParams::zeros(d, Pooling::Mean);
        let z = decoder_step(&p, &[0.5, -0.5, 0.1], &[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert_eq!(z, vec![0.0; 3]);
        p.decoder.bias = DenseMatrix::column(vec![0.2, -1.0, 3.0]).unwrap();
        let z = decoder_step(&p, &[0.5, -0.5, 0.1], &[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert_eq!(z, vec![0.2f64.tanh(), (-1.0f64).tanh(), 3.0f64.tanh()]);
        assert!(matches!(decoder_step(&p, &[0.0; 2], &[0.0; 3], &[0.0; 3]), Err(Error::Shape { .. })));

        let mut rng = Rng::new(7);
        let p = random_params(&mut rng, d, Pooling::Mean, 1.0);
        let (z0, c, db) = ([0.3, -0.2, 0.9], [0.1, 0.5, -0.4], [-0.7, 0.2, 0.6]);
        let fast = decoder_step(&p, &z0, &c, &db).unwrap();
        for i in 0..3 {
            let mut s = p.decoder.bias.get(i, 0);
            for j in 0..3 {
                s += p.decoder.state.get(i, j) * z0[j] + p.decoder.query.get(i, j) * c[j] + p.decoder.result.get(i, j) * db[j];
            }
            assert!((fast[i] - s.tanh()).abs() < 1e-15);
            assert!(fast[i].abs() < 1.0);
        }
    }

    #[test]
    fn score_reduces_to_bilinear_similarity() {
        let d = dims(1, 2, 3, 3, 2, 1);
        let mut p = AttRNParams::zeros(d, Pooling::Mean);
        p.w = DenseMatrix::identity(3);
        let c = vec![0.5, -1.0, 2.0];
        let b = EmbeddingBundle::new(
            vec![c.clone()],
            vec![vec![vec![9.0, 9.0, 9.0], c.clone()], vec![vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 0.0]]],
        )
        .unwrap();
        let state = AttentionState {
            t: 1,
            alpha: vec![1.0],
            beta: vec![0.0, 1.0],
            z: vec![0.7, -0.3],
            c: c.clone(),
            d_bar: vec![0.0; 3],
        };
        let map = score_candidates(&p, &b, &state, &[0, 1]).unwrap();
        assert_eq!(map.scores[0], 0.25 + 1.0 + 4.0);
        assert_eq!(map.scores[1], -1.0);
        assert!(matches!(score_candidates(&p, &b, &state, &[]), Err(Error::InvalidArgument(_))));

        // z = 0 removes the V term even when V is non-zero.
        p.v = DenseMatrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let state = AttentionState { z: vec![0.0; 2], ..state };
        let again = score_candidates(&p, &b, &state, &[0, 1]).unwrap();
        assert_eq!(again.scores, map.scores);
    }

    #[test]
    fn score_matches_matrix_product_oracle() {
        let mut rng = Rng::new(8);
        let d = dims(1, 2, 2, 2, 2, 1);
        let p = random_params(&mut rng, d, Pooling::Mean, 1.0);
        let b = random_bundle(&mut rng, &d, 2);
        let state = AttentionState {
            t: 1,
            alpha: vec![1.0],
            beta: vec![0.3, 0.7],
            z: vec![0.2, -0.6],
            c: vec![1.5, -0.5],
            d_bar: vec![0.0; 2],
        };
        let map = score_candidates(&p, &b, &state, &[0, 1]).unwrap();
        let s: Vec<f64> = (0..2).map(|t| naive_score(&p, &b, &state.beta, &state.c, &state.z, t)).collect();
        assert!(close(&map.scores, &s, 1e-14));
        let e: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        assert!(close(&map.probabilities, &[e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])], 1e-14));
    }

    #[test]
    fn forced_last_pick_has_probability_one() {
        let mut rng = Rng::new(9);
        let d = dims(2, 2, 3, 3, 4, 2);
        let p = random_params(&mut rng, d, Pooling::Mean, 0.5);
        let b = random_bundle(&mut rng, &d, 2);
        let trace = forward_episode(&p, &b, Some(&[1, 0])).unwrap();
        assert_eq!(trace.scores[1].len(), 1);
        assert_eq!(trace.log_probs[1], 0.0);
        let nll = nll_loss(&p, &b, &[1, 0]).unwrap();
        assert!((nll.loss + trace.log_probs[0]).abs() < 1e-15);
        assert!(matches!(forward_episode(&p, &b, Some(&[1, 1])), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn trace_matches_per_step_oracle() {
        let mut rng = Rng::new(10);
        let d = dims(2, 3, 3, 3, 4, 3);
        let p = random_params(&mut rng, d, Pooling::Mean, 0.7);
        let b = random_bundle(&mut rng, &d, 3);
        let target = [2, 0, 1];
        let trace = forward_episode(&p, &b, Some(&target)).unwrap();
        let mut prev = AttentionState::initial(&d);
        let mut remaining = vec![0, 1, 2];
        for (t, &pick) in target.iter().enumerate() {
            let (alpha, beta, c, d_bar, z) = naive_step(&p, &b, &prev);
            let s: Vec<f64> = remaining.iter().map(|&i| naive_score(&p, &b, &beta, &c, &z, i)).collect();
            let probs = naive_softmax(&s);
            let pos = remaining.iter().position(|&i| i == pick).unwrap();
            assert!((trace.log_probs[t] - probs[pos].ln()).abs() < 1e-12);
            assert_eq!(trace.scores[t].iter().map(|&(i, _)| i).collect::<Vec<_>>(), remaining);
            remaining.remove(pos);
            prev = AttentionState {
                t: t + 1,
                alpha,
                beta,
                z,
                c,
                d_bar,
            };
        }
    }

    #[test]
    fn free_running_picks_argmax_lowest_index_on_ties() {
        let d = dims(1, 1, 2, 2, 2, 1);
        let mut p = AttRNParams::zeros(d, Pooling::Mean);
        p.w = DenseMatrix::identity(2);
        let b = EmbeddingBundle::new(
            vec![vec![1.0, 0.0]],
            vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
        )
        .unwrap();
        let trace = forward_episode(&p, &b, None).unwrap();
        assert_eq!(trace.order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn uniform_scores_give_log_factorial() {
        let d = dims(2, 2, 3, 3, 4, 2);
        let p = init_params(d, Pooling::Mean, InitScheme::IdentityZeros, &mut Rng::new(0)).unwrap();
        let v = vec![0.2, 0.3, 0.5];
        let b = EmbeddingBundle::new(vec![v.clone(), v.clone()], vec![vec![v.clone(), v.clone()]; 5]).unwrap();
        let nll = nll_loss(&p, &b, &[3, 1, 4, 0, 2]).unwrap();
        let log_fact: f64 = (1..=5).map(|k| (k as f64).ln()).sum();
        assert!((nll.loss - log_fact).abs() < 1e-12);

        let rel = [2, 0, 1, 1, 0];
        let order = canonical_order(&rel);
        assert_eq!(order, vec![0, 2, 3, 1, 4]);
        let hinge = hinge_loss(&p, &b, &order, &rel).unwrap();
        let mut pairs = 0;
        for (t, &i) in order.iter().enumerate() {
            pairs += order[t + 1..].iter().filter(|&&j| rel[i] > rel[j]).count();
        }
        assert_eq!(hinge.loss, pairs as f64);
        assert_eq!(pairs, 8);
    }

    #[test]
    fn satisfied_margins_give_zero_hinge() {
        let d = dims(1, 1, 2, 2, 2, 1);
        let mut p = AttRNParams::zeros(d, Pooling::Mean);
        p.w = DenseMatrix::identity(2);
        p.w.scale(10.0);
        let b = EmbeddingBundle::new(
            vec![vec![1.0, 0.0]],
            vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]], vec![vec![0.9, 0.1]]],
        )
        .unwrap();
        let rel = [2, 0, 1];
        let out = hinge_loss(&p, &b, &canonical_order(&rel), &rel).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.to_flat().iter().all(|&g| g == 0.0));
    }

    fn nll_value(p: &AttRNParams, b: &EmbeddingBundle, order: &[usize]) -> f64 {
        nll_loss(p, b, order).unwrap().loss
    }

    fn check_loss_gradients(kind: LossKind, seed: u64, pooling: Pooling) -> f64 {
        let mut rng = Rng::new(seed);
        let d = dims(3, 2, 3, 3, 4, 3);
        loop {
            let p = random_params(&mut rng, d, pooling, 0.8);
            let b = random_bundle(&mut rng, &d, 5);
            let rel: Vec<u8> = (0..5).map(|_| rng.below(3) as u8).collect();
            let order = canonical_order(&rel);
            if kind == LossKind::Hinge {
                let margins = hinge_margins(&p, &b, &order, &rel).unwrap();
                if margins.is_empty() || margins.iter().any(|m| (m - 1.0).abs() < 1e-6) {
                    continue;
                }
            }
            let analytic = loss(kind, &p, &b, &order, &rel).unwrap();
            let flat = p.to_flat();
            let mut probe = p.clone();
            return grad_check(
                |x| {
                    probe.set_flat(x).unwrap();
                    loss(kind, &probe, &b, &order, &rel).unwrap().loss
                },
                &flat,
                &analytic.grads.to_flat(),
                1e-5,
            )
            .unwrap();
        }
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        for seed in 0..20 {
            let err = check_loss_gradients(LossKind::Softmax, 100 + seed, Pooling::Mean);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn hinge_gradients_match_finite_differences() {
        for seed in 0..20 {
            let err = check_loss_gradients(LossKind::Hinge, 200 + seed, Pooling::Mean);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn max_pooling_gradients_match_finite_differences() {
        for seed in 0..5 {
            let err = check_loss_gradients(LossKind::Softmax, 300 + seed, Pooling::Max);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        for (seed, pooling) in [(400, Pooling::Mean), (401, Pooling::Max)] {
            let mut rng = Rng::new(seed);
            let d = dims(2, 3, 3, 3, 4, 3);
            let p = random_params(&mut rng, d, pooling, 0.8);
            let b = random_bundle(&mut rng, &d, 4);
            let order = [2, 0, 3, 1];
            // dL/ds for the NLL under teacher forcing
            let un = unroll(&p, &b).unwrap();
            let mut remaining: Vec<usize> = (0..4).collect();
            let mut ds = Vec::new();
            for (t, row) in un.score_rows().enumerate() {
                let (lse, _) = selection_log_probs(row, &remaining);
                let mut g = vec![0.0; 4];
                for &i in &remaining {
                    g[i] = (row[i] - lse).exp();
                }
                g[order[t]] -= 1.0;
                ds.push(g);
                remaining.retain(|&i| i != order[t]);
            }
            let grads = input_gradients(&p, &b, &ds).unwrap();
            let mut flat: Vec<f64> = b.queries().iter().flatten().copied().collect();
            flat.extend(b.candidates().iter().flatten().flatten());
            let mut analytic: Vec<f64> = grads.query.iter().flatten().copied().collect();
            analytic.extend(grads.candidates.iter().flatten().flatten());
            let rebuild = |x: &[f64]| {
                let q = x[..6].chunks(3).map(|c| c.to_vec()).collect();
                let c = x[6..].chunks(9).map(|row| row.chunks(3).map(|c| c.to_vec()).collect()).collect();
                EmbeddingBundle::new(q, c).unwrap()
            };
            let err = grad_check(|x| nll_value(&p, &rebuild(x), &order), &flat, &analytic, 1e-6).unwrap();
            assert!(err < 1e-4, "{pooling:?}: relative error {err}");
        }
    }

    #[test]
    fn embedder_gradients_match_finite_differences() {
        let mut rng = Rng::new(500);
        let d = dims(2, 2, 3, 3, 4, 3);
        let raw_dim = 4;
        let mut b = random_bundle(&mut rng, &d, 4);
        let raw = RawInputs {
            query: (0..raw_dim).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            candidates: (0..4).map(|_| (0..raw_dim).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect(),
        };
        b = b.with_raw(raw).unwrap().with_frozen(vec![true, false], vec![true, false]).unwrap();
        let mlp = MlpEmbedder::random(&[raw_dim, 5, 3], Activation::Tanh, OutputMode::Softmax, 0.8, &mut rng).unwrap();
        let p = random_params(&mut rng, d, Pooling::Mean, 0.8).with_embedder(1, mlp).unwrap();
        let order = [1, 3, 0, 2];
        let analytic = nll_loss(&p, &b, &order).unwrap();
        let embedder_grads = analytic.grads.embedders[1].as_ref().unwrap();
        assert!(embedder_grads.layers[0].weight.frobenius_norm() > 0.0);
        let mut probe = p.clone();
        let err = grad_check(
            |x| {
                probe.set_flat(x).unwrap();
                nll_value(&probe, &b, &order)
            },
            &p.to_flat(),
            &analytic.grads.to_flat(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");

        // Frozen channels ignore the embedder entirely.
        let frozen = b.clone().with_frozen(vec![true, true], vec![true, true]).unwrap();
        let out = nll_loss(&p, &frozen, &order).unwrap();
        assert!(out.grads.embedders[1].as_ref().unwrap().layers.iter().all(|l| l.weight.frobenius_norm() == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = Rng::new(600);
        let d = dims(2, 3, 4, 4, 5, 3);
        let mlp = MlpEmbedder::random(&[6, 4], Activation::Sigmoid, OutputMode::LastHidden, 0.3, &mut rng).unwrap();
        let p = random_params(&mut rng, d, Pooling::Max, 1.0).with_embedder(1, mlp).unwrap();
        let c = p.to_container(json!({"loss": "hinge"}));
        let back = AttRNParams::from_container(&Container::decode(&c.encode()).unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!(c.meta["loss"], "hinge");
        let mut broken = c.clone();
        broken.meta["kind"] = json!("bundle");
        assert!(matches!(AttRNParams::from_container(&broken), Err(Error::Schema { .. })));
    }

    fn permuted_query(p: &AttRNParams, b: &EmbeddingBundle, perm: &[usize]) -> (EmbeddingBundle, RankingTrace, RankingTrace) {
        let pb = b.permute_query_channels(perm).unwrap();
        let order: Vec<usize> = (0..b.len()).rev().collect();
        (pb.clone(), forward_episode(p, b, Some(&order)).unwrap(), forward_episode(p, &pb, Some(&order)).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn attention_weights_are_distributions(seed in 0u64..10_000, scale in 0.01f64..3.0) {
            let mut rng = Rng::new(seed);
            let d = dims(1 + rng.below(4), 1 + rng.below(4), 3, 3, 4, 3);
            let p = random_params(&mut rng, d, Pooling::Mean, scale);
            let t = 2 + rng.below(5);
            let b = random_bundle(&mut rng, &d, t);
            for s in forward_episode(&p, &b, None).unwrap().states {
                prop_assert!(s.alpha.iter().all(|&a| a >= 0.0));
                prop_assert!((s.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(s.beta.iter().all(|&x| x >= 0.0));
                prop_assert!((s.beta.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn query_channel_permutation_equivariance(seed in 0u64..10_000, max_pool in any::<bool>()) {
            let mut rng = Rng::new(seed);
            let m = 2 + rng.below(3);
            let d = dims(m, 1 + rng.below(3), 3, 3, 4, 3);
            let pooling = if max_pool { Pooling::Max } else { Pooling::Mean };
            let p = random_params(&mut rng, d, pooling, 1.0);
            let b = random_bundle(&mut rng, &d, 5);
            let mut perm: Vec<usize> = (0..m).collect();
            rng.shuffle(&mut perm);
            let (pb, base, moved) = permuted_query(&p, &b, &perm);
            for (s, ps) in base.states.iter().zip(&moved.states) {
                for (j, &src) in perm.iter().enumerate() {
                    prop_assert!((ps.alpha[j] - s.alpha[src]).abs() <= 1e-12);
                }
                prop_assert!(close(&s.c, &ps.c, 1e-12));
            }
            for (a, bb) in base.scores.iter().zip(&moved.scores) {
                for (x, y) in a.iter().zip(bb) {
                    prop_assert!((x.1 - y.1).abs() <= 1e-12);
                }
            }
            let rel = [2, 0, 1, 1, 0];
            let order = canonical_order(&rel);
            for kind in [LossKind::Softmax, LossKind::Hinge] {
                let l0 = loss(kind, &p, &b, &order, &rel).unwrap().loss;
                let l1 = loss(kind, &p, &pb, &order, &rel).unwrap().loss;
                prop_assert!((l0 - l1).abs() <= 1e-12);
            }
        }

        #[test]
        fn candidate_permutation_equivariance(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let d = dims(2, 2, 3, 3, 4, 3);
            let p = random_params(&mut rng, d, Pooling::Mean, 1.0);
            let b = random_bundle(&mut rng, &d, 6);
            let mut perm: Vec<usize> = (0..6).collect();
            rng.shuffle(&mut perm);
            let pb = b.permute_candidates(&perm).unwrap();
            let base = forward_episode(&p, &b, None).unwrap();
            let moved = forward_episode(&p, &pb, None).unwrap();
            let probs = |tr: &RankingTrace| numkit::stable_softmax(&tr.scores[0].iter().map(|x| x.1).collect::<Vec<_>>()).unwrap();
            let (p0, p1) = (probs(&base), probs(&moved));
            for (j, &src) in perm.iter().enumerate() {
                prop_assert!((p1[j] - p0[src]).abs() <= 1e-12);
            }
            let labels: Vec<usize> = (0..6).map(|_| rng.below(3)).collect();
            let moved_labels: Vec<usize> = perm.iter().map(|&src| labels[src]).collect();
            let mut a: Vec<usize> = base.order.iter().map(|&i| labels[i]).collect();
            let mut c: Vec<usize> = moved.order.iter().map(|&i| moved_labels[i]).collect();
            a.sort();
            c.sort();
            prop_assert_eq!(a, c);
            // Without exact ties the greedy order itself is carried along.
            let mapped: Vec<usize> = moved.order.iter().map(|&j| perm[j]).collect();
            prop_assert_eq!(mapped, base.order);
        }

        #[test]
        fn nll_is_shift_invariant(seed in 0u64..10_000, shift in -50.0f64..50.0) {
            let mut rng = Rng::new(seed);
            let row: Vec<f64> = (0..6).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
            let remaining = [0, 2, 3, 5];
            let (_, a) = selection_log_probs(&row, &remaining);
            let (_, b) = selection_log_probs(&shifted, &remaining);
            prop_assert!(close(&a, &b, 1e-12));
        }
    }

    #[test]
    fn one_hot_beta_reduces_to_channel_similarity() {
        let mut rng = Rng::new(700);
        let d = dims(1, 3, 3, 3, 4, 1);
        let mut p = random_params(&mut rng, d, Pooling::Mean, 0.5);
        p.v.fill(0.0);
        p.result_attention.weight.fill(0.0);
        p.result_attention.bias.fill(0.0);
        p.result_attention.proj.fill(0.0);
        // β one-hot on channel 2 through the own-weight column with β_0 uniform is impossible,
        // so force it via the pooled-context columns with a distinctive h_2.
        let cols = AttnCols::new(&d);
        let b = random_bundle(&mut rng, &d, 4);
        let h2 = pool_h(&b, 2, Pooling::Mean).unwrap();
        for k in 0..3 {
            p.result_attention.weight.set(0, cols.ctx + k, 1e4 * h2[k]);
        }
        p.result_attention.proj.set(0, 0, 1e4);
        let trace = forward_episode(&p, &b, None).unwrap();
        let st = &trace.states[0];
        if st.beta[2] == 1.0 {
            for &(t, s) in &trace.scores[0] {
                let oracle = p.w.bilinear(b.candidate(t, 2), &st.c).unwrap();
                assert!((s - oracle).abs() < 1e-12);
            }
        } else {
            panic!("β not one-hot: {:?}", st.beta);
        }
    }
}
