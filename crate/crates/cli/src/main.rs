//! `attrank`: generate episode datasets, train and apply the ranking network, evaluate
//! rankings, and run the OASIS baseline.
//!
//! Exit codes: 0 success, 2 usage or invalid argument, 3 unreadable or insufficient
//! data, 4 numeric failure (divergence, non-finite values, failed gradient check).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attrank::container::{Container, DType};
use attrank::infer::DEFAULT_BEAM_WIDTH;
use attrank::metrics::{format_table, LabelView, MetricReport};
use attrank::model::{canonical_order, hinge_margins, loss, AttRNParams, Dims, LossKind, Pooling};
use attrank::numkit::{grad_check, Rng};
use attrank::oasis::{evaluate_oasis, oasis_train, ChannelMode, OasisConfig};
use attrank::protocol::{
    build_benchmark, build_mnist_style, build_newsgroups_style, read_dataset, write_dataset, BenchmarkConfig, Dataset, ItemPool,
    Split, DATASET_FILE, EMBEDDINGS_FILE, MAX_POSITIVES,
};
use attrank::train::{format_sweep, rank_dataset, sweep_channels, train, Preset, TrainConfig};
use attrank::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else if e.is_data() || matches!(e, Error::Shape { .. }) {
            CliError::Data(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "attrank", version, about = "Attention-based listwise ranking over multiple embeddings")]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, env = "ATTRANK_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build train/validation/test episode datasets.
    Generate(GenerateArgs),
    /// Train the ranking network; writes a checkpoint and a JSON-lines log.
    Train(TrainArgs),
    /// Rank every episode of a dataset with beam search (JSON lines).
    Rank(RankArgs),
    /// MAP and NDCG of a checkpoint or of a rankings file.
    Eval(EvalArgs),
    /// Finite-difference check of the loss gradients on a random episode.
    Gradcheck(GradcheckArgs),
    /// Test error as a function of the number of embedding channels.
    Sweep(SweepArgs),
    /// Train and evaluate the OASIS bilinear baseline.
    Oasis(OasisArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Protocol {
    Benchmark,
    MnistStyle,
    CifarStyle,
    NewsgroupsStyle,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "benchmark")]
    protocol: Protocol,
    /// Output directory; each split goes to `<out>/<split>/`.
    #[arg(long)]
    out: PathBuf,
    /// JSON object overriding the protocol defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Candidates per episode.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Per-channel noise standard deviations (comma separated).
    #[arg(long, value_delimiter = ',')]
    noise: Option<Vec<f64>>,
    #[arg(long)]
    superclasses: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    validation: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Embedding container of an item pool; replaces the synthetic pool.
    #[arg(long, requires = "pool_labels")]
    pool_embeddings: Option<PathBuf>,
    /// JSON labels of the pool items.
    #[arg(long, requires = "pool_embeddings")]
    pool_labels: Option<PathBuf>,
    /// Split drawn from a file pool.
    #[arg(long, value_parser = serde_enum::<Split>, default_value = "train")]
    split: Split,
    /// Queries drawn from a file pool (all items when absent).
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long, value_parser = serde_enum::<DType>, default_value = "f32")]
    dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateConfig {
    seed: u64,
    t: usize,
    classes: usize,
    kappa: f64,
    noise: Vec<f64>,
    /// Superclass count for newsgroups-style pools; classes are split into contiguous groups.
    superclasses: usize,
    train: usize,
    validation: usize,
    test: usize,
}

impl GenerateConfig {
    fn for_protocol(protocol: Protocol) -> Self {
        let b = BenchmarkConfig::default();
        let (classes, superclasses) = match protocol {
            Protocol::NewsgroupsStyle => (20, 5),
            _ => (b.classes, 1),
        };
        GenerateConfig {
            seed: 0,
            t: b.t,
            classes,
            kappa: b.kappa,
            noise: b.noise,
            superclasses,
            train: b.train,
            validation: b.validation,
            test: b.test,
        }
    }
}

#[derive(Args)]
struct TrainOpts {
    /// Hyper-parameter preset; flags and `--config` override it.
    #[arg(long, value_parser = serde_enum::<Preset>)]
    preset: Option<Preset>,
    /// JSON object with any training-configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = serde_enum::<LossKind>)]
    loss: Option<LossKind>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Beam width for validation rankings.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = serde_enum::<Pooling>)]
    pooling: Option<Pooling>,
    #[arg(long, value_parser = serde_enum::<attrank::model::InitScheme>)]
    init: Option<attrank::model::InitScheme>,
    #[arg(long)]
    query_channels: Option<usize>,
    #[arg(long)]
    candidate_channels: Option<usize>,
    #[arg(long)]
    decoder_dim: Option<usize>,
    #[arg(long)]
    attention_dim: Option<usize>,
    /// Record per-epoch wall time in the log (breaks byte-identical logs).
    #[arg(long)]
    wall_time: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    validation: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Log path; defaults to the checkpoint path with `.log.jsonl` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    beam: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Rankings from `rank`.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    rankings: Option<PathBuf>,
    /// Rank with this checkpoint instead of reading rankings.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    beam: usize,
    /// `graded` or `at-least:K`; defaults to the dataset's target threshold.
    #[arg(long, value_parser = parse_view)]
    view: Option<LabelView>,
    /// Row label in the printed table.
    #[arg(long, default_value = "AttRN")]
    method: String,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = serde_enum::<LossKind>, default_value = "hinge")]
    loss: LossKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = serde_enum::<Pooling>, default_value = "mean")]
    pooling: Pooling,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    validation: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Channel counts; defaults to every count up to the dataset's.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// One model per seed and channel count; defaults to the training seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct OasisArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// JSON object with any OASIS configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Average the first K channels instead of using one channel.
    #[arg(long, conflicts_with = "channel")]
    average: Option<usize>,
    /// Single channel index.
    #[arg(long)]
    channel: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_view)]
    view: Option<LabelView>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Parses a flag through the type's serde names so flags and config files agree.
fn serde_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_view(s: &str) -> std::result::Result<LabelView, String> {
    if s == "graded" {
        return Ok(LabelView::Graded);
    }
    s.strip_prefix("at-least:")
        .and_then(|k| k.parse().ok())
        .map(LabelView::AtLeast)
        .ok_or_else(|| format!("expected `graded` or `at-least:K`, got `{s}`"))
}

/// What produced an artifact; embedded in every output.
#[derive(Debug, Serialize)]
struct RunManifest {
    subcommand: &'static str,
    config: Value,
    /// Input path to lowercase hex SHA-256.
    inputs: BTreeMap<String, String>,
    seed: Option<u64>,
    tool_version: &'static str,
}

impl RunManifest {
    fn new(subcommand: &'static str, config: Value, seed: Option<u64>) -> Self {
        RunManifest {
            subcommand,
            config,
            inputs: BTreeMap::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION"),
        }
    }

    fn add_file(&mut self, path: &Path) -> CliResult<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn add_dataset(&mut self, dir: &Path) -> CliResult<()> {
        self.add_file(&dir.join(DATASET_FILE))?;
        self.add_file(&dir.join(EMBEDDINGS_FILE))
    }

    fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("manifest serializes")
    }
}

fn read_json_object(path: &Path) -> CliResult<serde_json::Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Usage(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(CliError::Usage(format!("{}: {e}", path.display()))),
    }
}

/// `base` with the config file's fields laid over it.
fn layered<T: Serialize + DeserializeOwned>(base: T, config: Option<&Path>) -> CliResult<T> {
    let Some(path) = config else { return Ok(base) };
    let mut value = serde_json::to_value(&base).expect("config serializes");
    let object = value.as_object_mut().expect("config is an object");
    for (k, v) in read_json_object(path)? {
        object.insert(k, v);
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn load_dataset(dir: &Path, manifest: &mut RunManifest) -> CliResult<Dataset> {
    let ds = read_dataset(dir)?;
    manifest.add_dataset(dir)?;
    if ds.is_empty() {
        return Err(CliError::Data(format!("{}: dataset has no episodes", dir.display())));
    }
    Ok(ds)
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let mut cfg = layered(GenerateConfig::for_protocol(a.protocol), a.config.as_deref())?;
    macro_rules! flag {
        ($($f:ident),*) => { $(if let Some(v) = a.$f.clone() { cfg.$f = v; })* };
    }
    flag!(seed, t, classes, kappa, noise, superclasses, train, validation, test);
    let mut manifest = RunManifest::new("generate", json!({ "protocol": a.protocol, "generator": cfg }), Some(cfg.seed));
    if let Some(path) = &a.config {
        manifest.add_file(path)?;
    }
    let root = Rng::new(cfg.seed);
    let splits: Vec<Dataset> = match (&a.pool_embeddings, &a.pool_labels) {
        (Some(emb), Some(labels)) => {
            manifest.add_file(emb)?;
            manifest.add_file(labels)?;
            let pool = ItemPool::read(emb, labels)?;
            let mut rng = root.fork(&format!("episodes/{}", a.split));
            vec![build_split(a.protocol, &mut rng, &pool, cfg.t, a.queries, a.split)?]
        }
        _ => synthetic_splits(a.protocol, &cfg, &root)?,
    };
    for mut ds in splits {
        ds.provenance.params = json!({ "build": ds.provenance.params, "manifest": manifest.to_value() });
        let dir = a.out.join(ds.split.to_string());
        write_dataset(&dir, &ds, a.dtype)?;
        eprintln!("{}: {} episodes", dir.display(), ds.len());
    }
    Ok(())
}

fn build_split(protocol: Protocol, rng: &mut Rng, pool: &ItemPool, t: usize, queries: Option<usize>, split: Split) -> CliResult<Dataset> {
    let mut ds = match protocol {
        Protocol::NewsgroupsStyle => build_newsgroups_style(rng, pool, t, queries, split)?,
        _ => build_mnist_style(rng, pool, t, queries, split)?,
    };
    ds.provenance.protocol = serde_json::to_value(protocol).expect("protocol serializes").as_str().unwrap().to_string();
    Ok(ds)
}

fn synthetic_splits(protocol: Protocol, cfg: &GenerateConfig, root: &Rng) -> CliResult<Vec<Dataset>> {
    if protocol == Protocol::Benchmark {
        let b = BenchmarkConfig {
            classes: cfg.classes,
            kappa: cfg.kappa,
            noise: cfg.noise.clone(),
            train: cfg.train,
            validation: cfg.validation,
            test: cfg.test,
            t: cfg.t,
        };
        let s = build_benchmark(cfg.seed, &b)?;
        return Ok(vec![s.train, s.validation, s.test]);
    }
    if cfg.superclasses == 0 || cfg.superclasses > cfg.classes {
        return Err(CliError::Usage(format!("superclasses must be in 1..={}", cfg.classes)));
    }
    let superclass_of: Vec<usize> = (0..cfg.classes).map(|c| c * cfg.superclasses / cfg.classes).collect();
    let groups = (protocol == Protocol::NewsgroupsStyle).then_some(superclass_of.as_slice());
    [(Split::Train, cfg.train), (Split::Validation, cfg.validation), (Split::Test, cfg.test)]
        .into_iter()
        .map(|(split, queries)| {
            let per_class = queries.div_ceil(cfg.classes).max(MAX_POSITIVES + 1).max(cfg.t);
            let mut pool_rng = root.fork(&format!("pool/{split}"));
            let pool = ItemPool::synthetic(&mut pool_rng, cfg.classes, per_class, cfg.kappa, &cfg.noise, groups)?;
            let mut rng = root.fork(&format!("episodes/{split}"));
            let mut ds = build_split(protocol, &mut rng, &pool, cfg.t, Some(queries), split)?;
            ds.provenance.seed = cfg.seed;
            Ok(ds)
        })
        .collect()
}

fn resolve_train_config(o: &TrainOpts) -> CliResult<TrainConfig> {
    let mut cfg = layered(TrainConfig::preset(o.preset.unwrap_or(Preset::Mnist)), o.config.as_deref())?;
    if let Some(v) = o.loss {
        cfg.loss = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.beam {
        cfg.beam_width = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.pooling {
        cfg.pooling = v;
    }
    if let Some(v) = o.init {
        cfg.init = v;
    }
    if o.query_channels.is_some() {
        cfg.query_channels = o.query_channels;
    }
    if o.candidate_channels.is_some() {
        cfg.candidate_channels = o.candidate_channels;
    }
    if let Some(v) = o.decoder_dim {
        cfg.decoder_dim = v;
    }
    if let Some(v) = o.attention_dim {
        cfg.attention_dim = v;
    }
    cfg.record_wall_time |= o.wall_time;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let cfg = resolve_train_config(&a.opts)?;
    let mut manifest = RunManifest::new("train", serde_json::to_value(&cfg).unwrap(), Some(cfg.seed));
    if let Some(path) = &a.opts.config {
        manifest.add_file(path)?;
    }
    let train_set = cfg.select(&load_dataset(&a.train, &mut manifest)?)?;
    let validation = cfg.select(&load_dataset(&a.validation, &mut manifest)?)?;
    let out = train(&cfg, &train_set, &validation, cfg.init_for(&train_set)?)?;
    let checkpoint = out.params.to_container(json!({
        "manifest": manifest.to_value(),
        "best_epoch": out.log.best_epoch,
        "target_threshold": train_set.target_threshold,
    }));
    checkpoint.write(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", a.out.display())));
    let mut log = serde_json::to_string(&json!({ "manifest": manifest.to_value() })).unwrap();
    log.push('\n');
    log.push_str(&out.log.to_jsonl());
    write_file(&log_path, log.as_bytes())?;
    let best = &out.log.epochs[out.log.best_epoch - 1];
    println!(
        "best epoch {} of {}: validation MAP {:.4} (error {:.2}%)",
        out.log.best_epoch,
        out.log.epochs.len(),
        best.validation_map,
        100.0 * (1.0 - best.validation_map)
    );
    Ok(())
}

fn load_checkpoint(path: &Path, manifest: &mut RunManifest) -> CliResult<AttRNParams> {
    let c = Container::read(path)?;
    manifest.add_file(path)?;
    Ok(AttRNParams::from_container(&c)?)
}

/// The dataset restricted to the channels a checkpoint was trained on.
fn matching_channels(ds: Dataset, p: &AttRNParams) -> CliResult<Dataset> {
    let b = &ds.episodes[0].bundle;
    if (b.query_channels(), b.candidate_channels()) == (p.dims.query_channels, p.dims.candidate_channels) {
        return Ok(ds);
    }
    Ok(ds.select_channels(p.dims.query_channels, p.dims.candidate_channels)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct RankRecord {
    id: String,
    query_id: usize,
    /// Candidate positions within the episode, best first.
    order: Vec<usize>,
    candidate_ids: Vec<usize>,
    log_likelihood: f64,
}

fn cmd_rank(a: RankArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("rank", json!({ "beam": a.beam }), None);
    let p = load_checkpoint(&a.checkpoint, &mut manifest)?;
    let ds = matching_channels(load_dataset(&a.data, &mut manifest)?, &p)?;
    let rankings = rank_dataset(&p, &ds, a.beam)?;
    let mut out = serde_json::to_string(&json!({ "manifest": manifest.to_value() })).unwrap() + "\n";
    for (e, r) in ds.episodes.iter().zip(rankings) {
        let record = RankRecord {
            id: e.id.clone(),
            query_id: e.query_id,
            candidate_ids: r.order.iter().map(|&t| e.candidate_ids[t]).collect(),
            order: r.order,
            log_likelihood: r.log_likelihood,
        };
        out.push_str(&serde_json::to_string(&record).unwrap());
        out.push('\n');
    }
    match &a.out {
        Some(path) => write_file(path, out.as_bytes()),
        None => std::io::stdout()
            .write_all(out.as_bytes())
            .map_err(|e| CliError::Data(format!("standard output: {e}"))),
    }
}

fn read_rankings(path: &Path) -> CliResult<BTreeMap<String, Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let value: Value = serde_json::from_str(line).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if value.get("manifest").is_some() {
            continue;
        }
        let r: RankRecord = serde_json::from_value(value).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.insert(r.id, r.order);
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("eval", json!({ "beam": a.beam, "view": a.view, "method": a.method }), None);
    let mut ds = load_dataset(&a.data, &mut manifest)?;
    let view = a.view.unwrap_or(LabelView::AtLeast(ds.target_threshold));
    let orders: Vec<Vec<usize>> = if let Some(path) = &a.checkpoint {
        let p = load_checkpoint(path, &mut manifest)?;
        ds = matching_channels(ds, &p)?;
        rank_dataset(&p, &ds, a.beam)?.into_iter().map(|r| r.order).collect()
    } else {
        let path = a.rankings.as_ref().expect("clap requires rankings or checkpoint");
        manifest.add_file(path)?;
        let mut by_id = read_rankings(path)?;
        ds.episodes
            .iter()
            .map(|e| by_id.remove(&e.id).ok_or_else(|| CliError::Data(format!("no ranking for episode {}", e.id))))
            .collect::<CliResult<_>>()?
    };
    let mut ranked = Vec::with_capacity(orders.len());
    for (e, order) in ds.episodes.iter().zip(&orders) {
        let mut seen = vec![false; e.len()];
        if order.len() != e.len() || order.iter().any(|&t| t >= e.len() || std::mem::replace(&mut seen[t], true)) {
            return Err(CliError::Data(format!("ranking of episode {} is not a permutation of 0..{}", e.id, e.len())));
        }
        ranked.push(order.iter().map(|&t| e.labels[t]).collect::<Vec<u8>>());
    }
    let report = MetricReport::from_rankings(ranked.iter().map(Vec::as_slice), view)?;
    print!("{}", format_table(&[(a.method.clone(), &report)]));
    if let Some(path) = &a.out {
        write_json(path, &json!({ "manifest": manifest.to_value(), "method": a.method, "report": report.to_json() }))?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let dims = Dims {
        query_channels: 3,
        candidate_channels: 2,
        query_dim: 4,
        candidate_dim: 3,
        decoder_dim: 5,
        attention_dim: 3,
    };
    let t = 5;
    let mut rng = Rng::new(a.seed).fork("gradcheck");
    let (p, b, rel) = loop {
        let mut p = AttRNParams::zeros(dims, a.pooling);
        let flat: Vec<f64> = (0..p.num_parameters()).map(|_| rng.uniform(-0.8, 0.8)).collect();
        p.set_flat(&flat)?;
        let query = (0..dims.query_channels).map(|_| (0..dims.query_dim).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let candidates = (0..t)
            .map(|_| {
                (0..dims.candidate_channels)
                    .map(|_| (0..dims.candidate_dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
                    .collect()
            })
            .collect();
        let b = attrank::embed::EmbeddingBundle::new(query, candidates)?;
        let rel: Vec<u8> = (0..t).map(|_| rng.below(3) as u8).collect();
        // Hinge is not differentiable at a margin of exactly 1.
        if a.loss == LossKind::Hinge {
            let margins = hinge_margins(&p, &b, &canonical_order(&rel), &rel)?;
            if margins.is_empty() || margins.iter().any(|m| (m - 1.0).abs() < 1e-6) {
                continue;
            }
        }
        break (p, b, rel);
    };
    let order = canonical_order(&rel);
    let analytic = loss(a.loss, &p, &b, &order, &rel)?.grads.to_flat();
    let mut probe = p.clone();
    let err = grad_check(
        |x| {
            probe.set_flat(x).expect("same parameter count");
            loss(a.loss, &probe, &b, &order, &rel).map_or(f64::NAN, |l| l.loss)
        },
        &p.to_flat(),
        &analytic,
        1e-5,
    )?;
    println!("max relative error: {err:.3e} over {} parameters", analytic.len());
    if err < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {err:.3e} >= {GRADCHECK_TOLERANCE:e}")))
    }
}

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    let cfg = resolve_train_config(&a.opts)?;
    let mut manifest = RunManifest::new("sweep", serde_json::to_value(&cfg).unwrap(), Some(cfg.seed));
    if let Some(path) = &a.opts.config {
        manifest.add_file(path)?;
    }
    let train_set = load_dataset(&a.train, &mut manifest)?;
    let validation = load_dataset(&a.validation, &mut manifest)?;
    let test = load_dataset(&a.test, &mut manifest)?;
    let b = &train_set.episodes[0].bundle;
    let available = b.query_channels().min(b.candidate_channels());
    let channels = a.channels.unwrap_or_else(|| (1..=available).collect());
    let seeds = a.seeds.unwrap_or_else(|| vec![cfg.seed]);
    manifest.config = json!({ "train": manifest.config, "channels": channels, "seeds": seeds });
    let rows = sweep_channels(&cfg, &train_set, &validation, &test, &channels, &seeds)?;
    print!("{}", format_sweep(&rows));
    if let Some(path) = &a.out {
        write_json(path, &json!({ "manifest": manifest.to_value(), "rows": rows }))?;
    }
    Ok(())
}

fn cmd_oasis(a: OasisArgs) -> CliResult<()> {
    let mut cfg = layered(OasisConfig::default(), a.config.as_deref())?;
    if let Some(k) = a.average {
        cfg.mode = ChannelMode::Averaged(k);
    }
    if let Some(k) = a.channel {
        cfg.mode = ChannelMode::Single(k);
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let mut manifest = RunManifest::new("oasis", serde_json::to_value(&cfg).unwrap(), Some(cfg.seed));
    if let Some(path) = &a.config {
        manifest.add_file(path)?;
    }
    let train_set = load_dataset(&a.train, &mut manifest)?;
    let test = load_dataset(&a.test, &mut manifest)?;
    let view = a.view.unwrap_or(LabelView::AtLeast(test.target_threshold));
    let model = oasis_train(&train_set, &cfg)?;
    let report = evaluate_oasis(&model, &test, view)?;
    let label = cfg.mode.label();
    print!("{}", format_table(&[(label.clone(), &report)]));
    if let Some(path) = &a.out {
        model.to_container(json!({ "manifest": manifest.to_value() })).write(path)?;
    }
    if let Some(path) = &a.report {
        write_json(path, &json!({ "manifest": manifest.to_value(), "method": label, "report": report.to_json() }))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Rank(a) => cmd_rank(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Oasis(a) => cmd_oasis(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("exit {}", e.code());
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
