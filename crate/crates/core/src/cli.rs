//! `sgr` command-line interface.
//!
//! Values resolve as flag > environment (`SG_*`) > `--config` TOML file >
//! built-in default. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

use crate::dataset::Dataset;
use crate::extract::{extract_llm, HttpLlmClient, Lexicon, LlmConfig, PromptTemplate, RuleExtractor};
use crate::graph::{filter_edges, parse_scene_graph, DEFAULT_EDGE_THRESHOLD};
use crate::nn::checkpoint::{load_model, save_model};
use crate::nn::{JointModel, ModelConfig, Neighborhood};
use crate::retrieval::{
    bench, eval_recall, precompute_store, write_recall_csv, CandidatePool, EmbeddingStore, MatchMode, ModelScorer,
    Retriever,
};
use crate::synth::{generate_dataset, SynthConfig, SynthVocab};
use crate::train::{train, CheckpointSink, DirectoryCheckpoints, LossMode, NoCheckpoints, TrainConfig, TrainError};
use crate::vectors::{featurize, load_word_vectors, WordVectorTable, DEFAULT_DIM, DEFAULT_FALLBACK_SEED};

#[derive(Debug, Parser)]
#[command(name = "sgr", version, about = "Language-based 3D scene retrieval over semantic scene graphs")]
struct Cli {
    /// TOML file supplying defaults for flags (lowest precedence).
    #[arg(long, global = true, env = "SG_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (scene graphs, text-graphs, manifest).
    Synth(SynthArgs),
    /// Parse, edge-filter and featurize scene-graph JSON files.
    Ingest(IngestArgs),
    /// Turn a description into a text-graph.
    Extract(ExtractArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Precompute scene embeddings against a fixed text-graph.
    Embed(EmbedArgs),
    /// Rank the manifest's scenes for one description.
    Query(QueryArgs),
    /// Top-k recall tables as CSV.
    Eval(EvalArgs),
    /// Query latency and store size.
    Bench(BenchArgs),
}

#[derive(Debug, Args, Clone)]
struct VectorArgs {
    /// word2vec text-format vectors (without it every word uses the seeded fallback).
    #[arg(long, env = "SG_VECTORS")]
    vectors: Option<PathBuf>,
    /// Edge-filter threshold in meters [default: 1.5].
    #[arg(long, env = "SG_TAU")]
    tau: Option<f64>,
}

#[derive(Debug, Args, Clone)]
struct LlmArgs {
    /// Use the LLM extractor instead of the rule-based one.
    #[arg(long)]
    llm: bool,
    /// OpenAI-compatible base URL; the key is read from SG_LLM_API_KEY.
    #[arg(long, env = "SG_LLM_ENDPOINT")]
    llm_endpoint: Option<String>,
    #[arg(long, env = "SG_LLM_MODEL")]
    llm_model: Option<String>,
    /// Prompt template file (sections `[system]` and `[user]`).
    #[arg(long)]
    prompt: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    scenes: usize,
    #[arg(long, default_value_t = 4)]
    descriptions: usize,
    #[arg(long, default_value_t = 5)]
    min_objects: usize,
    #[arg(long, default_value_t = 9)]
    max_objects: usize,
    #[arg(long, default_value_t = 3)]
    min_subgraph: usize,
    #[arg(long, default_value_t = 5)]
    max_subgraph: usize,
    /// JSON vocabulary {labels, colors, materials, relations}.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, env = "SG_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Scene-graph JSON files or directories of them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    vec: VectorArgs,
    /// Write the filtered graphs here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Description text.
    #[arg(long, conflicts_with = "input")]
    text: Option<String>,
    /// File holding the description.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Use the rule-based extractor (the default).
    #[arg(long, conflicts_with = "llm")]
    rules: bool,
    #[command(flatten)]
    llm: LlmArgs,
    #[arg(long, default_value = "query")]
    id: String,
    #[arg(long)]
    relations: Option<PathBuf>,
    #[arg(long)]
    attributes: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, env = "SG_MANIFEST")]
    manifest: Option<PathBuf>,
    /// Output model path.
    #[arg(long, env = "SG_MODEL")]
    model: Option<PathBuf>,
    #[command(flatten)]
    vec: VectorArgs,
    /// Feature dimension when no vectors file is given [default: 300].
    #[arg(long)]
    dim: Option<usize>,
    /// [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// both | cos-sim | match-prob | info-nce [default: both]
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossMode>,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    /// Attend over in- and out-neighbors.
    #[arg(long)]
    symmetric: bool,
    #[arg(long, env = "SG_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Per-step loss curve CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long, env = "SG_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, env = "SG_MANIFEST")]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    vec: VectorArgs,
    /// Output store path.
    #[arg(long, env = "SG_STORE")]
    store: Option<PathBuf>,
    /// Text-graph id to pair every scene with [default: drawn with --seed].
    #[arg(long)]
    fixed_text: Option<String>,
    #[arg(long, env = "SG_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long, env = "SG_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, env = "SG_MANIFEST")]
    manifest: Option<PathBuf>,
    #[arg(long, env = "SG_STORE")]
    store: Option<PathBuf>,
    #[command(flatten)]
    vec: VectorArgs,
    /// match-prob | cos-sim | ret-based [default: ret-based]
    #[arg(long, env = "SG_MODE")]
    mode: Option<MatchMode>,
    /// Description text.
    #[arg(long, conflicts_with = "text_graph")]
    text: Option<String>,
    /// Text-graph JSON instead of a description.
    #[arg(long)]
    text_graph: Option<PathBuf>,
    #[command(flatten)]
    llm: LlmArgs,
    /// Number of results [default: all scenes].
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, env = "SG_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, env = "SG_MANIFEST")]
    manifest: Option<PathBuf>,
    /// Precomputed store for ret-based rows [default: built in memory].
    #[arg(long, env = "SG_STORE")]
    store: Option<PathBuf>,
    #[command(flatten)]
    vec: VectorArgs,
    /// Comma-separated modes [default: match-prob,cos-sim,ret-based].
    #[arg(long, env = "SG_MODE", value_delimiter = ',')]
    mode: Option<Vec<MatchMode>>,
    /// Comma-separated k values [default: 1,2,3,5].
    #[arg(long, env = "SG_K", value_delimiter = ',', value_parser = parse_k)]
    k: Option<Vec<usize>>,
    /// ten | all
    #[arg(long, default_value = "ten", value_parser = parse_pool)]
    pool: CandidatePool,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long)]
    fixed_text: Option<String>,
    #[arg(long, env = "SG_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, env = "SG_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, env = "SG_STORE")]
    store: Option<PathBuf>,
    #[arg(long, env = "SG_MANIFEST")]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    vec: VectorArgs,
    /// Number of manifest descriptions to time.
    #[arg(long, default_value_t = 50)]
    queries: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, env = "SG_SEED")]
    seed: Option<u64>,
}

/// Keys accepted in the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    vectors: Option<PathBuf>,
    model: Option<PathBuf>,
    store: Option<PathBuf>,
    manifest: Option<PathBuf>,
    tau: Option<f64>,
    seed: Option<u64>,
    mode: Option<String>,
    k: Option<Vec<usize>>,
    llm_endpoint: Option<String>,
    llm_model: Option<String>,
    dim: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    loss: Option<String>,
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_loss(s: &str) -> Result<LossMode, String> {
    match s {
        "both" => Ok(LossMode::Both),
        "cos-sim" => Ok(LossMode::CosSim),
        "match-prob" => Ok(LossMode::MatchProb),
        "info-nce" => Ok(LossMode::InfoNce),
        _ => Err(format!("unknown loss {s:?} (expected both, cos-sim, match-prob or info-nce)")),
    }
}

fn parse_modes(s: &str) -> Result<Vec<MatchMode>, String> {
    s.split(',').map(|m| m.trim().parse()).collect()
}

fn parse_k(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(0) => Err("k must be positive".into()),
        Ok(k) => Ok(k),
        Err(e) => Err(format!("{s:?}: {e}")),
    }
}

fn parse_pool(s: &str) -> Result<CandidatePool, String> {
    match s {
        "ten" => Ok(CandidatePool::TenCandidates),
        "all" => Ok(CandidatePool::AllScenes),
        _ => Err(format!("unknown pool {s:?} (expected ten or all)")),
    }
}

fn load_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("--config: {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("--config: {}: {e}", path.display())))
}

/// A path flag that must be given and must exist.
fn existing(flag: &str, given: Option<PathBuf>, file: &Option<PathBuf>) -> CliResult<PathBuf> {
    let path = given.or_else(|| file.clone()).ok_or_else(|| usage(format!("missing required flag --{flag}")))?;
    if !path.exists() {
        return Err(usage(format!("--{flag}: {} does not exist", path.display())));
    }
    Ok(path)
}

/// An optional input path; if given it must exist.
fn optional_existing(flag: &str, given: Option<PathBuf>, file: &Option<PathBuf>) -> CliResult<Option<PathBuf>> {
    match given.or_else(|| file.clone()) {
        Some(p) if !p.exists() => Err(usage(format!("--{flag}: {} does not exist", p.display()))),
        other => Ok(other),
    }
}

/// An output path flag that must be given.
fn output(flag: &str, given: Option<PathBuf>, file: &Option<PathBuf>) -> CliResult<PathBuf> {
    given.or_else(|| file.clone()).ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

fn tau_of(v: &VectorArgs, file: &FileConfig) -> CliResult<f64> {
    let tau = v.tau.or(file.tau).unwrap_or(DEFAULT_EDGE_THRESHOLD);
    if tau.is_nan() || tau < 0.0 {
        return Err(usage(format!("--tau must be a non-negative number, got {tau}")));
    }
    Ok(tau)
}

fn load_table(vectors: Option<&Path>, dim: usize) -> CliResult<WordVectorTable> {
    match vectors {
        Some(p) => Ok(load_word_vectors(p).with_context(|| format!("loading {}", p.display()))?),
        None => Ok(WordVectorTable::empty(dim, DEFAULT_FALLBACK_SEED)),
    }
}

/// Model, vector table and dataset for the commands that evaluate a model.
fn load_model_and_data(
    model: Option<PathBuf>,
    manifest: Option<PathBuf>,
    vec: &VectorArgs,
    file: &FileConfig,
) -> CliResult<(JointModel, WordVectorTable, Dataset)> {
    let model_path = existing("model", model, &file.model)?;
    let manifest = existing("manifest", manifest, &file.manifest)?;
    let vectors = optional_existing("vectors", vec.vectors.clone(), &file.vectors)?;
    let tau = tau_of(vec, file)?;
    let model = load_model(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let table = load_table(vectors.as_deref(), model.dim())?;
    if table.dim() != model.dim() {
        return Err(anyhow::anyhow!("vectors have dim {}, model expects {}", table.dim(), model.dim()).into());
    }
    let dataset = Dataset::load(&manifest, &table, tau).with_context(|| format!("loading {}", manifest.display()))?;
    Ok((model, table, dataset))
}

fn seed_of(flag: Option<u64>, file: &FileConfig) -> u64 {
    flag.or(file.seed).unwrap_or(0)
}

fn fixed_text_index(dataset: &Dataset, requested: Option<&str>, seed: u64) -> CliResult<usize> {
    if dataset.texts.is_empty() {
        return Err(anyhow::anyhow!("manifest has no descriptions").into());
    }
    match requested {
        Some(id) => dataset.text_index(id).ok_or_else(|| usage(format!("--fixed-text: no description with id {id:?}"))),
        None => Ok(ChaCha8Rng::seed_from_u64(seed).random_range(0..dataset.texts.len())),
    }
}

/// Scene index the store's fixed text describes.
fn fixed_scene_for(dataset: &Dataset, store: &EmbeddingStore) -> CliResult<usize> {
    dataset
        .text_index(store.fixed_id())
        .map(|i| dataset.texts[i].scene_index)
        .ok_or_else(|| anyhow::anyhow!("store's fixed text {:?} is not in the manifest", store.fixed_id()).into())
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> CliResult {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn print_json(v: &serde_json::Value) -> CliResult {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_output(None, s.as_bytes())
}

fn cmd_synth(a: SynthArgs, file: &FileConfig) -> CliResult {
    let out = output("out", a.out, &None)?;
    let vocab = match a.vocab {
        Some(p) if !p.exists() => return Err(usage(format!("--vocab: {} does not exist", p.display()))),
        Some(p) => SynthVocab::load(&p)?,
        None => SynthVocab::default(),
    };
    let cfg = SynthConfig {
        num_scenes: a.scenes,
        objects_per_scene: (a.min_objects, a.max_objects),
        descriptions_per_scene: a.descriptions,
        subgraph_size: (a.min_subgraph, a.max_subgraph),
        vocab,
        seed: seed_of(a.seed, file),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = generate_dataset(&cfg, &out)?;
    print_json(&json!({
        "manifest": out.join("manifest.json"),
        "scenes": manifest.len(),
        "texts": manifest.iter().map(|e| e.text_graph_paths.len()).sum::<usize>(),
    }))
}

fn cmd_ingest(a: IngestArgs, file: &FileConfig) -> CliResult {
    let tau = tau_of(&a.vec, file)?;
    let vectors = optional_existing("vectors", a.vec.vectors.clone(), &file.vectors)?;
    let mut inputs = Vec::new();
    for p in &a.inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            inputs.extend(found);
        } else if p.exists() {
            inputs.push(p.clone());
        } else {
            return Err(usage(format!("input {} does not exist", p.display())));
        }
    }
    let table = load_table(vectors.as_deref(), DEFAULT_DIM)?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
    }
    let mut summary = Vec::new();
    for path in inputs {
        let g = parse_scene_graph(&fs::read(&path)?).with_context(|| format!("parsing {}", path.display()))?;
        let filtered = filter_edges(&g, tau)?;
        let f = featurize(&table, &filtered.graph);
        if !f.is_finite() {
            return Err(anyhow::anyhow!("{}: non-finite features", path.display()).into());
        }
        if let Some(out) = &a.out {
            fs::write(out.join(format!("{}.json", g.graph_id)), filtered.graph.to_json())?;
        }
        summary.push(json!({
            "id": g.graph_id,
            "path": path,
            "nodes": g.nodes.len(),
            "edges": g.edges.len(),
            "edges_kept": filtered.graph.edges.len(),
            "dropped_without_bbox": filtered.dropped_without_bbox,
            "dim": f.dim(),
        }));
    }
    print_json(&json!(summary))
}

fn description_of(text: Option<String>, input: Option<PathBuf>) -> CliResult<String> {
    match (text, input) {
        (Some(t), _) => Ok(t),
        (None, Some(p)) if !p.exists() => Err(usage(format!("--input: {} does not exist", p.display()))),
        (None, Some(p)) => Ok(fs::read_to_string(p)?),
        (None, None) => Err(usage("missing required flag --text (or --input)")),
    }
}

fn extract_graph(
    id: &str,
    description: &str,
    llm: &LlmArgs,
    lexicon: Option<(PathBuf, PathBuf)>,
    file: &FileConfig,
) -> CliResult<crate::extract::ExtractionResult> {
    if llm.llm {
        let endpoint = llm
            .llm_endpoint
            .clone()
            .or_else(|| file.llm_endpoint.clone())
            .ok_or_else(|| usage("--llm needs --llm-endpoint"))?;
        let mut cfg = LlmConfig { base_url: endpoint, ..LlmConfig::default() };
        if let Some(m) = llm.llm_model.clone().or_else(|| file.llm_model.clone()) {
            cfg.model = m;
        }
        let template = match &llm.prompt {
            Some(p) if !p.exists() => return Err(usage(format!("--prompt: {} does not exist", p.display()))),
            Some(p) => PromptTemplate::parse(&fs::read_to_string(p)?).map_err(|e| usage(format!("--prompt: {e}")))?,
            None => PromptTemplate::default(),
        };
        Ok(extract_llm(&HttpLlmClient::new(cfg), &template, id, description)?)
    } else {
        let extractor = match lexicon {
            Some((r, a)) => RuleExtractor::new(Lexicon::load(r, a)?),
            None => RuleExtractor::default(),
        };
        Ok(extractor.extract_with_id(id, description)?)
    }
}

fn cmd_extract(a: ExtractArgs, file: &FileConfig) -> CliResult {
    let description = description_of(a.text, a.input)?;
    let lexicon = match (a.relations, a.attributes) {
        (None, None) => None,
        (r, at) => {
            let r = existing("relations", r, &None)?;
            let at = existing("attributes", at, &None)?;
            Some((r, at))
        }
    };
    let result = extract_graph(&a.id, &description, &a.llm, lexicon, file)?;
    let mut s = result.graph.to_json();
    s.push('\n');
    write_output(a.out.as_deref(), s.as_bytes())
}

fn cmd_train(a: TrainArgs, file: &FileConfig) -> CliResult {
    let manifest = existing("manifest", a.manifest, &file.manifest)?;
    let model_out = output("model", a.model, &file.model)?;
    let vectors = optional_existing("vectors", a.vec.vectors.clone(), &file.vectors)?;
    let tau = tau_of(&a.vec, file)?;
    let seed = seed_of(a.seed, file);
    let loss = match (a.loss, &file.loss) {
        (Some(l), _) => l,
        (None, Some(s)) => parse_loss(s).map_err(|e| usage(format!("--config loss: {e}")))?,
        (None, None) => LossMode::Both,
    };
    let cfg = TrainConfig {
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(8),
        epochs: a.epochs.or(file.epochs).unwrap_or(30),
        learning_rate: a.learning_rate.or(file.learning_rate).unwrap_or(1e-3),
        loss_mode: loss,
        seed,
        checkpoint_every: a.checkpoint_every,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let model_cfg = ModelConfig {
        dim: 0,
        num_blocks: a.blocks,
        mlp_hidden: a.hidden,
        seed,
        neighborhood: if a.symmetric { Neighborhood::Symmetric } else { Neighborhood::InNeighbors },
    };
    let table = load_table(vectors.as_deref(), a.dim.or(file.dim).unwrap_or(DEFAULT_DIM))?;
    let model_cfg = ModelConfig { dim: table.dim(), ..model_cfg };
    model_cfg.validate().map_err(usage)?;
    let dataset = Dataset::load(&manifest, &table, tau).with_context(|| format!("loading {}", manifest.display()))?;
    let mut model = JointModel::new(model_cfg);
    let mut sink: Box<dyn CheckpointSink> = match a.checkpoint_dir {
        Some(dir) => Box::new(DirectoryCheckpoints { dir }),
        None => Box::new(NoCheckpoints),
    };
    let report = match train(&mut model, &dataset, &cfg, sink.as_mut()) {
        Ok(r) => r,
        Err(TrainError::DivergedLoss { step, last_good }) => {
            save_model(&last_good, &model_out)?;
            return Err(anyhow::anyhow!(
                "loss diverged at step {step}; last good model written to {}",
                model_out.display()
            )
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    save_model(&model, &model_out)?;
    if let Some(p) = a.loss_csv {
        let mut f = std::io::BufWriter::new(fs::File::create(&p)?);
        report.write_csv(&mut f)?;
        f.flush()?;
    }
    let means = report.epoch_means();
    print_json(&json!({
        "model": model_out,
        "steps": report.steps.len(),
        "epoch_mean_loss": means,
    }))
}

fn cmd_embed(a: EmbedArgs, file: &FileConfig) -> CliResult {
    let store_out = output("store", a.store, &file.store)?;
    let (model, _, dataset) = load_model_and_data(a.model, a.manifest, &a.vec, file)?;
    let fixed = fixed_text_index(&dataset, a.fixed_text.as_deref(), seed_of(a.seed, file))?;
    let store = precompute_store(&model, &dataset.scenes, &dataset.texts[fixed].graph)?;
    store.save(&store_out)?;
    print_json(&json!({
        "store": store_out,
        "fixed_text": store.fixed_id(),
        "scenes": store.len(),
        "bytes": store.encoded_len(),
    }))
}

fn cmd_query(a: QueryArgs, file: &FileConfig) -> CliResult {
    let mode = match (a.mode, &file.mode) {
        (Some(m), _) => m,
        (None, Some(s)) => s.parse().map_err(|e: String| usage(format!("--config mode: {e}")))?,
        (None, None) => MatchMode::RetBased(String::new()),
    };
    let store_path = match mode {
        MatchMode::RetBased(_) => Some(existing("store", a.store, &file.store)?),
        _ => optional_existing("store", a.store, &file.store)?,
    };
    if a.text.is_none() && a.text_graph.is_none() {
        return Err(usage("missing required flag --text (or --text-graph)"));
    }
    let text_graph_path = optional_existing("text-graph", a.text_graph, &None)?;
    let (model, table, dataset) = load_model_and_data(a.model, a.manifest, &a.vec, file)?;
    let graph = match (a.text, text_graph_path) {
        (Some(t), _) => extract_graph("query", &t, &a.llm, None, file)?.graph,
        (None, Some(p)) => crate::extract::parse_text_graph(&fs::read(&p)?).with_context(|| format!("parsing {}", p.display()))?,
        (None, None) => unreachable!(),
    };
    let query = featurize(&table, &graph);
    let mut retriever = Retriever::new(&model, &dataset.scenes)?;
    let mut mode = mode;
    if let MatchMode::RetBased(id) = &mut mode {
        let store = EmbeddingStore::load(store_path.as_ref().unwrap())?;
        if id.is_empty() {
            *id = store.fixed_id().to_string();
        }
        let fixed_scene = fixed_scene_for(&dataset, &store)?;
        retriever = retriever.with_store(&store, &dataset.scenes[fixed_scene])?;
    }
    let ids: Vec<&str> = retriever.ids().iter().map(String::as_str).collect();
    let k = a.k.unwrap_or(ids.len()).min(ids.len());
    if k == 0 {
        return Err(usage("--k must be positive"));
    }
    let result = retriever.retrieve(&query, &ids, &mode, k)?;
    print_json(&json!({
        "query_id": result.query_id,
        "mode": result.mode.name(),
        "text_graph": serde_json::from_str::<serde_json::Value>(&graph.to_json())?,
        "ranked": result.ranked.iter().map(|(id, s)| json!({"scene_id": id, "score": s})).collect::<Vec<_>>(),
    }))
}

fn cmd_eval(a: EvalArgs, file: &FileConfig) -> CliResult {
    let modes = match (a.mode, &file.mode) {
        (Some(m), _) => m,
        (None, Some(s)) => parse_modes(s).map_err(|e| usage(format!("--config mode: {e}")))?,
        (None, None) => vec![MatchMode::MatchProb, MatchMode::CosSim, MatchMode::RetBased(String::new())],
    };
    let ks = a.k.or_else(|| file.k.clone()).unwrap_or_else(|| vec![1, 2, 3, 5]);
    if ks.is_empty() || ks.contains(&0) {
        return Err(usage("--k values must be positive"));
    }
    let store_path = optional_existing("store", a.store, &file.store)?;
    let seed = seed_of(a.seed, file);
    let (model, _, dataset) = load_model_and_data(a.model, a.manifest, &a.vec, file)?;
    let mut tables = Vec::new();
    for mode in modes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = match mode {
            MatchMode::RetBased(_) => {
                let store = match &store_path {
                    Some(p) => EmbeddingStore::load(p)?,
                    None => {
                        let fixed = fixed_text_index(&dataset, a.fixed_text.as_deref(), seed)?;
                        precompute_store(&model, &dataset.scenes, &dataset.texts[fixed].graph)?
                    }
                };
                let fixed_scene = fixed_scene_for(&dataset, &store)?;
                let mode = MatchMode::RetBased(store.fixed_id().to_string());
                let scorer = ModelScorer::new(&model, &dataset, mode, Some((&store, fixed_scene)))?;
                eval_recall(&scorer, &dataset, &ks, a.pool, a.trials, &mut rng)?
            }
            mode => eval_recall(&ModelScorer::new(&model, &dataset, mode, None)?, &dataset, &ks, a.pool, a.trials, &mut rng)?,
        };
        tables.push(table);
    }
    let mut csv = Vec::new();
    write_recall_csv(&mut csv, &tables)?;
    write_output(a.out.as_deref(), &csv)
}

fn cmd_bench(a: BenchArgs, file: &FileConfig) -> CliResult {
    let store_path = existing("store", a.store, &file.store)?;
    let (model, _, dataset) = load_model_and_data(a.model, a.manifest, &a.vec, file)?;
    let store = EmbeddingStore::load(&store_path)?;
    let fixed_scene = fixed_scene_for(&dataset, &store)?;
    let n = a.queries.min(dataset.texts.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed_of(a.seed, file));
    let queries: Vec<_> = sample(&mut rng, dataset.texts.len(), n).into_iter().map(|i| dataset.texts[i].graph.clone()).collect();
    let report = bench(&model, &store, &queries, &dataset.scenes[fixed_scene], a.repetitions)?;
    print_json(&json!({
        "median_query_seconds": report.median_query_seconds,
        "store_bytes": report.store_bytes,
        "store_file_bytes": fs::metadata(&store_path)?.len(),
        "queries": report.queries,
        "candidates": report.candidates,
        "repetitions": a.repetitions,
    }))
}

fn dispatch(cli: Cli) -> CliResult {
    let file = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a, &file),
        Command::Ingest(a) => cmd_ingest(a, &file),
        Command::Extract(a) => cmd_extract(a, &file),
        Command::Train(a) => cmd_train(a, &file),
        Command::Embed(a) => cmd_embed(a, &file),
        Command::Query(a) => cmd_query(a, &file),
        Command::Eval(a) => cmd_eval(a, &file),
        Command::Bench(a) => cmd_bench(a, &file),
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn list_flags_parse() {
        let cli = Cli::try_parse_from(["sgr", "eval", "--k", "1,3", "--mode", "cos-sim,ret-based:t0"]).unwrap();
        let Command::Eval(a) = cli.command else { panic!() };
        assert_eq!(a.k, Some(vec![1, 3]));
        assert_eq!(a.mode, Some(vec![MatchMode::CosSim, MatchMode::RetBased("t0".into())]));
        assert!(Cli::try_parse_from(["sgr", "eval", "--k", "0"]).is_err());
        assert!(Cli::try_parse_from(["sgr", "eval", "--pool", "some"]).is_err());
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 3\nk = [1, 5]\n").unwrap();
        let cfg = load_file_config(Some(&p)).ok().unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.k, Some(vec![1, 5]));
        fs::write(&p, "sed = 3\n").unwrap();
        assert!(matches!(load_file_config(Some(&p)), Err(CliError::Usage(_))));
    }
}
