//! End-to-end experiment runs: ingest → partition/segment → prompts → query
//! (live or simulated) → match → score → report.
//!
//! Runs are driven by a single [`RunConfig`] (TOML on disk). Output files are
//! fully determined by the config, the input bytes, the seed and, for live
//! runs, the replay cache contents.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ItemId, UserId};
use crate::ingest::{
    filter_min_interactions, parse_interactions, parse_titles, temporal_split, DatasetFormat, DatasetSummary,
    InteractionSet, SplitPair,
};
use crate::matcher::{build_index, match_titles, write_audit, MatchedList};
use crate::metrics::{evaluate, global_target, user_targets, DivergenceKind, MetricsConfig, RelevanceSet, TargetMode};
use crate::popularity::{
    classify_items, classify_users, compute_item_stats, ItemStats, PopularityPartition, UserSegments,
};
use crate::promptgen::{
    build_prompt, history_sample, threshold_label, PromptRecord, PromptRequest, PromptStrategy, StrategyKind,
    HISTORY_LIMIT,
};
use crate::recclient::{
    dispatch, prompt_hash, simulate_recommendations, HttpTransport, ProviderConfig, QueryJob, RawRecommendation,
    ReplayCache, Transport,
};
use crate::report::{
    cell_stem, emit_exposure, emit_table, sha256_hex, ExperimentCell, FileChecksum, RunManifest, TableFormat,
};
use crate::synth::{generate, SyntheticConfig};

/// Pipeline stage, used to name the failing step in errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Partition,
    Segment,
    Prompts,
    Query,
    Match,
    Score,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Partition => "partition",
            Stage::Segment => "segment",
            Stage::Prompts => "prompts",
            Stage::Query => "query",
            Stage::Match => "match",
            Stage::Score => "score",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
#[error("{stage} stage failed: {cause}")]
pub struct PipelineError {
    pub stage: Stage,
    pub cause: BoxError,
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn at<E: Into<BoxError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError { stage, cause: e.into() }
}

fn fail(stage: Stage, msg: impl Into<String>) -> PipelineError {
    PipelineError { stage, cause: msg.into().into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    /// Ratings file, or `-` for standard input.
    pub ratings: PathBuf,
    /// Item metadata file with titles.
    #[serde(default)]
    pub titles: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorConfig {
    #[serde(default = "default_bias")]
    pub bias_exponent: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self { bias_exponent: default_bias() }
    }
}

fn default_bias() -> f64 {
    1.0
}
fn default_min_interactions() -> usize {
    30
}
fn default_train_ratio() -> f64 {
    0.7
}
fn default_pareto() -> f64 {
    0.2
}
fn default_thresholds() -> Vec<f64> {
    vec![0.5, 0.8]
}
fn default_strategies() -> Vec<StrategyKind> {
    StrategyKind::ALL.to_vec()
}
fn default_ten() -> usize {
    10
}
fn default_alpha() -> f64 {
    0.01
}
fn default_fuzzy() -> f64 {
    0.9
}
fn default_workers() -> usize {
    4
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into(), "md".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default = "default_min_interactions")]
    pub min_interactions: usize,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    #[serde(default = "default_pareto")]
    pub pareto_fraction: f64,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default = "default_ten")]
    pub list_length: usize,
    #[serde(default = "default_ten")]
    pub k: usize,
    /// Prefix depth for the rank-miscalibration average; defaults to `k`.
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default)]
    pub divergence: Option<DivergenceKind>,
    #[serde(default = "default_alpha")]
    pub smoothing: f64,
    #[serde(default = "default_fuzzy")]
    pub fuzzy_threshold: f64,
    #[serde(default)]
    pub target: TargetMode,
    #[serde(default)]
    pub rating_floor: Option<f64>,
    /// Evaluate a seeded sample of this many users; 0 means all.
    #[serde(default)]
    pub max_users: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub simulate: bool,
    #[serde(default)]
    pub simulator: SimulatorConfig,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Replay cache location; defaults to `<out>/cache.jsonl`.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub table_formats: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(at(Stage::Config))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| fail(Stage::Config, format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn divergence(&self) -> DivergenceKind {
        self.divergence.unwrap_or(DivergenceKind::Kl)
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        MetricsConfig {
            k: self.k,
            depth: self.depth.unwrap_or(self.k),
            divergence: self.divergence(),
            alpha: self.smoothing,
        }
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.out.join("cache.jsonl"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(fail(Stage::Config, m));
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => return bad("set either [dataset] or [synthetic], not both"),
            (None, None) => return bad("no input: set [dataset] or [synthetic]"),
            _ => {}
        }
        if self.min_interactions == 0 {
            return bad("min_interactions must be at least 1");
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad("train_ratio must lie in (0, 1)");
        }
        if !(self.pareto_fraction > 0.0 && self.pareto_fraction < 1.0) {
            return bad("pareto_fraction must lie in (0, 1)");
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("thresholds must be non-empty and each lie in (0, 1)");
        }
        if self.strategies.is_empty() {
            return bad("select at least one strategy");
        }
        if self.list_length == 0 || self.k == 0 || self.depth == Some(0) {
            return bad("list_length, k and depth must be positive");
        }
        if !(self.smoothing > 0.0 && self.smoothing < 1.0) {
            return bad("smoothing must lie in (0, 1)");
        }
        if !(self.fuzzy_threshold > 0.0 && self.fuzzy_threshold <= 1.0) {
            return bad("fuzzy_threshold must lie in (0, 1]");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.simulator.bias_exponent.is_nan() || self.simulator.bias_exponent < 0.0 {
            return bad("simulator.bias_exponent must be non-negative");
        }
        for f in &self.table_formats {
            f.parse::<TableFormat>().map_err(at(Stage::Config))?;
        }
        if !self.simulate {
            self.provider.validate().map_err(at(Stage::Config))?;
        }
        Ok(())
    }

    /// Hash of every setting that can influence results. Output and cache
    /// locations are excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        canonical.cache = None;
        canonical.table_formats.clear();
        sha256_hex(&serde_json::to_vec(&canonical).expect("config serializes"))
    }

    /// Experiment cells in table order: strategies as configured, each
    /// threshold-keyed strategy once per threshold.
    pub fn cells(&self) -> Vec<PromptStrategy> {
        let mut cells = Vec::new();
        for &kind in &self.strategies {
            if kind.per_threshold() {
                cells.extend(self.thresholds.iter().map(|&t| PromptStrategy { kind, threshold: Some(t) }));
            } else {
                cells.push(PromptStrategy { kind, threshold: None });
            }
        }
        cells
    }

    pub fn provider_descriptor(&self) -> String {
        if self.simulate {
            format!("simulator(bias={})", self.simulator.bias_exponent)
        } else {
            self.provider.model.clone()
        }
    }
}

fn read_source(path: &Path) -> std::io::Result<Vec<u8>> {
    let mut bytes = Vec::new();
    if path.as_os_str() == "-" {
        std::io::stdin().read_to_end(&mut bytes)?;
    } else {
        bytes = fs::read(path)?;
    }
    Ok(bytes)
}

/// Raw interactions, titles and input checksums.
pub struct LoadedData {
    pub raw: InteractionSet,
    pub titles: BTreeMap<ItemId, String>,
    pub catalog: BTreeSet<ItemId>,
    pub checksums: Vec<FileChecksum>,
}

pub fn load_data(config: &RunConfig) -> Result<LoadedData> {
    let (raw, titles, checksums) = match (&config.dataset, &config.synthetic) {
        (Some(ds), _) => {
            let bytes = read_source(&ds.ratings)
                .map_err(|e| fail(Stage::Ingest, format!("cannot read {}: {e}", ds.ratings.display())))?;
            let mut checksums =
                vec![FileChecksum { path: ds.ratings.display().to_string(), sha256: sha256_hex(&bytes) }];
            let raw = parse_interactions(bytes.as_slice(), ds.format).map_err(at(Stage::Ingest))?;
            let titles = match &ds.titles {
                Some(path) => {
                    let bytes = read_source(path)
                        .map_err(|e| fail(Stage::Ingest, format!("cannot read {}: {e}", path.display())))?;
                    checksums.push(FileChecksum { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
                    parse_titles(bytes.as_slice(), ds.format).map_err(at(Stage::Ingest))?
                }
                None => BTreeMap::new(),
            };
            (raw, titles, checksums)
        }
        (None, Some(synth)) => {
            let data = generate(synth, config.seed);
            (data.interactions, data.titles, Vec::new())
        }
        (None, None) => return Err(fail(Stage::Ingest, "no input configured")),
    };
    // without a metadata file the catalog is whatever was rated
    let catalog = if titles.is_empty() { raw.item_ids() } else { titles.keys().copied().collect() };
    Ok(LoadedData { raw, titles, catalog, checksums })
}

/// Everything derived from the data before any prompting.
pub struct PreparedData {
    pub loaded: LoadedData,
    pub filtered: InteractionSet,
    pub split: SplitPair,
    pub stats: ItemStats,
    pub partition: PopularityPartition,
    /// One segmentation per configured threshold, in config order.
    pub segments: Vec<UserSegments>,
    /// Users that receive prompts, ascending.
    pub users: Vec<UserId>,
}

impl PreparedData {
    pub fn segments_for(&self, threshold: f64, config: &RunConfig) -> &UserSegments {
        let idx = config.thresholds.iter().position(|&t| t == threshold).unwrap_or(0);
        &self.segments[idx]
    }
}

pub fn prepare(config: &RunConfig) -> Result<PreparedData> {
    config.validate()?;
    let loaded = load_data(config)?;
    let filtered = filter_min_interactions(&loaded.raw, config.min_interactions);
    if filtered.is_empty() {
        return Err(fail(Stage::Ingest, format!("no user has at least {} interactions", config.min_interactions)));
    }
    let split = temporal_split(&filtered, config.train_ratio).map_err(at(Stage::Ingest))?;
    info!(
        "ingested {} interactions ({} users); {} after filtering; train {} / test {}",
        loaded.raw.len(),
        loaded.raw.user_count(),
        filtered.len(),
        split.train.len(),
        split.test.len()
    );

    let stats = compute_item_stats(&split.train, &loaded.catalog).map_err(at(Stage::Partition))?;
    let partition = classify_items(&stats, config.pareto_fraction).map_err(at(Stage::Partition))?;
    let segments = config
        .thresholds
        .iter()
        .map(|&t| classify_users(&split.train, &partition, t))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(at(Stage::Segment))?;

    let all: Vec<UserId> = split.train.users().collect();
    let users = if config.max_users > 0 && config.max_users < all.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut picked: Vec<UserId> =
            sample(&mut rng, all.len(), config.max_users).into_iter().map(|i| all[i]).collect();
        picked.sort();
        picked
    } else {
        all
    };
    Ok(PreparedData { loaded, filtered, split, stats, partition, segments, users })
}

/// Prompts for one experiment cell, aligned with `PreparedData::users`.
pub struct CellPrompts {
    pub strategy: PromptStrategy,
    pub requests: Vec<PromptRequest>,
    pub prompts: Vec<String>,
}

pub fn build_cell_prompts(config: &RunConfig, data: &PreparedData) -> Result<Vec<CellPrompts>> {
    let mut out = Vec::new();
    for strategy in config.cells() {
        let segments = match strategy.kind {
            StrategyKind::FairLrm => Some(data.segments_for(strategy.threshold.expect("threshold-keyed cell"), config)),
            _ => None,
        };
        let mut requests = Vec::with_capacity(data.users.len());
        let mut prompts = Vec::with_capacity(data.users.len());
        for &user in &data.users {
            let history = if strategy.kind == StrategyKind::FairLrm {
                history_sample(&data.split.train, user, &data.loaded.titles, HISTORY_LIMIT)
            } else {
                Vec::new()
            };
            let request = PromptRequest { user, strategy, history, list_length: config.list_length };
            prompts.push(build_prompt(&request, segments, &data.partition).map_err(at(Stage::Prompts))?);
            requests.push(request);
        }
        out.push(CellPrompts { strategy, requests, prompts });
    }
    Ok(out)
}

pub fn prompt_records(cells: &[CellPrompts]) -> Vec<PromptRecord> {
    cells
        .iter()
        .flat_map(|c| {
            c.requests.iter().zip(&c.prompts).map(|(r, p)| PromptRecord {
                user_id: r.user,
                strategy: r.strategy.kind,
                threshold: r.strategy.threshold,
                list_length: r.list_length,
                prompt: p.clone(),
            })
        })
        .collect()
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(at(Stage::Config))
}

/// Responses per cell plus any model names a live provider echoed back.
pub struct Responses {
    pub per_cell: Vec<Vec<RawRecommendation>>,
    pub returned_models: Vec<String>,
    pub cache_hits: usize,
    pub cache_misses: usize,
}

/// Obtain responses for every prompt. Live runs consult the replay cache
/// first and only build an HTTP transport if something is missing, so a run
/// over a warm cache needs neither network nor key. `transport` overrides
/// the HTTP client.
pub fn obtain_responses(
    config: &RunConfig,
    data: &PreparedData,
    cells: &[CellPrompts],
    transport: Option<&dyn Transport>,
) -> Result<Responses> {
    if config.simulate {
        let pool = thread_pool(config.workers)?;
        let per_cell = pool.install(|| {
            cells
                .iter()
                .map(|cell| {
                    cell.requests
                        .par_iter()
                        .map(|r| {
                            simulate_recommendations(
                                r,
                                &data.stats,
                                &data.loaded.titles,
                                config.simulator.bias_exponent,
                                config.seed,
                            )
                        })
                        .collect::<std::result::Result<Vec<_>, _>>()
                })
                .collect::<std::result::Result<Vec<_>, _>>()
        });
        return Ok(Responses {
            per_cell: per_cell.map_err(at(Stage::Query))?,
            returned_models: Vec::new(),
            cache_hits: 0,
            cache_misses: 0,
        });
    }

    let cache = ReplayCache::open(config.cache_path()).map_err(at(Stage::Query))?;
    // identical prompts (e.g. a baseline under two thresholds) are sent once
    let mut unique: Vec<QueryJob> = Vec::new();
    let mut index_of: HashMap<String, usize> = HashMap::new();
    for cell in cells {
        for (req, prompt) in cell.requests.iter().zip(&cell.prompts) {
            index_of.entry(prompt.clone()).or_insert_with(|| {
                unique.push(QueryJob {
                    user: req.user,
                    strategy: req.strategy.kind,
                    prompt: prompt.clone(),
                    list_length: req.list_length,
                });
                unique.len() - 1
            });
        }
    }
    let misses = unique.iter().filter(|j| cache.get(&prompt_hash(&config.provider.model, &j.prompt)).is_none()).count();
    let http;
    let transport: &dyn Transport = match transport {
        Some(t) => t,
        None if misses == 0 => &NoNetwork,
        None => {
            http = HttpTransport::from_config(&config.provider).map_err(at(Stage::Query))?;
            &http
        }
    };
    info!("{} unique prompts, {} cached, {} to query", unique.len(), unique.len() - misses, misses);
    let outcomes = dispatch(&unique, transport, &config.provider, &cache).map_err(at(Stage::Query))?;

    let mut texts = Vec::with_capacity(outcomes.len());
    let mut models = BTreeSet::new();
    let mut hits = 0;
    for outcome in outcomes {
        hits += usize::from(outcome.from_cache);
        models.extend(outcome.returned_model);
        texts.push(outcome.recommendation.map_err(at(Stage::Query))?.raw_response);
    }
    let per_cell = cells
        .iter()
        .map(|cell| {
            cell.requests
                .iter()
                .zip(&cell.prompts)
                .map(|(req, prompt)| RawRecommendation {
                    user: req.user,
                    strategy: req.strategy.kind,
                    titles: crate::recclient::extract_titles(&texts[index_of[prompt]], req.list_length),
                    raw_response: texts[index_of[prompt]].clone(),
                    provenance: crate::recclient::Provenance::Live,
                })
                .collect()
        })
        .collect();
    Ok(Responses { per_cell, returned_models: models.into_iter().collect(), cache_hits: hits, cache_misses: misses })
}

struct NoNetwork;

impl Transport for NoNetwork {
    fn complete(&self, _prompt: &str) -> crate::recclient::Result<crate::recclient::Completion> {
        Err(crate::recclient::ClientError::Transport("no transport available for uncached prompt".into()))
    }
}

pub fn match_responses(
    config: &RunConfig,
    data: &PreparedData,
    responses: &[Vec<RawRecommendation>],
) -> Result<Vec<Vec<MatchedList>>> {
    let index = build_index(&data.loaded.titles);
    if index.collisions() > 0 {
        info!("{} catalog titles share a normalized key with a lower id", index.collisions());
    }
    let pool = thread_pool(config.workers)?;
    Ok(pool.install(|| {
        responses
            .iter()
            .map(|cell| cell.par_iter().map(|r| match_titles(r, &index, config.fuzzy_threshold)).collect())
            .collect()
    }))
}

pub fn score_cells(
    config: &RunConfig,
    data: &PreparedData,
    cells: &[PromptStrategy],
    lists: &[Vec<MatchedList>],
    manifest_hash: &str,
) -> Result<Vec<ExperimentCell>> {
    let relevance = RelevanceSet::from_test(&data.split.test, config.rating_floor);
    let test_users: BTreeSet<UserId> = data.users.iter().copied().collect();
    let targets = match config.target {
        TargetMode::User => user_targets(&data.segments[0]),
        TargetMode::Global => {
            let g = global_target(&data.split.train, &data.partition);
            data.users.iter().map(|&u| (u, g)).collect()
        }
    };
    let metrics_cfg = config.metrics_config();
    cells
        .iter()
        .zip(lists)
        .map(|(strategy, lists)| {
            let segments = data.segments_for(strategy.threshold.unwrap_or(config.thresholds[0]), config);
            let report =
                evaluate(lists, &data.partition, &targets, &relevance, &test_users, Some(segments), &metrics_cfg)
                    .map_err(at(Stage::Score))?;
            Ok(ExperimentCell {
                strategy: *strategy,
                provider: config.provider_descriptor(),
                report,
                manifest_hash: manifest_hash.to_string(),
            })
        })
        .collect()
}

pub fn build_manifest(config: &RunConfig, data: &PreparedData, returned_models: Vec<String>) -> RunManifest {
    RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config_hash: config.hash(),
        datasets: data.loaded.checksums.clone(),
        data_time_range: data.loaded.raw.timestamp_range(),
        pseudo_temporal_order: !data.loaded.raw.has_timestamps(),
        raw_summary: data.loaded.raw.summary(),
        filtered_summary: data.filtered.summary(),
        provider: config.provider_descriptor(),
        returned_models,
    }
}

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Result of a full run.
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub cells: Vec<ExperimentCell>,
    pub lists: Vec<Vec<MatchedList>>,
    pub files: Vec<PathBuf>,
}

struct OutDir {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl OutDir {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| fail(Stage::Report, format!("cannot write {}: {e}", path.display())))?;
        self.files.push(path);
        Ok(())
    }
}

fn with_manifest_line(hash: &str, body: Vec<u8>) -> Vec<u8> {
    let mut out = format!("# manifest: {hash}\n").into_bytes();
    out.extend(body);
    out
}

fn to_jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("records serialize");
        out.push(b'\n');
    }
    out
}

#[derive(Serialize)]
struct ResponseRecord<'a> {
    cell: String,
    #[serde(flatten)]
    rec: &'a RawRecommendation,
}

fn begin_output(config: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&config.out)
        .map_err(|e| fail(Stage::Report, format!("cannot create {}: {e}", config.out.display())))?;
    let marker = config.out.join(INCOMPLETE_MARKER);
    fs::write(&marker, b"run in progress or failed\n").map_err(|e| fail(Stage::Report, e.to_string()))?;
    Ok(marker)
}

/// Run the whole pipeline and write every output under `config.out`.
///
/// An `INCOMPLETE` marker sits in the output directory until the last file
/// has been written.
pub fn run_experiment(config: &RunConfig, transport: Option<&dyn Transport>) -> Result<RunOutcome> {
    config.validate()?;
    let marker = begin_output(config)?;
    let data = prepare(config)?;
    let cells = build_cell_prompts(config, &data)?;
    let responses = obtain_responses(config, &data, &cells, transport)?;
    info!("responses: {} from cache, {} queried", responses.cache_hits, responses.cache_misses);
    let outcome = finish_run(config, &data, &cells, &responses)?;
    fs::remove_file(&marker).map_err(|e| fail(Stage::Report, e.to_string()))?;
    Ok(outcome)
}

/// Re-score a previous run from its `responses.jsonl` without querying.
pub fn score_from_responses(config: &RunConfig, responses_path: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let data = prepare(config)?;
    let cells = build_cell_prompts(config, &data)?;
    let responses = load_responses(&cells, responses_path)?;
    let marker = begin_output(config)?;
    let outcome = finish_run(config, &data, &cells, &responses)?;
    fs::remove_file(&marker).map_err(|e| fail(Stage::Report, e.to_string()))?;
    Ok(outcome)
}

/// Read a `responses.jsonl` file and align it with the configured cells.
pub fn load_responses(cells: &[CellPrompts], path: &Path) -> Result<Responses> {
    let text =
        fs::read_to_string(path).map_err(|e| fail(Stage::Query, format!("cannot read {}: {e}", path.display())))?;
    let mut by_key: HashMap<(String, UserId), RawRecommendation> = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: StoredResponse = serde_json::from_str(line)
            .map_err(|e| fail(Stage::Query, format!("{} line {}: {e}", path.display(), i + 1)))?;
        by_key.insert((rec.cell, rec.rec.user), rec.rec);
    }
    let per_cell = cells
        .iter()
        .map(|cell| {
            let stem = cell_stem(&cell.strategy);
            cell.requests
                .iter()
                .map(|req| {
                    by_key.remove(&(stem.clone(), req.user)).ok_or_else(|| {
                        fail(Stage::Query, format!("no stored response for user {} in cell {stem}", req.user))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Responses { per_cell, returned_models: Vec::new(), cache_hits: 0, cache_misses: 0 })
}

#[derive(Deserialize)]
struct StoredResponse {
    cell: String,
    #[serde(flatten)]
    rec: RawRecommendation,
}

pub fn responses_jsonl(cells: &[CellPrompts], responses: &Responses) -> Vec<u8> {
    to_jsonl(
        cells
            .iter()
            .zip(&responses.per_cell)
            .flat_map(|(c, recs)| recs.iter().map(|rec| ResponseRecord { cell: cell_stem(&c.strategy), rec })),
    )
}

pub fn prompts_jsonl(cells: &[CellPrompts]) -> Vec<u8> {
    to_jsonl(prompt_records(cells))
}

pub fn partition_csv(data: &PreparedData, manifest_hash: Option<&str>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    data.partition.write_csv(&mut buf).map_err(at(Stage::Report))?;
    Ok(match manifest_hash {
        Some(h) => with_manifest_line(h, buf),
        None => buf,
    })
}

/// `(file name, contents)` for each threshold's segmentation.
pub fn segment_csvs(data: &PreparedData, manifest_hash: Option<&str>) -> Result<Vec<(String, Vec<u8>)>> {
    data.segments
        .iter()
        .map(|seg| {
            let mut buf = Vec::new();
            seg.write_csv(&mut buf).map_err(at(Stage::Report))?;
            let body = match manifest_hash {
                Some(h) => with_manifest_line(h, buf),
                None => buf,
            };
            Ok((format!("segments_{}.csv", threshold_label(seg.threshold())), body))
        })
        .collect()
}

fn finish_run(
    config: &RunConfig,
    data: &PreparedData,
    cells: &[CellPrompts],
    responses: &Responses,
) -> Result<RunOutcome> {
    let lists = match_responses(config, data, &responses.per_cell)?;
    let manifest = build_manifest(config, data, responses.returned_models.clone());
    let hash = manifest.hash();
    let strategies: Vec<PromptStrategy> = cells.iter().map(|c| c.strategy).collect();
    let scored = score_cells(config, data, &strategies, &lists, &hash)?;

    let mut out = OutDir { root: config.out.clone(), files: Vec::new() };
    out.write("manifest.json", &serde_json::to_vec_pretty(&manifest).map_err(at(Stage::Report))?)?;
    out.write("partition.csv", &partition_csv(data, Some(&hash))?)?;
    for (name, body) in segment_csvs(data, Some(&hash))? {
        out.write(&name, &body)?;
    }
    out.write("prompts.jsonl", &prompts_jsonl(cells))?;
    out.write("responses.jsonl", &responses_jsonl(cells, responses))?;
    for (strategy, cell_lists) in strategies.iter().zip(&lists) {
        let stem = cell_stem(strategy);
        let mut buf = Vec::new();
        write_audit(cell_lists, &mut buf).map_err(at(Stage::Report))?;
        out.write(&format!("match_audit_{stem}.csv"), &with_manifest_line(&hash, buf))?;
        let exposure = emit_exposure(cell_lists, &data.partition, &hash).map_err(at(Stage::Report))?;
        out.write(&format!("exposure_{stem}.csv"), &exposure)?;
    }
    #[derive(Serialize)]
    struct MetricsFile<'a> {
        manifest_hash: &'a str,
        cells: &'a [ExperimentCell],
    }
    out.write(
        "metrics.json",
        &serde_json::to_vec_pretty(&MetricsFile { manifest_hash: &hash, cells: &scored }).map_err(at(Stage::Report))?,
    )?;
    for f in &config.table_formats {
        let format: TableFormat = f.parse().map_err(at(Stage::Report))?;
        let bytes = emit_table(&scored, format).map_err(at(Stage::Report))?;
        out.write(&format!("table.{}", format.extension()), &bytes)?;
    }
    Ok(RunOutcome { manifest, cells: scored, lists, files: out.files })
}

/// P/N group sizes for one data variant and threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCount {
    /// `raw` (all interactions, no filter or split) or `filtered_train`.
    pub variant: String,
    pub threshold: f64,
    pub p: usize,
    pub n: usize,
}

/// Dataset summary in the shape of the usual dataset-statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub raw: DatasetSummary,
    pub filtered: DatasetSummary,
    pub catalog_items: usize,
    pub train_interactions: usize,
    pub test_interactions: usize,
    pub pseudo_temporal_order: bool,
    pub groups: Vec<GroupCount>,
}

fn group_counts(
    variant: &str,
    set: &InteractionSet,
    catalog: &BTreeSet<ItemId>,
    config: &RunConfig,
) -> Result<Vec<GroupCount>> {
    let stats = compute_item_stats(set, catalog).map_err(at(Stage::Partition))?;
    let partition = classify_items(&stats, config.pareto_fraction).map_err(at(Stage::Partition))?;
    config
        .thresholds
        .iter()
        .map(|&t| {
            let seg = classify_users(set, &partition, t).map_err(at(Stage::Segment))?;
            let (p, n) = seg.group_sizes();
            Ok(GroupCount { variant: variant.to_string(), threshold: t, p, n })
        })
        .collect()
}

/// Raw and filtered counts plus P/N group sizes for both the unfiltered data
/// and the filtered training split.
pub fn ingest_stats(config: &RunConfig) -> Result<IngestStats> {
    let data = prepare(config)?;
    let mut groups = group_counts("raw", &data.loaded.raw, &data.loaded.catalog, config)?;
    groups.extend(data.segments.iter().map(|seg| {
        let (p, n) = seg.group_sizes();
        GroupCount { variant: "filtered_train".into(), threshold: seg.threshold(), p, n }
    }));
    Ok(IngestStats {
        raw: data.loaded.raw.summary(),
        filtered: data.filtered.summary(),
        catalog_items: data.loaded.catalog.len(),
        train_interactions: data.split.train.len(),
        test_interactions: data.split.test.len(),
        pseudo_temporal_order: !data.loaded.raw.has_timestamps(),
        groups,
    })
}

/// Published dataset statistics to diff `ingest-stats` output against.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStats {
    pub name: &'static str,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// (threshold, P, N)
    pub groups: [(f64, usize, usize); 2],
}

pub const MOVIELENS_20M_REFERENCE: ReferenceStats = ReferenceStats {
    name: "MovieLens-20M",
    users: 138_493,
    items: 270_000,
    interactions: 20_000_000,
    groups: [(0.5, 138_484, 9), (0.8, 138_019, 474)],
};

pub const GOODBOOKS_10K_REFERENCE: ReferenceStats = ReferenceStats {
    name: "Goodbooks-10k",
    users: 53_271,
    items: 10_000,
    interactions: 5_972_476,
    groups: [(0.5, 45_599, 7_672), (0.8, 9_401, 43_880)],
};

impl ReferenceStats {
    pub fn for_format(format: DatasetFormat) -> &'static ReferenceStats {
        match format {
            DatasetFormat::MovieLens => &MOVIELENS_20M_REFERENCE,
            DatasetFormat::Goodbooks => &GOODBOOKS_10K_REFERENCE,
        }
    }
}

/// `(quantity, reference, observed)` rows comparing observed statistics with
/// a reference. Group rows are emitted for every observed variant.
pub fn reference_diff(stats: &IngestStats, reference: &ReferenceStats) -> Vec<(String, i64, i64)> {
    let mut rows = vec![
        ("users".to_string(), reference.users as i64, stats.raw.users as i64),
        ("items (rated)".to_string(), reference.items as i64, stats.raw.items as i64),
        ("items (catalog)".to_string(), reference.items as i64, stats.catalog_items as i64),
        ("interactions".to_string(), reference.interactions as i64, stats.raw.interactions as i64),
    ];
    for g in &stats.groups {
        if let Some(&(_, p, n)) = reference.groups.iter().find(|(t, _, _)| (t - g.threshold).abs() < 1e-12) {
            let label = threshold_label(g.threshold);
            rows.push((format!("P group ({label}) [{}]", g.variant), p as i64, g.p as i64));
            rows.push((format!("N group ({label}) [{}]", g.variant), n as i64, g.n as i64));
        }
    }
    rows
}
