//! Pipeline orchestration: one JSON config, one workdir, per-stage artifacts.
//!
//! Every stage reads its inputs from the workdir, refuses to overwrite
//! existing artifacts unless forced, and writes a manifest sidecar
//! (`<artifact>.manifest.json`) recording the command line, seed, config hash
//! and input hashes. Stage seeds are derived from the global seed, so two
//! single-threaded runs of the same config produce byte-identical artifacts.
//!
//! Relative paths in the config resolve against the config file's directory,
//! and manifests record paths exactly as written in the config.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering;
use crate::corpus::{self, CorpusConfig, DocGranularity};
use crate::embedding::{self, CbowConfig, CbowOutput};
use crate::error::{Error, Result};
use crate::lexicon;
use crate::math::Mat;
use crate::metrics::{self, CoherenceOptions, EpsilonMode};
use crate::naming::{self, NamingClientConfig, NamingStatus};
use crate::training::{self, NegativeMode, OptimizerKind, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Input reviews, JSONL.
    pub input: PathBuf,
    /// Directory receiving every artifact.
    pub workdir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub clustering: ClusteringSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub lexicon: LexiconSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub naming: NamingSection,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub lowercase: bool,
    pub stopwords: Option<PathBuf>,
    pub min_count: u64,
    /// Sliding-window size for co-occurrence counting.
    pub window_size: usize,
    pub doc_granularity: DocGranularity,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            lowercase: true,
            stopwords: None,
            min_count: 5,
            window_size: 10,
            doc_granularity: DocGranularity::Review,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingFormat {
    #[default]
    Text,
    Binary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSection {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_lr: f64,
    pub output: CbowOutput,
    pub format: EmbeddingFormat,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        let cbow = CbowConfig::default();
        EmbeddingSection {
            dim: cbow.dim,
            window: cbow.window,
            negatives: cbow.negatives,
            epochs: cbow.epochs,
            learning_rate: cbow.learning_rate,
            min_lr: cbow.min_lr,
            output: cbow.output,
            format: EmbeddingFormat::Text,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringSection {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Words below this corpus frequency are not clustered.
    pub frequency_floor: u64,
    /// Optional allowlist file (one token per line); when set, only listed
    /// words are clustered.
    pub candidate_list: Option<PathBuf>,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        ClusteringSection {
            k: 10,
            max_iter: 100,
            tol: 1e-4,
            frequency_floor: 20,
            candidate_list: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub heads: usize,
    pub m_negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub ortho_reg: f64,
    pub negative_mode: NegativeMode,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let train = TrainConfig::default();
        TrainingSection {
            heads: 4,
            m_negatives: train.m_negatives,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            optimizer: train.optimizer,
            ortho_reg: train.ortho_reg,
            negative_mode: train.negative_mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelingMode {
    #[default]
    Lexicon,
    Model,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LexiconSection {
    pub top_n: usize,
    pub mode: LabelingMode,
    /// Probability threshold for the model-based labeling mode.
    pub tau: f64,
    /// Top-N values exercised by the sweep command.
    pub sweep: Vec<usize>,
}

impl Default for LexiconSection {
    fn default() -> Self {
        LexiconSection {
            top_n: 150,
            mode: LabelingMode::Lexicon,
            tau: 0.2,
            sweep: vec![50, 100, 150, 200, 250],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    pub top_n: usize,
    pub window: usize,
    pub epsilon: f64,
    pub epsilon_mode: EpsilonMode,
    /// Optional gold labels (JSONL, same shape as labels.jsonl) for F1.
    pub gold_labels: Option<PathBuf>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            top_n: 20,
            window: 10,
            epsilon: 1.0,
            epsilon_mode: EpsilonMode::CountLevel,
            gold_labels: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NamingSection {
    pub endpoint: Option<String>,
    pub auth_env: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_retries: usize,
    pub timeout_secs: u64,
    pub candidates: Vec<String>,
    pub mapping_file: Option<PathBuf>,
    pub prompt_template: Option<String>,
}

impl Default for NamingSection {
    fn default() -> Self {
        let client = NamingClientConfig::default();
        NamingSection {
            endpoint: None,
            auth_env: None,
            model: client.model,
            temperature: client.temperature,
            max_retries: client.max_retries,
            timeout_secs: client.timeout_secs,
            candidates: Vec::new(),
            mapping_file: None,
            prompt_template: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Context and manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub force: bool,
    pub strict: bool,
    pub threads: usize,
    /// Exact command line recorded in manifests; synthesized when absent.
    pub command_line: Option<String>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            force: false,
            strict: false,
            threads: 1,
            command_line: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineContext {
    pub config: PipelineConfig,
    pub options: RunOptions,
    /// Directory that relative config paths resolve against.
    base_dir: PathBuf,
    /// Config file name as given, for synthesized command lines.
    config_name: String,
    config_hash: String,
}

/// Apply `--set path.to.field=value` overrides onto the raw config JSON.
fn apply_overrides(value: &mut serde_json::Value, overrides: &[(String, String)]) -> Result<()> {
    for (path, raw) in overrides {
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        let segments: Vec<&str> = path.split('.').collect();
        let (last, parents) = segments
            .split_last()
            .ok_or_else(|| Error::Config("empty override path".into()))?;
        let mut cursor = &mut *value;
        for segment in parents {
            let map = cursor.as_object_mut().ok_or_else(|| {
                Error::Config(format!("override {path} does not address an object"))
            })?;
            cursor = map
                .entry((*segment).to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        let map = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override {path} does not address an object"))
        })?;
        map.insert((*last).to_string(), parsed);
    }
    Ok(())
}

impl PipelineContext {
    pub fn load(
        config_path: &Path,
        overrides: &[(String, String)],
        options: RunOptions,
    ) -> Result<Self> {
        let text = fs::read_to_string(config_path).map_err(|e| Error::io(config_path, e))?;
        let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("cannot parse {}: {e}", config_path.display()))
        })?;
        apply_overrides(&mut value, overrides)?;
        let config: PipelineConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        let base_dir = config_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let config_name = config_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "config.json".into());
        Ok(Self::from_config(config, base_dir, config_name, options))
    }

    pub fn from_config(
        config: PipelineConfig,
        base_dir: PathBuf,
        config_name: String,
        options: RunOptions,
    ) -> Self {
        let canonical = serde_json::to_string(&config).expect("config serializes");
        let config_hash = format!("{:016x}", fnv1a64(canonical.as_bytes()));
        PipelineContext {
            config,
            options,
            base_dir,
            config_name,
            config_hash,
        }
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    fn workdir(&self) -> PathBuf {
        self.resolve(&self.config.workdir)
    }

    fn artifact_path(&self, name: &str) -> PathBuf {
        self.workdir().join(name)
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn command_line(&self, stage: &str) -> String {
        self.options
            .command_line
            .clone()
            .unwrap_or_else(|| format!("muscad {stage} --config {}", self.config_name))
    }

    /// Resolved path of an upstream artifact, or an error naming the command
    /// that produces it. Verifies the upstream manifest's config hash.
    fn require(&self, name: &str, run_first: &str) -> Result<PathBuf> {
        let path = self.artifact_path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                artifact: name.into(),
                run_first: format!("muscad {run_first}"),
            });
        }
        let manifest_path = self.artifact_path(&format!("{name}.manifest.json"));
        if let Ok(text) = fs::read_to_string(&manifest_path) {
            if let Ok(manifest) = serde_json::from_str::<Manifest>(&text) {
                if manifest.config_hash != self.config_hash {
                    if self.options.strict {
                        return Err(Error::ConfigMismatch {
                            artifact: name.into(),
                        });
                    }
                    eprintln!(
                        "warning: {name} was produced with a different config (hash {} vs {})",
                        manifest.config_hash, self.config_hash
                    );
                }
            }
        }
        Ok(path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command_line: String,
    pub seed: u64,
    pub config_hash: String,
    /// Input path (as written in the config or artifact name) -> FNV-1a hash
    /// of the file contents.
    pub inputs: BTreeMap<String, String>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

#[derive(Debug, Default)]
pub struct StageOutcome {
    pub artifacts: Vec<PathBuf>,
    pub degraded: bool,
}

/// Collects one stage's outputs: refuses silent overwrites, writes manifests.
struct StageWriter<'a> {
    ctx: &'a PipelineContext,
    stage: &'a str,
    inputs: BTreeMap<String, String>,
    artifacts: Vec<PathBuf>,
}

impl<'a> StageWriter<'a> {
    fn new(ctx: &'a PipelineContext, stage: &'a str) -> Result<Self> {
        let workdir = ctx.workdir();
        fs::create_dir_all(&workdir).map_err(|e| Error::io(&workdir, e))?;
        Ok(StageWriter {
            ctx,
            stage,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
        })
    }

    fn add_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(label.into(), hash_file(path)?);
        Ok(())
    }

    fn target(&self, name: &str) -> Result<PathBuf> {
        let path = self.ctx.artifact_path(name);
        if path.exists() && !self.ctx.options.force {
            return Err(Error::Overwrite { path });
        }
        Ok(path)
    }

    fn emit(&mut self, name: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let path = self.target(name)?;
        write(&path)?;
        let manifest = Manifest {
            tool_version: TOOL_VERSION.into(),
            command_line: self.ctx.command_line(self.stage),
            seed: self.ctx.config.seed,
            config_hash: self.ctx.config_hash.clone(),
            inputs: self.inputs.clone(),
        };
        let manifest_path = self.ctx.artifact_path(&format!("{name}.manifest.json"));
        fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&manifest_path, e))?;
        self.artifacts.push(path.clone());
        Ok(path)
    }

    fn finish(self, degraded: bool) -> StageOutcome {
        StageOutcome {
            artifacts: self.artifacts,
            degraded,
        }
    }
}

// ---------------------------------------------------------------------------
// Artifact names
// ---------------------------------------------------------------------------

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const COOC_FILE: &str = "cooc_stats.json";
pub const EMBEDDINGS_TEXT_FILE: &str = "embeddings.txt";
pub const EMBEDDINGS_BINARY_FILE: &str = "embeddings.bin";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const ASPECT_INIT_FILE: &str = "aspect_init.json";
pub const MODEL_FILE: &str = "model.bin";
pub const MODEL_SIDECAR_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const LEXICON_FILE: &str = "lexicon.json";
pub const NAMING_AUDIT_FILE: &str = "naming_audit.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const EVALUATION_JSON_FILE: &str = "evaluation.json";
pub const EVALUATION_TEXT_FILE: &str = "evaluation.txt";
pub const SWEEP_COVERAGE_FILE: &str = "sweep_coverage.json";

fn embeddings_file(config: &PipelineConfig) -> &'static str {
    match config.embedding.format {
        EmbeddingFormat::Text => EMBEDDINGS_TEXT_FILE,
        EmbeddingFormat::Binary => EMBEDDINGS_BINARY_FILE,
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Build the corpus, vocabulary and co-occurrence statistics.
pub fn cmd_preprocess(ctx: &PipelineContext) -> Result<StageOutcome> {
    let mut writer = StageWriter::new(ctx, "preprocess")?;
    let input = ctx.resolve(&ctx.config.input);
    writer.add_input(&ctx.config.input.to_string_lossy(), &input)?;
    let corpus_config = CorpusConfig {
        lowercase: ctx.config.corpus.lowercase,
        stopwords: ctx.config.corpus.stopwords.as_ref().map(|p| ctx.resolve(p)),
        min_count: ctx.config.corpus.min_count,
    };
    if let (Some(raw), Some(resolved)) = (
        &ctx.config.corpus.stopwords,
        corpus_config.stopwords.as_ref(),
    ) {
        writer.add_input(&raw.to_string_lossy(), resolved)?;
    }

    let (corpus, vocab) = corpus::build_corpus(&[input], &corpus_config)?;
    let stats = corpus::compute_cooc_stats_with(
        &corpus,
        ctx.config.corpus.window_size,
        ctx.config.corpus.doc_granularity,
    )?;

    writer.emit(CORPUS_FILE, |p| corpus::save_corpus(p, &corpus, &vocab))?;
    writer.emit(VOCAB_FILE, |p| vocab.write_tsv(p))?;
    writer.emit(COOC_FILE, |p| corpus::save_cooc_stats(p, &stats))?;
    Ok(writer.finish(false))
}

/// Train CBOW embeddings over the preprocessed corpus.
pub fn cmd_embed(ctx: &PipelineContext) -> Result<StageOutcome> {
    let corpus_path = ctx.require(CORPUS_FILE, "preprocess")?;
    let mut writer = StageWriter::new(ctx, "embed")?;
    writer.add_input(CORPUS_FILE, &corpus_path)?;

    let (corpus, vocab) = corpus::load_corpus(&corpus_path)?;
    let section = &ctx.config.embedding;
    let cbow = CbowConfig {
        dim: section.dim,
        window: section.window,
        negatives: section.negatives,
        epochs: section.epochs,
        learning_rate: section.learning_rate,
        min_lr: section.min_lr,
        seed: ctx.config.seed.wrapping_add(1),
        output: section.output,
        threads: ctx.options.threads,
    };
    let embeddings = embedding::train_cbow(&corpus, &vocab, &cbow)?;
    match section.format {
        EmbeddingFormat::Text => {
            writer.emit(EMBEDDINGS_TEXT_FILE, |p| {
                embedding::save_embeddings_text(p, &embeddings, &vocab)
            })?;
        }
        EmbeddingFormat::Binary => {
            writer.emit(EMBEDDINGS_BINARY_FILE, |p| {
                embedding::save_embeddings_binary(p, &embeddings, &vocab)
            })?;
        }
    }
    Ok(writer.finish(false))
}

fn load_embeddings_checked(
    path: &Path,
    vocab: &corpus::Vocabulary,
) -> Result<embedding::EmbeddingMatrix> {
    let (embeddings, tokens) = embedding::load_embeddings(path)?;
    if tokens != vocab.tokens() {
        return Err(Error::Dimension(
            "embedding tokens do not match the corpus vocabulary; rerun `muscad embed`".into(),
        ));
    }
    Ok(embeddings)
}

/// Cluster embeddings and emit the aspect-matrix seed.
pub fn cmd_cluster(ctx: &PipelineContext) -> Result<StageOutcome> {
    let corpus_path = ctx.require(CORPUS_FILE, "preprocess")?;
    let emb_path = ctx.require(embeddings_file(&ctx.config), "embed")?;
    let mut writer = StageWriter::new(ctx, "cluster")?;
    writer.add_input(CORPUS_FILE, &corpus_path)?;
    writer.add_input(embeddings_file(&ctx.config), &emb_path)?;

    let (_, vocab) = corpus::load_corpus(&corpus_path)?;
    let embeddings = load_embeddings_checked(&emb_path, &vocab)?;
    let section = &ctx.config.clustering;
    let mut candidates = clustering::candidate_ids(&vocab, section.frequency_floor);
    if let Some(list_path) = &section.candidate_list {
        let resolved = ctx.resolve(list_path);
        writer.add_input(&list_path.to_string_lossy(), &resolved)?;
        let text = fs::read_to_string(&resolved).map_err(|e| Error::io(&resolved, e))?;
        let allowed: std::collections::HashSet<u32> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .filter_map(|t| vocab.id(t))
            .collect();
        candidates.retain(|id| allowed.contains(id));
    }
    if candidates.len() < section.k {
        return Err(Error::Config(format!(
            "only {} words reach frequency floor {}, cannot form k={} clusters (lower clustering.frequency_floor?)",
            candidates.len(),
            section.frequency_floor,
            section.k
        )));
    }
    let result = clustering::kmeans(
        &embeddings,
        section.k,
        &candidates,
        section.max_iter,
        section.tol,
        ctx.config.seed.wrapping_add(2),
    )?;
    let report = clustering::cluster_report(&result, &vocab, &embeddings);
    let aspect_matrix = clustering::build_aspect_matrix(&result);

    writer.emit(CLUSTERS_FILE, |p| clustering::save_cluster_report(p, &report))?;
    writer.emit(ASPECT_INIT_FILE, |p| {
        fs::write(p, serde_json::to_string(&aspect_matrix)?).map_err(|e| Error::io(p, e))
    })?;
    Ok(writer.finish(false))
}

#[derive(Serialize)]
struct TrainLogRecord {
    epoch: usize,
    mean_loss: f64,
    zero_loss_fraction: f64,
    grad_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    dim: usize,
    heads: usize,
    k_aspects: usize,
    seed: u64,
    training: TrainingSection,
}

/// Train the aspect model from the clustering seed.
pub fn cmd_train(ctx: &PipelineContext) -> Result<StageOutcome> {
    let corpus_path = ctx.require(CORPUS_FILE, "preprocess")?;
    let emb_path = ctx.require(embeddings_file(&ctx.config), "embed")?;
    let init_path = ctx.require(ASPECT_INIT_FILE, "cluster")?;
    let mut writer = StageWriter::new(ctx, "train")?;
    writer.add_input(CORPUS_FILE, &corpus_path)?;
    writer.add_input(embeddings_file(&ctx.config), &emb_path)?;
    writer.add_input(ASPECT_INIT_FILE, &init_path)?;

    let (corpus, vocab) = corpus::load_corpus(&corpus_path)?;
    let embeddings = load_embeddings_checked(&emb_path, &vocab)?;
    let ec: Mat = serde_json::from_str(
        &fs::read_to_string(&init_path).map_err(|e| Error::io(&init_path, e))?,
    )?;

    let section = &ctx.config.training;
    let mut params = crate::aspect_model::AspectModelParams::new(
        embeddings.dim(),
        section.heads,
        ec,
        ctx.config.seed.wrapping_add(3),
    )?;
    let train_config = TrainConfig {
        m_negatives: section.m_negatives,
        epochs: section.epochs,
        batch_size: section.batch_size,
        learning_rate: section.learning_rate,
        optimizer: section.optimizer,
        seed: ctx.config.seed.wrapping_add(4),
        ortho_reg: section.ortho_reg,
        negative_mode: section.negative_mode,
    };
    let report = training::train(&mut params, &corpus, &embeddings, &train_config)?;
    for stats in &report.epochs {
        eprintln!(
            "epoch {:>3}: loss {:.5}, zero-loss {:.3}, grad norm {:.4} ({:.2}s)",
            stats.epoch, stats.mean_loss, stats.zero_loss_fraction, stats.grad_norm, stats.wall_secs
        );
    }

    writer.emit(MODEL_FILE, |p| crate::aspect_model::save_model(p, &params))?;
    writer.emit(MODEL_SIDECAR_FILE, |p| {
        let sidecar = ModelSidecar {
            dim: params.dim,
            heads: params.heads,
            k_aspects: params.k_aspects,
            seed: ctx.config.seed,
            training: section.clone(),
        };
        fs::write(p, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(p, e))
    })?;
    writer.emit(TRAIN_LOG_FILE, |p| {
        let mut out = Vec::new();
        for stats in &report.epochs {
            let record = TrainLogRecord {
                epoch: stats.epoch,
                mean_loss: stats.mean_loss,
                zero_loss_fraction: stats.zero_loss_fraction,
                grad_norm: stats.grad_norm,
            };
            writeln!(out, "{}", serde_json::to_string(&record)?).expect("vec");
        }
        fs::write(p, out).map_err(|e| Error::io(p, e))
    })?;
    Ok(writer.finish(false))
}

/// Extract the aspect lexicon, optionally naming categories.
pub fn cmd_lexicon(ctx: &PipelineContext) -> Result<StageOutcome> {
    let outcome = extract_and_name(ctx, ctx.config.lexicon.top_n, LEXICON_FILE, true)?;
    Ok(outcome)
}

fn extract_and_name(
    ctx: &PipelineContext,
    top_n: usize,
    file_name: &str,
    run_naming: bool,
) -> Result<StageOutcome> {
    let corpus_path = ctx.require(CORPUS_FILE, "preprocess")?;
    let emb_path = ctx.require(embeddings_file(&ctx.config), "embed")?;
    let model_path = ctx.require(MODEL_FILE, "train")?;
    let mut writer = StageWriter::new(ctx, "lexicon")?;
    writer.add_input(CORPUS_FILE, &corpus_path)?;
    writer.add_input(embeddings_file(&ctx.config), &emb_path)?;
    writer.add_input(MODEL_FILE, &model_path)?;

    let (_, vocab) = corpus::load_corpus(&corpus_path)?;
    let embeddings = load_embeddings_checked(&emb_path, &vocab)?;
    let params = crate::aspect_model::load_model(&model_path)?;
    let effective_top_n = top_n.min(vocab.len());
    let mut lex = lexicon::extract_lexicon(&params, &embeddings, &vocab, effective_top_n)?;

    let naming_section = &ctx.config.naming;
    let mut degraded = false;
    if run_naming && (naming_section.endpoint.is_some() || naming_section.mapping_file.is_some()) {
        let client = NamingClientConfig {
            endpoint: naming_section.endpoint.clone(),
            auth_env: naming_section.auth_env.clone(),
            model: naming_section.model.clone(),
            temperature: naming_section.temperature,
            max_retries: naming_section.max_retries,
            timeout_secs: naming_section.timeout_secs,
        };
        let template = naming_section
            .prompt_template
            .clone()
            .unwrap_or_else(|| naming::DEFAULT_PROMPT_TEMPLATE.to_string());
        let mapping = naming_section.mapping_file.as_ref().map(|p| ctx.resolve(p));
        let audit_path = writer.target(NAMING_AUDIT_FILE)?;
        let outcome = naming::name_categories(
            &mut lex,
            &template,
            &naming_section.candidates,
            &client,
            mapping.as_deref(),
            Some(&audit_path),
        )?;
        for warning in &outcome.warnings {
            eprintln!("warning: {warning}");
        }
        degraded = outcome.status == NamingStatus::Degraded;
    }

    writer.emit(file_name, |p| lexicon::save_lexicon(p, &lex))?;
    Ok(writer.finish(degraded))
}

/// Annotate reviews with aspect labels.
pub fn cmd_label(ctx: &PipelineContext) -> Result<StageOutcome> {
    let corpus_path = ctx.require(CORPUS_FILE, "preprocess")?;
    let lexicon_path = ctx.require(LEXICON_FILE, "lexicon")?;
    let mut writer = StageWriter::new(ctx, "label")?;
    writer.add_input(CORPUS_FILE, &corpus_path)?;
    writer.add_input(LEXICON_FILE, &lexicon_path)?;

    let (corpus, vocab) = corpus::load_corpus(&corpus_path)?;
    let lex = lexicon::load_lexicon(&lexicon_path)?;
    let labels = match ctx.config.lexicon.mode {
        LabelingMode::Lexicon => lexicon::label_reviews(&corpus, &vocab, &lex),
        LabelingMode::Model => {
            let emb_path = ctx.require(embeddings_file(&ctx.config), "embed")?;
            let model_path = ctx.require(MODEL_FILE, "train")?;
            writer.add_input(embeddings_file(&ctx.config), &emb_path)?;
            writer.add_input(MODEL_FILE, &model_path)?;
            let embeddings = load_embeddings_checked(&emb_path, &vocab)?;
            let params = crate::aspect_model::load_model(&model_path)?;
            lexicon::label_reviews_with_model(
                &corpus,
                &embeddings,
                &params,
                &lex,
                ctx.config.lexicon.tau,
            )?
        }
    };
    writer.emit(LABELS_FILE, |p| lexicon::save_labels(p, &labels, &corpus))?;
    Ok(writer.finish(false))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub coherence: metrics::CoherenceReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<metrics::F1Report>,
}

/// Score the lexicon (and labels, when gold labels are configured).
pub fn cmd_evaluate(ctx: &PipelineContext) -> Result<StageOutcome> {
    let corpus_path = ctx.require(CORPUS_FILE, "preprocess")?;
    let emb_path = ctx.require(embeddings_file(&ctx.config), "embed")?;
    let lexicon_path = ctx.require(LEXICON_FILE, "lexicon")?;
    let mut writer = StageWriter::new(ctx, "evaluate")?;
    writer.add_input(CORPUS_FILE, &corpus_path)?;
    writer.add_input(embeddings_file(&ctx.config), &emb_path)?;
    writer.add_input(LEXICON_FILE, &lexicon_path)?;

    let (corpus, vocab) = corpus::load_corpus(&corpus_path)?;
    let embeddings = load_embeddings_checked(&emb_path, &vocab)?;
    let lex = lexicon::load_lexicon(&lexicon_path)?;

    // Reuse the preprocess-stage counts when the window matches; otherwise
    // recount at the requested window.
    let stats_path = ctx.artifact_path(COOC_FILE);
    let stats = match corpus::load_cooc_stats(&stats_path) {
        Ok(stats) if stats.window_size == ctx.config.metrics.window => stats,
        _ => {
            eprintln!(
                "note: recomputing co-occurrence statistics at window {}",
                ctx.config.metrics.window
            );
            corpus::compute_cooc_stats_with(
                &corpus,
                ctx.config.metrics.window,
                ctx.config.corpus.doc_granularity,
            )?
        }
    };

    let opts = CoherenceOptions {
        top_n: ctx.config.metrics.top_n,
        epsilon: ctx.config.metrics.epsilon,
        epsilon_mode: ctx.config.metrics.epsilon_mode,
    };
    let coherence = metrics::coherence_report(&lex, &stats, &embeddings, &vocab, &opts)?;

    let f1 = match &ctx.config.metrics.gold_labels {
        Some(gold_path) => {
            let labels_path = ctx.require(LABELS_FILE, "label")?;
            writer.add_input(LABELS_FILE, &labels_path)?;
            let resolved = ctx.resolve(gold_path);
            writer.add_input(&gold_path.to_string_lossy(), &resolved)?;
            let predicted = lexicon::load_labels(&labels_path)?;
            let gold = lexicon::load_labels(&resolved)?;
            let mut universe: Vec<String> = predicted.label_universe();
            for label in gold.label_universe() {
                if !universe.contains(&label) {
                    universe.push(label);
                }
            }
            universe.sort();
            Some(metrics::multilabel_f1(&predicted, &gold, &universe, false)?)
        }
        None => None,
    };

    let report = EvaluationReport { coherence, f1 };
    writer.emit(EVALUATION_JSON_FILE, |p| {
        fs::write(p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(p, e))
    })?;
    writer.emit(EVALUATION_TEXT_FILE, |p| {
        let row = metrics::TableRow {
            name: "muscad".into(),
            npmi: report.coherence.mean_npmi,
            umass: report.coherence.mean_umass,
            diversity: report.coherence.diversity,
            ec: Some(report.coherence.embedding_coherence),
        };
        let mut text = metrics::format_metric_table(&[row]);
        if let Some(f1) = &report.f1 {
            text.push_str(&format!(
                "\nmicro-F1 {:.4}  macro-F1 {:.4}\n",
                f1.micro_f1, f1.macro_f1
            ));
        }
        fs::write(p, text).map_err(|e| Error::io(p, e))
    })?;
    Ok(writer.finish(false))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub top_n: usize,
    /// Fraction of sentences receiving at least one label.
    pub coverage: f64,
}

/// Top-N sweep: one lexicon and one coverage figure per sweep value.
pub fn cmd_sweep(ctx: &PipelineContext) -> Result<StageOutcome> {
    let corpus_path = ctx.require(CORPUS_FILE, "preprocess")?;
    let emb_path = ctx.require(embeddings_file(&ctx.config), "embed")?;
    let model_path = ctx.require(MODEL_FILE, "train")?;
    let mut writer = StageWriter::new(ctx, "sweep")?;
    writer.add_input(CORPUS_FILE, &corpus_path)?;
    writer.add_input(embeddings_file(&ctx.config), &emb_path)?;
    writer.add_input(MODEL_FILE, &model_path)?;

    let (corpus, vocab) = corpus::load_corpus(&corpus_path)?;
    let embeddings = load_embeddings_checked(&emb_path, &vocab)?;
    let params = crate::aspect_model::load_model(&model_path)?;

    let mut values = ctx.config.lexicon.sweep.clone();
    values.sort_unstable();
    values.dedup();
    if values.is_empty() {
        return Err(Error::Config("lexicon.sweep has no values".into()));
    }
    // Extract once at the deepest value; shallower lexicons are prefixes.
    let max_n = values.last().copied().unwrap().min(vocab.len());
    let full = lexicon::extract_lexicon(&params, &embeddings, &vocab, max_n)?;

    let mut points = Vec::new();
    for &n in &values {
        let effective = n.min(vocab.len());
        let lex = full.truncated(effective)?;
        let labels = lexicon::label_reviews(&corpus, &vocab, &lex);
        let covered = (0..corpus.n_sentences())
            .filter(|s| labels.sentence_trace.contains_key(s))
            .count();
        let coverage = covered as f64 / corpus.n_sentences() as f64;
        writer.emit(&format!("lexicon_top{n}.json"), |p| {
            lexicon::save_lexicon(p, &lex)
        })?;
        points.push(SweepPoint { top_n: n, coverage });
    }
    writer.emit(SWEEP_COVERAGE_FILE, |p| {
        fs::write(p, serde_json::to_string_pretty(&points)?).map_err(|e| Error::io(p, e))
    })?;
    Ok(writer.finish(false))
}

/// Run every stage in order.
pub fn cmd_pipeline(ctx: &PipelineContext) -> Result<StageOutcome> {
    let mut all = StageOutcome::default();
    for stage in [
        cmd_preprocess,
        cmd_embed,
        cmd_cluster,
        cmd_train,
        cmd_lexicon,
        cmd_label,
        cmd_evaluate,
    ] {
        let outcome = stage(ctx)?;
        all.degraded |= outcome.degraded;
        all.artifacts.extend(outcome.artifacts);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{planted_reviews, PlantedSpec};

    fn write_fixture(dir: &Path, spec: &PlantedSpec) -> PathBuf {
        let reviews = planted_reviews(spec);
        let mut out = String::new();
        for r in &reviews {
            out.push_str(&serde_json::to_string(r).unwrap());
            out.push('\n');
        }
        let path = dir.join("reviews.jsonl");
        fs::write(&path, out).unwrap();
        path
    }

    fn small_config() -> serde_json::Value {
        serde_json::json!({
            "input": "reviews.jsonl",
            "workdir": "out",
            "seed": 7,
            "corpus": {"min_count": 1, "window_size": 5},
            "embedding": {"dim": 16, "epochs": 3, "negatives": 3, "learning_rate": 0.05, "min_lr": 0.001},
            "clustering": {"k": 3, "frequency_floor": 1},
            "training": {"heads": 2, "m_negatives": 3, "epochs": 2, "batch_size": 16, "learning_rate": 0.002},
            "lexicon": {"top_n": 8},
            "metrics": {"top_n": 5, "window": 5}
        })
    }

    fn context_in(dir: &Path) -> PipelineContext {
        let config_path = dir.join("config.json");
        fs::write(&config_path, small_config().to_string()).unwrap();
        PipelineContext::load(&config_path, &[], RunOptions::default()).unwrap()
    }

    #[test]
    fn full_pipeline_emits_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &PlantedSpec {
                sentences_per_topic: 30,
                ..PlantedSpec::default()
            },
        );
        let ctx = context_in(dir.path());
        let outcome = cmd_pipeline(&ctx).unwrap();
        assert!(!outcome.degraded);
        for name in [
            CORPUS_FILE,
            VOCAB_FILE,
            COOC_FILE,
            EMBEDDINGS_TEXT_FILE,
            CLUSTERS_FILE,
            ASPECT_INIT_FILE,
            MODEL_FILE,
            MODEL_SIDECAR_FILE,
            TRAIN_LOG_FILE,
            LEXICON_FILE,
            LABELS_FILE,
            EVALUATION_JSON_FILE,
            EVALUATION_TEXT_FILE,
        ] {
            let path = ctx.artifact_path(name);
            assert!(path.exists(), "missing artifact {name}");
            assert!(
                ctx.artifact_path(&format!("{name}.manifest.json")).exists(),
                "missing manifest for {name}"
            );
        }
    }

    #[test]
    fn bundled_fixture_completes_quickly_with_all_stage_artifacts() {
        let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
        let dir = tempfile::tempdir().unwrap();
        for name in ["reviews.jsonl", "config.json"] {
            fs::copy(fixtures.join(name), dir.path().join(name)).unwrap();
        }
        let ctx = PipelineContext::load(
            &dir.path().join("config.json"),
            &[],
            RunOptions::default(),
        )
        .unwrap();
        let start = std::time::Instant::now();
        cmd_pipeline(&ctx).unwrap();
        assert!(start.elapsed().as_secs() < 60, "fixture run took {:?}", start.elapsed());
        for name in [
            CORPUS_FILE,
            EMBEDDINGS_TEXT_FILE,
            CLUSTERS_FILE,
            ASPECT_INIT_FILE,
            MODEL_FILE,
            LEXICON_FILE,
            LABELS_FILE,
            EVALUATION_JSON_FILE,
        ] {
            assert!(ctx.artifact_path(name).exists(), "missing {name}");
        }
    }

    #[test]
    fn missing_upstream_artifact_names_the_prior_command() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &PlantedSpec::default());
        let ctx = context_in(dir.path());
        match cmd_evaluate(&ctx) {
            Err(Error::MissingArtifact { run_first, .. }) => {
                assert_eq!(run_first, "muscad preprocess");
            }
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_without_a_lexicon_points_at_the_lexicon_command() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &PlantedSpec {
                sentences_per_topic: 10,
                ..PlantedSpec::default()
            },
        );
        let ctx = context_in(dir.path());
        cmd_preprocess(&ctx).unwrap();
        cmd_embed(&ctx).unwrap();
        match cmd_evaluate(&ctx) {
            Err(Error::MissingArtifact {
                artifact,
                run_first,
            }) => {
                assert_eq!(artifact, LEXICON_FILE);
                assert_eq!(run_first, "muscad lexicon");
            }
            other => panic!("expected missing lexicon, got {other:?}"),
        }
    }

    #[test]
    fn config_hash_mismatch_warns_by_default_and_errors_with_strict() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &PlantedSpec {
                sentences_per_topic: 10,
                ..PlantedSpec::default()
            },
        );
        let ctx = context_in(dir.path());
        cmd_preprocess(&ctx).unwrap();

        // Change a config field after preprocessing.
        let config_path = dir.path().join("config.json");
        let mut config = small_config();
        config["embedding"]["dim"] = serde_json::json!(8);
        fs::write(&config_path, config.to_string()).unwrap();

        // Default: proceeds with a warning.
        let lax =
            PipelineContext::load(&config_path, &[], RunOptions::default()).unwrap();
        cmd_embed(&lax).unwrap();

        // Strict: hard error naming the stale artifact.
        let strict = PipelineContext::load(
            &config_path,
            &[],
            RunOptions {
                strict: true,
                force: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert!(matches!(
            cmd_embed(&strict),
            Err(Error::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn overwrite_requires_force() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &PlantedSpec {
                sentences_per_topic: 10,
                ..PlantedSpec::default()
            },
        );
        let ctx = context_in(dir.path());
        cmd_preprocess(&ctx).unwrap();
        assert!(matches!(
            cmd_preprocess(&ctx),
            Err(Error::Overwrite { .. })
        ));
        let forced = PipelineContext::load(
            &dir.path().join("config.json"),
            &[],
            RunOptions {
                force: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        cmd_preprocess(&forced).unwrap();
    }

    #[test]
    fn cluster_candidate_allowlist_restricts_the_point_set() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &PlantedSpec {
                sentences_per_topic: 20,
                ..PlantedSpec::default()
            },
        );
        // Allow only topic-0 and topic-1 words; k=3 becomes infeasible.
        let allow: Vec<String> = (0..2)
            .flat_map(|t| (0..12).map(move |w| crate::synthetic::planted_token(t, w)))
            .collect();
        fs::write(dir.path().join("allow.txt"), allow.join("\n")).unwrap();
        let config_path = dir.path().join("config.json");
        let mut config = small_config();
        config["clustering"]["candidate_list"] = serde_json::json!("allow.txt");
        config["clustering"]["k"] = serde_json::json!(25);
        fs::write(&config_path, config.to_string()).unwrap();
        let ctx = PipelineContext::load(&config_path, &[], RunOptions::default()).unwrap();
        cmd_preprocess(&ctx).unwrap();
        cmd_embed(&ctx).unwrap();
        let err = cmd_cluster(&ctx).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "only 24 candidates remain: {err}");
    }

    #[test]
    fn overrides_patch_dotted_fields() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &PlantedSpec::default());
        let config_path = dir.path().join("config.json");
        fs::write(&config_path, small_config().to_string()).unwrap();
        let ctx = PipelineContext::load(
            &config_path,
            &[
                ("corpus.min_count".into(), "2".into()),
                ("lexicon.mode".into(), "model".into()),
                ("seed".into(), "99".into()),
            ],
            RunOptions::default(),
        )
        .unwrap();
        assert_eq!(ctx.config.corpus.min_count, 2);
        assert_eq!(ctx.config.lexicon.mode, LabelingMode::Model);
        assert_eq!(ctx.config.seed, 99);
    }

    #[test]
    fn relabeling_with_force_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &PlantedSpec {
                sentences_per_topic: 20,
                ..PlantedSpec::default()
            },
        );
        let ctx = context_in(dir.path());
        cmd_preprocess(&ctx).unwrap();
        cmd_embed(&ctx).unwrap();
        cmd_cluster(&ctx).unwrap();
        cmd_train(&ctx).unwrap();
        cmd_lexicon(&ctx).unwrap();
        cmd_label(&ctx).unwrap();
        let first = fs::read(ctx.artifact_path(LABELS_FILE)).unwrap();

        let forced = PipelineContext::load(
            &dir.path().join("config.json"),
            &[],
            RunOptions {
                force: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        cmd_label(&forced).unwrap();
        let second = fs::read(ctx.artifact_path(LABELS_FILE)).unwrap();
        assert_eq!(first, second);
    }
}
