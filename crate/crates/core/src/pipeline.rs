//! Experiment configuration and the artifact-producing pipeline stages.
//!
//! Each stage reads declared input files, writes exactly one primary
//! artifact, and records a run manifest next to it (`<output>.manifest.json`)
//! holding the content hashes of its inputs and output, the config hash, the
//! seed and the tool version. Outputs are never overwritten unless the caller
//! passes `force`.
//!
//! The in-memory helpers ([`prepare_data`], [`train_deepfm`], ...) run the
//! same computations without touching the filesystem.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{train_linear, LinearConfig, LinearModel};
use crate::datagen::{generate_corpus, is_holdout, Corpus, GenConfig};
use crate::eval::{bench_block, benchmark, evaluate, eval_pairs, report_table, BenchReport, EvalConfig, EvalReport, Scorer, Slice};
use crate::features::{
    featurize, fit_on_blocks, FeatureSchema, FeaturizedCorpus, DEFAULT_BUCKET_WIDTH, DEFAULT_OUTLIER_MARGIN,
};
use crate::hashing::sha256_hex;
use crate::model::{init_model, DeepFmModel, ModelArtifact, ModelConfig};
use crate::pairs::{make_pairs, read_pairs_jsonl, write_pairs_jsonl, OrderedPair, PairConfig};
use crate::prune::{finetune_after_prune, prune, sample_audit_items, PruneReport, DEFAULT_THRESHOLD, MIN_AUDIT_ITEMS};
use crate::train::{train_monitored, EpochRecord, HeldOut, TrainConfig};
use crate::{Error, Result};

pub const TOOL_NAME: &str = "rankdfm";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FORMAT: &str = "rankdfm-manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub bucket_width: f64,
    pub outlier_margin: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            bucket_width: DEFAULT_BUCKET_WIDTH,
            outlier_margin: DEFAULT_OUTLIER_MARGIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub threshold: f64,
    pub audit_items: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            audit_items: MIN_AUDIT_ITEMS,
            finetune_epochs: 1,
            seed: 41,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Every `holdout_every`-th pair of query ids goes to the eval split.
    pub holdout_every: u64,
    pub gen: GenConfig,
    pub features: FeatureConfig,
    pub pairs: PairConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub eval: EvalConfig,
    pub baseline: LinearConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            holdout_every: 5,
            gen: GenConfig::default(),
            features: FeatureConfig::default(),
            pairs: PairConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
            eval: EvalConfig::default(),
            baseline: LinearConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map(|s| format!("line {}", text[..s.start.min(text.len())].lines().count().max(1)))
                .unwrap_or_else(|| "<config>".into());
            Error::config(path, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text`, then applies `dotted.key=value` overrides on top. A
    /// value that is not valid TOML is taken as a bare string.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Self::from_toml(text);
        }
        let Ok(mut root) = text.parse::<toml::Table>() else {
            // Reports the syntax error with its line number.
            return Self::from_toml(text);
        };
        for entry in overrides {
            let (key, raw) = entry
                .split_once('=')
                .ok_or_else(|| Error::config(entry.clone(), "override must look like `section.key=value`"))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
            let mut table = &mut root;
            for part in parts {
                let slot = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = slot
                    .as_table_mut()
                    .ok_or_else(|| Error::config(key, format!("`{part}` is not a section")))?;
            }
            table.insert(leaf.to_string(), value);
        }
        let cfg: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<override>", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(Some(path), &[])
    }

    /// Loads the file at `path` (defaults when `None`) and applies overrides.
    pub fn load_with(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(path) => fs::read_to_string(path).map_err(|e| Error::Artifact {
                path: path.to_path_buf(),
                reason: format!("cannot read config: {e}"),
            })?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.holdout_every < 2 {
            return Err(Error::config("holdout_every", "must be at least 2"));
        }
        self.gen.validate()?;
        let w = self.features.bucket_width;
        if !(w > 0.0 && w < 1.0) {
            return Err(Error::config("features.bucket_width", format!("{w} outside (0, 1)")));
        }
        if !(self.features.outlier_margin >= 0.0 && self.features.outlier_margin.is_finite()) {
            return Err(Error::config("features.outlier_margin", "must be finite and non-negative"));
        }
        self.pairs.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.prune.threshold) {
            return Err(Error::config("prune.threshold", "must lie in [0, 1)"));
        }
        if self.prune.audit_items < MIN_AUDIT_ITEMS {
            return Err(Error::config(
                "prune.audit_items",
                format!("at least {MIN_AUDIT_ITEMS} items are audited"),
            ));
        }
        self.eval.validate()?;
        if let Some(&n) = self.eval.recall_at.iter().find(|&&n| n > self.gen.candidates_per_query) {
            return Err(Error::config(
                "eval.recall_at",
                format!("N = {n} exceeds the candidate-set size"),
            ));
        }
        if self.eval.keep_k > self.gen.candidates_per_query {
            return Err(Error::config("eval.keep_k", "exceeds the candidate-set size"));
        }
        self.baseline.validate()?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

// In-memory pipeline.

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub corpus: Corpus,
    pub schema: FeatureSchema,
    pub train: FeaturizedCorpus,
    pub eval: FeaturizedCorpus,
    pub pairs: Vec<OrderedPair>,
}

pub fn fit_features(cfg: &PipelineConfig, corpus: &Corpus) -> Result<FeatureSchema> {
    let (train, _) = corpus.split(cfg.holdout_every);
    if train.is_empty() {
        return Err(Error::Precondition("no training queries to fit the schema on".into()));
    }
    let mut schema = fit_on_blocks(&train, &corpus.field_decls(), cfg.features.bucket_width)?;
    schema.outlier_margin = cfg.features.outlier_margin;
    Ok(schema)
}

pub fn split(cfg: &PipelineConfig, featurized: &FeaturizedCorpus) -> (FeaturizedCorpus, FeaturizedCorpus) {
    let h = cfg.holdout_every;
    (
        featurized.filter(|q| !is_holdout(q.query_id, h)),
        featurized.filter(|q| is_holdout(q.query_id, h)),
    )
}

pub fn build_pairs(config: &PairConfig, train: &FeaturizedCorpus) -> Result<Vec<OrderedPair>> {
    let mut out = Vec::new();
    for q in &train.queries {
        out.extend(make_pairs(&q.scored_set(), config)?);
    }
    Ok(out)
}

pub fn prepare_data(cfg: &PipelineConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.gen, cfg.seed)?;
    prepare_from_corpus(cfg, corpus)
}

/// Fits features, featurizes, splits and draws pairs for an existing corpus.
pub fn prepare_from_corpus(cfg: &PipelineConfig, corpus: Corpus) -> Result<PreparedData> {
    let schema = fit_features(cfg, &corpus)?;
    let featurized = featurize(&schema, &corpus)?;
    let (train, eval) = split(cfg, &featurized);
    if eval.queries.is_empty() {
        return Err(Error::Precondition("the eval split is empty".into()));
    }
    let pairs = build_pairs(&cfg.pairs, &train)?;
    Ok(PreparedData {
        corpus,
        schema,
        train,
        eval,
        pairs,
    })
}

/// Initializes and trains a DeepFM on the prepared data, logging held-out
/// pair accuracy per epoch.
pub fn train_deepfm(cfg: &PipelineConfig, data: &PreparedData) -> Result<(DeepFmModel, Vec<EpochRecord>)> {
    let mut model = init_model(&data.schema, &cfg.model)?;
    let heldout_pairs = eval_pairs(&data.eval, &cfg.eval.pairs)?;
    let trace = train_monitored(
        &mut model,
        &data.pairs,
        &data.train,
        &cfg.train,
        Some(HeldOut {
            corpus: &data.eval,
            pairs: &heldout_pairs,
        }),
    )?;
    Ok((model, trace))
}

pub struct PruneOutcome {
    pub pruned: DeepFmModel,
    pub report: PruneReport,
    pub finetuned: DeepFmModel,
    pub finetune_trace: Vec<EpochRecord>,
}

pub fn prune_and_finetune(cfg: &PipelineConfig, data: &PreparedData, model: &DeepFmModel) -> Result<PruneOutcome> {
    let audit = sample_audit_items(&data.train, cfg.prune.audit_items, cfg.prune.seed);
    let (pruned, report) = prune(model, cfg.prune.threshold, &audit)?;
    let mut finetuned = pruned.clone();
    let finetune_trace = finetune_after_prune(&mut finetuned, &data.pairs, &data.train, &cfg.train, cfg.prune.finetune_epochs)?;
    Ok(PruneOutcome {
        pruned,
        report,
        finetuned,
        finetune_trace,
    })
}

pub fn train_baseline(cfg: &PipelineConfig, data: &PreparedData) -> Result<LinearModel> {
    train_linear(&data.schema, &data.train, &cfg.baseline)
}

// Artifacts and manifests.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: Vec<FileDigest>,
    pub output: FileDigest,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// A sibling path of `output` with `suffix` appended to its file name.
pub fn sidecar_path(output: &Path, suffix: &str) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    output.with_file_name(name)
}

fn artifact_err(path: &Path, reason: impl ToString) -> Error {
    Error::Artifact {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| artifact_err(path, format!("cannot read: {e}")))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_bytes(path)?).map_err(|_| artifact_err(path, "not valid UTF-8"))
}

/// Maps a parse failure onto the file it came from.
fn parsed<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { .. } | Error::Io(_) => artifact_err(path, e),
        other => other,
    })
}

fn check_writable(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(artifact_err(path, "output exists; pass --force to overwrite"));
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| artifact_err(dir, format!("cannot create directory: {e}")))?;
    }
    fs::write(path, bytes).map_err(|e| artifact_err(path, format!("cannot write: {e}")))
}

fn digest(path: &Path, bytes: &[u8]) -> FileDigest {
    FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(bytes),
    }
}

/// Loaded inputs remember their digests for the manifest.
struct Inputs(Vec<FileDigest>);

impl Inputs {
    fn new() -> Self {
        Inputs(Vec::new())
    }

    fn bytes(&mut self, path: &Path) -> Result<Vec<u8>> {
        let b = read_bytes(path)?;
        self.0.push(digest(path, &b));
        Ok(b)
    }

    fn corpus(&mut self, path: &Path) -> Result<Corpus> {
        let b = self.bytes(path)?;
        parsed(path, Corpus::read_jsonl(BufReader::new(&b[..])))
    }

    fn schema(&mut self, path: &Path) -> Result<FeatureSchema> {
        let b = self.bytes(path)?;
        let text = String::from_utf8(b).map_err(|_| artifact_err(path, "not valid UTF-8"))?;
        parsed(path, FeatureSchema::from_json(&text))
    }

    fn featurized(&mut self, path: &Path, schema: &FeatureSchema) -> Result<(FeaturizedCorpus, String)> {
        let b = self.bytes(path)?;
        let hash = sha256_hex(&b);
        let fc = parsed(path, FeaturizedCorpus::read_jsonl(BufReader::new(&b[..])))?;
        if fc.schema_hash != schema.hash() {
            return Err(artifact_err(path, "featurized corpus was built with a different schema"));
        }
        Ok((fc, hash))
    }

    fn pairs(&mut self, path: &Path, featurized_hash: &str) -> Result<Vec<OrderedPair>> {
        let b = self.bytes(path)?;
        let (header, pairs) = parsed(path, read_pairs_jsonl(BufReader::new(&b[..])))?;
        if header.corpus_hash != featurized_hash {
            return Err(artifact_err(path, "pairs were drawn from a different featurized corpus"));
        }
        Ok(pairs)
    }

    fn model(&mut self, path: &Path, schema: &FeatureSchema) -> Result<ModelArtifact> {
        let text = String::from_utf8(self.bytes(path)?).map_err(|_| artifact_err(path, "not valid UTF-8"))?;
        ModelArtifact::from_json_for_schema(&text, schema).map_err(|e| artifact_err(path, e))
    }

    fn deepfm(&mut self, path: &Path, schema: &FeatureSchema) -> Result<DeepFmModel> {
        match self.model(path, schema)? {
            ModelArtifact::DeepFm(m) => Ok(m),
            other => Err(artifact_err(path, format!("expected a deepfm model, found {}", other.kind()))),
        }
    }
}

/// What a stage produced, for the caller to print.
#[derive(Clone, Debug, Serialize)]
pub struct StageOutput {
    pub command: String,
    pub output: FileDigest,
    pub manifest: PathBuf,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
}

struct Stage<'a> {
    cfg: &'a PipelineConfig,
    command: &'static str,
    output: &'a Path,
    force: bool,
}

impl Stage<'_> {
    fn begin<'a>(cfg: &'a PipelineConfig, command: &'static str, output: &'a Path, force: bool) -> Result<Stage<'a>> {
        check_writable(output, force)?;
        check_writable(&manifest_path(output), force)?;
        Ok(Stage {
            cfg,
            command,
            output,
            force,
        })
    }

    fn sidecar(&self, suffix: &str, bytes: &[u8]) -> Result<()> {
        let path = sidecar_path(self.output, suffix);
        check_writable(&path, self.force)?;
        write_bytes(&path, bytes)
    }

    fn finish(self, bytes: &[u8], inputs: Inputs, summary: serde_json::Value) -> Result<StageOutput> {
        write_bytes(self.output, bytes)?;
        let output = digest(self.output, bytes);
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            tool: TOOL_NAME.into(),
            tool_version: TOOL_VERSION.into(),
            command: self.command.into(),
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            inputs: inputs.0,
            output: output.clone(),
            extra: summary.clone(),
        };
        let path = manifest_path(self.output);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_bytes(&path, text.as_bytes())?;
        Ok(StageOutput {
            command: self.command.into(),
            output,
            manifest: path,
            summary,
        })
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("summary serializes")
}

fn jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn stage_gen(cfg: &PipelineConfig, output: &Path, force: bool) -> Result<StageOutput> {
    cfg.validate()?;
    let stage = Stage::begin(cfg, "gen", output, force)?;
    let corpus = generate_corpus(&cfg.gen, cfg.seed)?;
    let bytes = corpus.to_jsonl_bytes();
    let summary = serde_json::json!({
        "queries": corpus.blocks.len(),
        "candidates": corpus.blocks.iter().map(|b| b.candidates.len()).sum::<usize>(),
        "distinct_items": corpus.items().len(),
    });
    stage.finish(&bytes, Inputs::new(), summary)
}

pub fn stage_fit_features(cfg: &PipelineConfig, corpus: &Path, output: &Path, force: bool) -> Result<StageOutput> {
    cfg.validate()?;
    let stage = Stage::begin(cfg, "fit-features", output, force)?;
    let mut inputs = Inputs::new();
    let corpus = inputs.corpus(corpus)?;
    let schema = fit_features(cfg, &corpus)?;
    let summary = serde_json::json!({ "schema_hash": schema.hash(), "fields": schema.num_fields() });
    stage.finish(schema.to_json().as_bytes(), inputs, summary)
}

pub fn stage_transform(cfg: &PipelineConfig, corpus: &Path, schema: &Path, output: &Path, force: bool) -> Result<StageOutput> {
    cfg.validate()?;
    let stage = Stage::begin(cfg, "transform", output, force)?;
    let mut inputs = Inputs::new();
    let schema_v = inputs.schema(schema)?;
    let corpus_path = corpus;
    let corpus = inputs.corpus(corpus_path)?;
    let fc = featurize(&schema_v, &corpus).map_err(|e| match e {
        Error::ModelMismatch(reason) => artifact_err(schema, reason),
        other => other,
    })?;
    let mut bytes = Vec::new();
    fc.write_jsonl(&mut bytes)?;
    let summary = serde_json::json!({ "queries": fc.queries.len(), "items": fc.num_items() });
    stage.finish(&bytes, inputs, summary)
}

pub fn stage_make_pairs(
    cfg: &PipelineConfig,
    schema: &Path,
    featurized: &Path,
    output: &Path,
    force: bool,
) -> Result<StageOutput> {
    cfg.validate()?;
    let stage = Stage::begin(cfg, "make-pairs", output, force)?;
    let mut inputs = Inputs::new();
    let schema = inputs.schema(schema)?;
    let (fc, fc_hash) = inputs.featurized(featurized, &schema)?;
    let (train, _) = split(cfg, &fc);
    let pairs = build_pairs(&cfg.pairs, &train)?;
    let mut bytes = Vec::new();
    write_pairs_jsonl(&mut bytes, &cfg.pairs, &fc_hash, &pairs)?;
    let summary = serde_json::json!({ "pairs": pairs.len(), "scheme": cfg.pairs.scheme });
    stage.finish(&bytes, inputs, summary)
}

pub fn stage_train(
    cfg: &PipelineConfig,
    schema: &Path,
    featurized: &Path,
    pairs: &Path,
    output: &Path,
    force: bool,
) -> Result<StageOutput> {
    cfg.validate()?;
    let stage = Stage::begin(cfg, "train", output, force)?;
    let mut inputs = Inputs::new();
    let schema = inputs.schema(schema)?;
    let (fc, fc_hash) = inputs.featurized(featurized, &schema)?;
    let pairs = inputs.pairs(pairs, &fc_hash)?;
    let (train, eval) = split(cfg, &fc);
    let heldout = if eval.queries.is_empty() {
        Vec::new()
    } else {
        eval_pairs(&eval, &cfg.eval.pairs)?
    };
    let mut model = init_model(&schema, &cfg.model)?;
    let trace = train_monitored(
        &mut model,
        &pairs,
        &train,
        &cfg.train,
        (!heldout.is_empty()).then_some(HeldOut {
            corpus: &eval,
            pairs: &heldout,
        }),
    )?;
    stage.sidecar(".metrics.jsonl", &jsonl(&trace))?;
    let summary = to_value(&trace.last());
    stage.finish(ModelArtifact::DeepFm(model).to_json().as_bytes(), inputs, summary)
}

pub fn stage_train_baseline(
    cfg: &PipelineConfig,
    schema: &Path,
    featurized: &Path,
    output: &Path,
    force: bool,
) -> Result<StageOutput> {
    cfg.validate()?;
    let stage = Stage::begin(cfg, "train-baseline", output, force)?;
    let mut inputs = Inputs::new();
    let schema = inputs.schema(schema)?;
    let (fc, _) = inputs.featurized(featurized, &schema)?;
    let (train, _) = split(cfg, &fc);
    let model = train_linear(&schema, &train, &cfg.baseline)?;
    stage.finish(ModelArtifact::Linear(model).to_json().as_bytes(), inputs, serde_json::Value::Null)
}

pub fn stage_prune(
    cfg: &PipelineConfig,
    schema: &Path,
    model: &Path,
    featurized: &Path,
    output: &Path,
    force: bool,
) -> Result<StageOutput> {
    cfg.validate()?;
    let stage = Stage::begin(cfg, "prune", output, force)?;
    let mut inputs = Inputs::new();
    let schema = inputs.schema(schema)?;
    let model = inputs.deepfm(model, &schema)?;
    let (fc, _) = inputs.featurized(featurized, &schema)?;
    let (train, _) = split(cfg, &fc);
    let audit = sample_audit_items(&train, cfg.prune.audit_items, cfg.prune.seed);
    let (pruned, report) = prune(&model, cfg.prune.threshold, &audit)?;
    stage.sidecar(".report.json", (serde_json::to_string_pretty(&report).expect("report serializes") + "\n").as_bytes())?;
    stage.finish(ModelArtifact::DeepFm(pruned).to_json().as_bytes(), inputs, to_value(&report))
}

#[allow(clippy::too_many_arguments)]
pub fn stage_finetune(
    cfg: &PipelineConfig,
    schema: &Path,
    model: &Path,
    featurized: &Path,
    pairs: &Path,
    output: &Path,
    force: bool,
) -> Result<StageOutput> {
    cfg.validate()?;
    let stage = Stage::begin(cfg, "finetune", output, force)?;
    let mut inputs = Inputs::new();
    let schema = inputs.schema(schema)?;
    let mut model = inputs.deepfm(model, &schema)?;
    let (fc, fc_hash) = inputs.featurized(featurized, &schema)?;
    let pairs = inputs.pairs(pairs, &fc_hash)?;
    let (train, _) = split(cfg, &fc);
    let trace = finetune_after_prune(&mut model, &pairs, &train, &cfg.train, cfg.prune.finetune_epochs)?;
    stage.sidecar(".metrics.jsonl", &jsonl(&trace))?;
    stage.finish(ModelArtifact::DeepFm(model).to_json().as_bytes(), inputs, to_value(&trace.last()))
}

/// Eval-split reports, one per slice.
pub fn evaluate_artifact(cfg: &PipelineConfig, model: &ModelArtifact, featurized: &FeaturizedCorpus) -> Result<Vec<EvalReport>> {
    let (_, eval) = split(cfg, featurized);
    if eval.queries.is_empty() {
        return Err(Error::Eval("the eval split has no queries".into()));
    }
    evaluate(model, &eval, &cfg.eval)
}

pub fn stage_eval(
    cfg: &PipelineConfig,
    schema: &Path,
    model: &Path,
    featurized: &Path,
    output: &Path,
    force: bool,
) -> Result<StageOutput> {
    cfg.validate()?;
    let stage = Stage::begin(cfg, "eval", output, force)?;
    let mut inputs = Inputs::new();
    let schema = inputs.schema(schema)?;
    let model = inputs.model(model, &schema)?;
    let (fc, _) = inputs.featurized(featurized, &schema)?;
    let reports = evaluate_artifact(cfg, &model, &fc)?;
    stage.sidecar(".tsv", report_table(&reports).as_bytes())?;
    let text = serde_json::to_string_pretty(&reports).expect("report serializes") + "\n";
    stage.finish(text.as_bytes(), inputs, serde_json::Value::Null)
}

pub fn bench_artifact(cfg: &PipelineConfig, model: &ModelArtifact, featurized: &FeaturizedCorpus) -> Result<BenchReport> {
    let (_, eval) = split(cfg, featurized);
    let source = if eval.queries.is_empty() { featurized } else { &eval };
    let block = bench_block(source, cfg.eval.bench_items);
    benchmark(model, &block, featurized.num_fields, cfg.eval.bench_repetitions)
}

/// Writes the benchmark report. Latency is wall-clock, so this artifact is
/// the one output that is not reproducible byte for byte.
pub fn stage_bench(
    cfg: &PipelineConfig,
    schema: &Path,
    model: &Path,
    featurized: &Path,
    output: &Path,
    force: bool,
) -> Result<StageOutput> {
    cfg.validate()?;
    let stage = Stage::begin(cfg, "bench", output, force)?;
    let mut inputs = Inputs::new();
    let schema = inputs.schema(schema)?;
    let model = inputs.model(model, &schema)?;
    let (fc, _) = inputs.featurized(featurized, &schema)?;
    let report = bench_artifact(cfg, &model, &fc)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    stage.finish(text.as_bytes(), inputs, serde_json::Value::Null)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub kind: String,
    pub slice: Slice,
    pub recall_at: std::collections::BTreeMap<usize, f64>,
    pub pairwise_accuracy: f64,
    pub multiply_count: u64,
    pub mean_latency_us: f64,
}

/// Evaluates every model on the eval split (slice `all`) and benchmarks it.
pub fn compare_models(
    cfg: &PipelineConfig,
    schema_path: &Path,
    models: &[(String, PathBuf)],
    featurized: &Path,
) -> Result<Vec<CompareRow>> {
    cfg.validate()?;
    compare_with(cfg, &mut Inputs::new(), schema_path, models, featurized)
}

fn compare_with(
    cfg: &PipelineConfig,
    inputs: &mut Inputs,
    schema_path: &Path,
    models: &[(String, PathBuf)],
    featurized: &Path,
) -> Result<Vec<CompareRow>> {
    if models.is_empty() {
        return Err(Error::Precondition("compare needs at least one model".into()));
    }
    let schema = inputs.schema(schema_path)?;
    let (fc, _) = inputs.featurized(featurized, &schema)?;
    models
        .iter()
        .map(|(label, path)| {
            let model = inputs.model(path, &schema)?;
            let reports = evaluate_artifact(cfg, &model, &fc)?;
            let all = reports
                .into_iter()
                .find(|r| r.slice == Slice::All)
                .expect("evaluate reports every slice");
            let bench = bench_artifact(cfg, &model, &fc)?;
            Ok(CompareRow {
                label: label.clone(),
                kind: model.kind().into(),
                slice: Slice::All,
                recall_at: all.recall_at,
                pairwise_accuracy: all.pairwise_accuracy,
                multiply_count: model.multiply_count(),
                mean_latency_us: bench.mean_latency_us,
            })
        })
        .collect()
}

/// Writes the comparison rows as JSON. Like the benchmark, the latency
/// column is wall-clock.
pub fn stage_compare(
    cfg: &PipelineConfig,
    schema: &Path,
    models: &[(String, PathBuf)],
    featurized: &Path,
    output: &Path,
    force: bool,
) -> Result<(StageOutput, Vec<CompareRow>)> {
    cfg.validate()?;
    let stage = Stage::begin(cfg, "compare", output, force)?;
    let mut inputs = Inputs::new();
    let rows = compare_with(cfg, &mut inputs, schema, models, featurized)?;
    let text = serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n";
    let out = stage.finish(text.as_bytes(), inputs, serde_json::Value::Null)?;
    Ok((out, rows))
}

/// Human-readable side-by-side table of compared models.
pub fn compare_table(rows: &[CompareRow]) -> String {
    use std::fmt::Write as _;
    let ns: Vec<usize> = rows.first().map(|r| r.recall_at.keys().copied().collect()).unwrap_or_default();
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:<7}", "model", "kind");
    for n in &ns {
        let _ = write!(out, "  {:>9}", format!("recall@{n}"));
    }
    let _ = writeln!(out, "  {:>8}  {:>10}  {:>10}", "pair_acc", "multiplies", "latency_us");
    for r in rows {
        let _ = write!(out, "{:<width$}  {:<7}", r.label, r.kind);
        for n in &ns {
            let _ = write!(out, "  {:>9.4}", r.recall_at.get(n).copied().unwrap_or(f64::NAN));
        }
        let _ = writeln!(
            out,
            "  {:>8.4}  {:>10}  {:>10.3}",
            r.pairwise_accuracy, r.multiply_count, r.mean_latency_us
        );
    }
    out
}

/// Writes `text` to `path` unless it exists and `force` is false.
pub fn write_output(path: &Path, text: &str, force: bool) -> Result<()> {
    check_writable(path, force)?;
    let mut f = BufWriter::new(fs::File::create(path).map_err(|e| artifact_err(path, format!("cannot write: {e}")))?);
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Reads a manifest back, for provenance checks.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| artifact_err(path, e))
}
