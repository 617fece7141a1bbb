//! End-to-end experiment driver: tokenizer, pretraining, finetuning,
//! optional cross-encoder reranker, indexing, search and evaluation, all from
//! one JSON config.
//!
//! Every stage writes under `<output_dir>/<stage>/`. `manifest.json` at the
//! root records the resolved config, its SHA-256, the seed, and the SHA-256
//! of every artifact; it holds no timestamps so identical configs give
//! identical manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_collection, load_qrels, load_queries, load_triplets, Collection};
use crate::encoder::{load_checkpoint, save_checkpoint, EncoderConfig, EncoderModel, TransformInit};
use crate::error::{Error, Result};
use crate::evaluation::{comparison_table, ComparisonTable, MetricReport, Qrels, SignificanceMatrix};
use crate::finetuning::{
    finetune_cross, finetune_dense, finetune_sparse, write_finetune_log, FinetuneConfig, FinetuneKind,
};
use crate::index::{build_index, estimate_rflops, mean_nonzeros, write_trec_run, DenseIndex, Run};
use crate::pretraining::{pretrain, write_loss_log, PretrainConfig, PretrainMode};
use crate::repr::SparseVector;
use crate::retrieval::{
    default_metrics, dense_run, encode_dense_all, encode_sparse_all, evaluate_run, rerank_run, sparse_run, MetricSpec,
};
use crate::tokenizer::{train_wordpiece, Vocab};

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
pub const REPORT_FILE: &str = "report.json";

pub const STAGES: [&str; 7] = ["tokenizer", "pretrain", "finetune", "rerank", "index", "search", "evaluate"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Collection TSV, also the pretraining corpus.
    pub corpus: PathBuf,
    /// Training queries referenced by the triplets.
    pub queries: PathBuf,
    /// Queries to evaluate on; defaults to `queries`.
    #[serde(default)]
    pub eval_queries: Option<PathBuf>,
    pub qrels: PathBuf,
    pub triplets: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    /// Truncation length of every single-text sequence.
    pub max_len: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { vocab_size: 2048, max_len: 64 }
    }
}

/// Encoder shape; the vocabulary size comes from the tokenizer section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub tie_mlm_head: bool,
    pub mlm_transform_init: TransformInit,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { num_layers: 2, num_heads: 1, hidden_dim: 64, ffn_dim: 256, max_positions: 128,
            tie_mlm_head: true,
            mlm_transform_init: TransformInit::Identity,
        }
    }
}

/// Pretraining schedule; sequence length comes from the tokenizer section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub mode: PretrainMode,
    pub mask_prob: f64,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub lr_warmup_steps: usize,
    pub flops_warmup_steps: usize,
    pub logits_warmup_steps: usize,
    pub lambda_flops: f64,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    /// The full schedule divided by 250, with a desk-scale learning rate,
    /// batch and FLOPS weight. At 1e-3 the regularizer is too weak to sparsify
    /// within 500 steps.
    fn default() -> Self {
        let s = PretrainConfig::scaled(250);
        Self {
            mode: PretrainMode::MlmFlops,
            mask_prob: s.mask_prob,
            learning_rate: 1e-3,
            total_steps: s.total_steps,
            lr_warmup_steps: s.lr_warmup_steps,
            flops_warmup_steps: s.flops_warmup_steps,
            logits_warmup_steps: s.logits_warmup_steps,
            lambda_flops: 3e-3,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    /// `sparse` or `dense`; cross-encoders go in the rerank section.
    pub kind: FinetuneKind,
    pub learning_rate: f64,
    pub num_negatives: usize,
    pub epochs: usize,
    pub lambda_q: f64,
    pub lambda_d: f64,
    pub use_in_batch_negatives: bool,
    pub batch_size: usize,
    pub warmup_steps: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            kind: FinetuneKind::Sparse,
            learning_rate: 3e-4,
            num_negatives: 8,
            epochs: 2,
            lambda_q: 1e-3,
            lambda_d: 1e-3,
            use_in_batch_negatives: true,
            batch_size: 16,
            warmup_steps: 25,
        }
    }
}

/// Cross-encoder trained from the pretrained checkpoint, reranking the top
/// `depth` hits of the finetuned retriever. Its head starts from random CLS
/// features, so it needs a larger rate than the bi-encoders; at 3e-4 the
/// ranking loss does not move in two epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankSection {
    pub learning_rate: f64,
    pub num_negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub depth: usize,
    pub pair_max_len: usize,
}

impl Default for RerankSection {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            num_negatives: 8,
            epochs: 2,
            batch_size: 16,
            warmup_steps: 25,
            depth: 20,
            pair_max_len: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metrics: Vec<MetricSpec>,
    pub alpha: f64,
    /// Hits retrieved per query.
    pub depth: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { metrics: default_metrics(), alpha: 0.05, depth: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub rerank: Option<RerankSection>,
    #[serde(default)]
    pub eval: EvalSection,
}

impl PipelineConfig {
    /// Default sections over the given paths.
    pub fn with_paths(paths: PathsConfig, seed: u64) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed,
            paths,
            tokenizer: TokenizerSection::default(),
            encoder: EncoderSection::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            rerank: None,
            eval: EvalSection::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file; relative paths are taken relative to the file's
    /// directory. A run manifest is accepted too and yields its config.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = if value.get("format").and_then(|f| f.as_str()) == Some(MANIFEST_FORMAT) {
            let m: Manifest = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
            m.config
        } else {
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve_against(base);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON encoding, output directory excluded so
    /// that the same experiment run in two places hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.output_dir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            num_layers: e.num_layers,
            num_heads: e.num_heads,
            hidden_dim: e.hidden_dim,
            ffn_dim: e.ffn_dim,
            vocab_size: self.tokenizer.vocab_size,
            max_positions: e.max_positions,
            tie_mlm_head: e.tie_mlm_head,
            mlm_transform_init: e.mlm_transform_init,
            seed: stage_seed(self.seed, "encoder"),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            mask_prob: p.mask_prob,
            learning_rate: p.learning_rate,
            total_steps: p.total_steps,
            lr_warmup_steps: p.lr_warmup_steps,
            flops_warmup_steps: p.flops_warmup_steps,
            logits_warmup_steps: p.logits_warmup_steps,
            lambda_flops: p.lambda_flops,
            batch_size: p.batch_size,
            max_len: self.max_len(),
            seed: stage_seed(self.seed, "pretrain"),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            learning_rate: f.learning_rate,
            num_negatives: f.num_negatives,
            epochs: f.epochs,
            lambda_q: f.lambda_q,
            lambda_d: f.lambda_d,
            use_in_batch_negatives: f.use_in_batch_negatives,
            batch_size: f.batch_size,
            max_len: self.max_len(),
            warmup_steps: f.warmup_steps,
            seed: stage_seed(self.seed, "finetune"),
        }
    }

    pub fn rerank_config(&self) -> Option<FinetuneConfig> {
        self.rerank.as_ref().map(|r| FinetuneConfig {
            learning_rate: r.learning_rate,
            num_negatives: r.num_negatives,
            epochs: r.epochs,
            lambda_q: 0.0,
            lambda_d: 0.0,
            use_in_batch_negatives: false,
            batch_size: r.batch_size,
            max_len: r.pair_max_len.min(self.encoder.max_positions),
            warmup_steps: r.warmup_steps,
            seed: stage_seed(self.seed, "rerank"),
        })
    }

    /// Single-text sequence length, capped by the position table.
    pub fn max_len(&self) -> usize {
        self.tokenizer.max_len.min(self.encoder.max_positions)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        if self.finetune.kind == FinetuneKind::Cross {
            return bad("finetune.kind must be sparse or dense; configure cross-encoders under rerank".into());
        }
        if self.eval.metrics.is_empty() || self.eval.depth == 0 {
            return bad("eval needs at least one metric and a positive depth".into());
        }
        if self.eval.metrics.iter().any(|m| m.k == 0) {
            return bad("metric cutoffs must be positive".into());
        }
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) {
            return bad("eval.alpha must be in (0, 1)".into());
        }
        if let Some(r) = &self.rerank {
            if r.depth == 0 || r.pair_max_len < 3 {
                return bad("rerank.depth must be positive and pair_max_len >= 3".into());
            }
        }
        self.encoder_config().validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config().validate()?;
        if let Some(r) = self.rerank_config() {
            r.validate()?;
        }
        Ok(())
    }

    /// Existence of every input file.
    pub fn check_paths(&self) -> Result<()> {
        let p = &self.paths;
        let inputs = [Some(&p.corpus), Some(&p.queries), p.eval_queries.as_ref(), Some(&p.qrels), Some(&p.triplets)];
        for path in inputs.into_iter().flatten() {
            if !path.is_file() {
                return Err(Error::Config(format!("input {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

impl PathsConfig {
    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.queries);
        if let Some(e) = self.eval_queries.as_mut() {
            fix(e);
        }
        fix(&mut self.qrels);
        fix(&mut self.triplets);
        fix(&mut self.output_dir);
    }
}

/// Per-stage seed: the global seed mixed with a hash of the stage name.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let h = Sha256::digest(stage.as_bytes());
    seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| Error::io(path, e))
}

const MANIFEST_FORMAT: &str = "scratch-ir-manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Reused,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    /// Path relative to the output directory -> SHA-256.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    #[serde(default)]
    pub error: Option<String>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Every artifact checksum, keyed by relative path.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.stages.iter().flat_map(|s| s.artifacts.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Allow replacing existing stage outputs.
    pub force: bool,
    /// Reuse the tokenizer and pretrained checkpoint of a previous run in the
    /// same directory after verifying their checksums.
    pub skip_pretrain: bool,
}

/// Holds the experiment directory for one process; removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string()).map_err(|e| Error::io(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another process (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Metrics and efficiency figures of one evaluated system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub name: String,
    pub metrics: Vec<MetricReport>,
    /// Present for sparse systems.
    pub rflops: Option<f64>,
    pub mean_doc_nonzeros: Option<f64>,
    pub mean_query_nonzeros: Option<f64>,
}

impl SystemReport {
    pub fn metric(&self, label: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.label() == label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_sha256: String,
    /// In run order: pretrained, finetuned, then reranked when configured.
    pub systems: Vec<SystemReport>,
    pub table: ComparisonTable,
    pub significance: Vec<SignificanceMatrix>,
}

impl ExperimentReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn system(&self, name: &str) -> Option<&SystemReport> {
        self.systems.iter().find(|s| s.name == name)
    }

    /// The last system of the run: reranked if present, else finetuned.
    pub fn final_system(&self) -> &SystemReport {
        self.systems.last().expect("reports hold at least two systems")
    }
}

/// What a pipeline run produced.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
    pub report: ExperimentReport,
}

struct Inputs {
    collection: Collection,
    train_queries: Collection,
    eval_queries: Collection,
    qrels: Qrels,
    triplets: crate::data::Triplets,
}

fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    let p = &cfg.paths;
    let collection = load_collection(&p.corpus)?;
    let train_queries = load_queries(&p.queries)?;
    let eval_queries = match &p.eval_queries {
        Some(e) => load_queries(e)?,
        None => train_queries.clone(),
    };
    let qrels = load_qrels(&p.qrels)?;
    let triplets = load_triplets(&p.triplets)?;
    Ok(Inputs { collection, train_queries, eval_queries, qrels, triplets })
}

struct Runner {
    dir: PathBuf,
    manifest: Manifest,
}

impl Runner {
    fn stage_dir(&self, stage: &str) -> Result<PathBuf> {
        let d = self.dir.join(stage);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Runs one stage, checksumming the files it reports; failures are
    /// recorded in the manifest before being returned.
    fn stage<O>(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<(O, Vec<PathBuf>)>) -> Result<O> {
        log::info!("stage {name}");
        let result = self.stage_dir(name).and_then(|d| f(&d)).and_then(|(out, files)| {
            let mut artifacts = BTreeMap::new();
            for file in files {
                let rel = file.strip_prefix(&self.dir).unwrap_or(&file).to_string_lossy().replace('\\', "/");
                artifacts.insert(rel, sha256_file(&file)?);
            }
            Ok((out, artifacts))
        });
        match result {
            Ok((out, artifacts)) => {
                self.manifest.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Completed,
                    artifacts,
                    error: None,
                });
                self.write_manifest()?;
                Ok(out)
            }
            Err(e) => {
                let msg = e.to_string();
                self.manifest.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Failed,
                    artifacts: BTreeMap::new(),
                    error: Some(msg.clone()),
                });
                self.manifest.error = Some(format!("stage {name}: {msg}"));
                self.write_manifest()?;
                Err(Error::Stage { stage: name.into(), source: Box::new(e) })
            }
        }
    }
}

fn stage_error(stage: &str, e: Error) -> Error {
    Error::Stage { stage: stage.into(), source: Box::new(e) }
}

/// Tokenizer and pretraining sections must match for a reused checkpoint to
/// be valid.
fn same_pretraining(a: &PipelineConfig, b: &PipelineConfig) -> bool {
    a.seed == b.seed
        && a.tokenizer == b.tokenizer
        && a.encoder == b.encoder
        && a.pretrain == b.pretrain
        && a.paths.corpus == b.paths.corpus
}

fn reuse_pretraining(dir: &Path, cfg: &PipelineConfig) -> Result<Vec<StageRecord>> {
    let old = Manifest::load(dir.join(MANIFEST_FILE))?;
    if !same_pretraining(&old.config, cfg) {
        return Err(Error::Config(
            "--skip-pretrain needs the tokenizer, encoder, pretrain sections, corpus and seed of the previous run".into(),
        ));
    }
    let mut records = Vec::new();
    for name in ["tokenizer", "pretrain"] {
        let rec = old
            .stage(name)
            .filter(|r| r.status != StageStatus::Failed)
            .ok_or_else(|| Error::Config(format!("previous run has no completed {name} stage")))?;
        for (rel, sum) in &rec.artifacts {
            let actual = sha256_file(dir.join(rel))?;
            if &actual != sum {
                return Err(Error::Config(format!("checksum mismatch for {rel}: manifest {sum}, file {actual}")));
            }
        }
        records.push(StageRecord { status: StageStatus::Reused, ..rec.clone() });
    }
    Ok(records)
}

/// Runs every stage in order. Existing outputs are replaced only with
/// `force`; `skip_pretrain` reuses the previous tokenizer and checkpoint.
pub fn run_pipeline(config: &PipelineConfig, opts: RunOptions) -> Result<PipelineOutcome> {
    config.validate()?;
    config.check_paths()?;
    let dir = config.paths.output_dir.clone();
    let _lock = DirLock::acquire(&dir)?;

    let reused = if opts.skip_pretrain { reuse_pretraining(&dir, config)? } else { Vec::new() };
    let first_written = if opts.skip_pretrain { 2 } else { 0 };
    let existing: Vec<&str> = STAGES[first_written..].iter().copied().filter(|s| dir.join(s).exists()).collect();
    if !opts.force && (!existing.is_empty() || (!opts.skip_pretrain && dir.join(MANIFEST_FILE).exists())) {
        return Err(Error::Config(format!(
            "{} already holds outputs ({}); pass --force to replace them",
            dir.display(),
            if existing.is_empty() { MANIFEST_FILE.to_string() } else { existing.join(", ") }
        )));
    }
    for s in &existing {
        let d = dir.join(s);
        fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut runner = Runner {
        dir: dir.clone(),
        manifest: Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            config_sha256: config.hash(),
            seed: config.seed,
            config: config.clone(),
            stages: reused,
            error: None,
        },
    };
    runner.write_manifest()?;

    let inputs = match load_inputs(config) {
        Ok(i) => i,
        Err(e) => {
            runner.manifest.error = Some(format!("loading inputs: {e}"));
            runner.write_manifest()?;
            return Err(e);
        }
    };
    let max_len = config.max_len();

    let (vocab, pretrained) = if opts.skip_pretrain {
        let vocab = Vocab::load(dir.join("tokenizer/vocab.txt")).map_err(|e| stage_error("tokenizer", e))?;
        let model = load_checkpoint(dir.join("pretrain/model.ckpt")).map_err(|e| stage_error("pretrain", e))?;
        if model.config() != &config.encoder_config() {
            return Err(Error::Config("reused checkpoint does not match the encoder section".into()));
        }
        (vocab, model)
    } else {
        let vocab = runner.stage("tokenizer", |d| {
            let vocab = train_wordpiece(inputs.collection.texts(), config.tokenizer.vocab_size, config.seed)?;
            let path = d.join("vocab.txt");
            vocab.save(&path)?;
            Ok((vocab, vec![path]))
        })?;
        let model = runner.stage("pretrain", |d| {
            let corpus: Vec<Vec<u32>> = inputs.collection.texts().iter().map(|t| vocab.encode(t, max_len)).collect();
            let model = EncoderModel::<f32>::new(config.encoder_config())?;
            let out = pretrain(model, &corpus, &config.pretrain_config(), config.pretrain.mode)?;
            let (ckpt, log) = (d.join("model.ckpt"), d.join("loss_log.csv"));
            save_checkpoint(&out.model, &ckpt)?;
            write_loss_log(&out.log, &log)?;
            Ok((out.model, vec![ckpt, log]))
        })?;
        (vocab, model)
    };

    let finetuned = runner.stage("finetune", |d| {
        let fcfg = config.finetune_config();
        let args = (&vocab, &inputs.triplets, &inputs.collection, &inputs.train_queries, &fcfg);
        let out = match config.finetune.kind {
            FinetuneKind::Sparse => finetune_sparse(pretrained.clone(), args.0, args.1, args.2, args.3, args.4)?,
            FinetuneKind::Dense => finetune_dense(pretrained.clone(), args.0, args.1, args.2, args.3, args.4)?,
            FinetuneKind::Cross => unreachable!("rejected by validate"),
        };
        let (ckpt, log) = (d.join("model.ckpt"), d.join("loss_log.csv"));
        save_checkpoint(&out.model, &ckpt)?;
        write_finetune_log(&out.log, &log)?;
        Ok((out.model, vec![ckpt, log]))
    })?;

    let reranker = match config.rerank_config() {
        Some(rcfg) => Some(runner.stage("rerank", |d| {
            let out = finetune_cross(
                pretrained.clone(),
                &vocab,
                &inputs.triplets,
                &inputs.collection,
                &inputs.train_queries,
                &rcfg,
            )?;
            let (ckpt, log) = (d.join("model.ckpt"), d.join("loss_log.csv"));
            save_checkpoint(&out.model, &ckpt)?;
            write_finetune_log(&out.log, &log)?;
            Ok((out.model, vec![ckpt, log]))
        })?),
        None => None,
    };

    let sparse = config.finetune.kind == FinetuneKind::Sparse;
    let systems = [("pretrained", &pretrained), ("finetuned", &finetuned)];
    // per system: run and, for sparse systems, (rflops, doc nnz, query nnz)
    let first_stage: Vec<(Run, Option<(f64, f64, f64)>)> = runner.stage("index", |d| {
        let mut files = Vec::new();
        let mut results = Vec::new();
        for (name, model) in systems {
            if sparse {
                let docs = encode_sparse_all(model, &vocab, &inputs.collection, max_len)?;
                let index = build_index(&docs, config.tokenizer.vocab_size)?;
                let path = d.join(format!("{name}.idx"));
                index.save(&path)?;
                files.push(path);
                let queries = encode_sparse_all(model, &vocab, &inputs.eval_queries, max_len)?;
                let qvecs: Vec<SparseVector> = queries.iter().map(|q| q.1.clone()).collect();
                let dvecs: Vec<SparseVector> = docs.into_iter().map(|x| x.1).collect();
                let stats = (estimate_rflops(&qvecs, &index)?, mean_nonzeros(&dvecs), mean_nonzeros(&qvecs));
                results.push((sparse_run(&index, &queries, config.eval.depth), Some(stats)));
            } else {
                let docs = encode_dense_all(model, &vocab, &inputs.collection, max_len)?;
                let index = DenseIndex::build(&docs)?;
                let path = d.join(format!("{name}.dense"));
                index.save(&path)?;
                files.push(path);
                let queries = encode_dense_all(model, &vocab, &inputs.eval_queries, max_len)?;
                results.push((dense_run(&index, &queries, config.eval.depth)?, None));
            }
        }
        Ok((results, files))
    })?;

    let mut runs: Vec<(String, Run, Option<(f64, f64, f64)>)> =
        systems.iter().zip(first_stage).map(|((n, _), (run, st))| (n.to_string(), run, st)).collect();
    runner.stage("search", |d| {
        if let (Some(model), Some(r)) = (&reranker, &config.rerank) {
            let reranked = rerank_run(
                model,
                &vocab,
                &runs[1].1,
                &inputs.eval_queries,
                &inputs.collection,
                r.depth,
                r.pair_max_len,
            )?;
            runs.push(("reranked".into(), reranked, None));
        }
        let mut files = Vec::new();
        for (name, run, _) in &runs {
            let path = d.join(format!("run.{name}.trec"));
            write_trec_run(run, name, &path)?;
            files.push(path);
        }
        Ok(((), files))
    })?;

    let report = runner.stage("evaluate", |d| {
        let qrels = inputs.qrels.restrict(inputs.eval_queries.ids().iter().map(String::as_str));
        let mut systems = Vec::new();
        for (name, run, stats) in &runs {
            systems.push(SystemReport {
                name: name.clone(),
                metrics: evaluate_run(run, &qrels, &config.eval.metrics)?,
                rflops: stats.map(|s| s.0),
                mean_doc_nonzeros: stats.map(|s| s.1),
                mean_query_nonzeros: stats.map(|s| s.2),
            });
        }
        let names: Vec<String> = systems.iter().map(|s| s.name.clone()).collect();
        let reports: Vec<Vec<MetricReport>> = systems.iter().map(|s| s.metrics.clone()).collect();
        let (table, significance) = comparison_table(&names, &reports, config.eval.alpha)?;
        let report = ExperimentReport { config_sha256: config.hash(), systems, table, significance };
        let (json, txt) = (d.join(REPORT_FILE), d.join("significance.txt"));
        fs::write(&json, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&json, e))?;
        fs::write(&txt, report.table.render()).map_err(|e| Error::io(&txt, e))?;
        Ok((report, vec![json, txt]))
    })?;

    Ok(PipelineOutcome { output_dir: dir, manifest: runner.manifest, report })
}

/// Output of [`compare`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub systems: Vec<String>,
    pub table: ComparisonTable,
    pub significance: Vec<SignificanceMatrix>,
}

/// Significance table over the final system of each run directory, named by
/// the directory's base name. Runs must cover the same queries and metrics.
pub fn compare(run_dirs: &[PathBuf], alpha: f64) -> Result<CompareReport> {
    let mut names = Vec::new();
    let mut reports = Vec::new();
    for dir in run_dirs {
        let report = ExperimentReport::load(dir.join("evaluate").join(REPORT_FILE))?;
        let base = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        names.push(base);
        reports.push(report.final_system().metrics.clone());
    }
    let (table, significance) = comparison_table(&names, &reports, alpha)?;
    Ok(CompareReport { systems: names, table, significance })
}
