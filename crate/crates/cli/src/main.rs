//! `scratch-ir`: train, index, search and evaluate from-scratch sparse and
//! dense retrievers.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. `SCRATCH_IR_THREADS` caps the worker threads.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use scratch_ir::data::{
    generate_synthetic, load_collection, load_qrels, load_queries, load_triplets, SyntheticSpec,
};
use scratch_ir::encoder::{load_checkpoint, save_checkpoint, EncoderModel};
use scratch_ir::finetuning::{finetune_cross, finetune_dense, finetune_sparse, write_finetune_log, FinetuneKind};
use scratch_ir::index::{build_index, read_trec_run, write_trec_run, DenseIndex, InvertedIndex};
use scratch_ir::pipeline::{
    compare, run_pipeline, EncoderSection, FinetuneSection, PathsConfig, PipelineConfig, PretrainSection,
    RerankSection, RunOptions, TokenizerSection, CONFIG_VERSION,
};
use scratch_ir::pretraining::{pretrain, write_loss_log, PretrainMode};
use scratch_ir::retrieval::{
    default_metrics, dense_run, encode_dense_all, encode_sparse_all, evaluate_run, rerank_run, sparse_run, MetricSpec,
};
use scratch_ir::tokenizer::{train_wordpiece, Vocab};
use scratch_ir::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "scratch-ir", version, about = "From-scratch learned sparse and dense retrieval")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic topic-retrieval task.
    GenerateSynthetic(GenerateArgs),
    /// Train a WordPiece vocabulary on a collection.
    TrainTokenizer(TokenizerArgs),
    /// Pretrain an encoder with MLM or MLM+FLOPS.
    Pretrain(PretrainArgs),
    /// Finetune a checkpoint on triplets.
    Finetune(FinetuneArgs),
    /// Encode a collection and build a sparse or dense index.
    Index(IndexArgs),
    /// Retrieve for a query set, optionally reranking with a cross-encoder.
    Search(SearchArgs),
    /// Score a run file against qrels.
    Evaluate(EvaluateArgs),
    /// Significance table over the final systems of several experiments.
    Compare(CompareArgs),
    /// Run every stage from one config file.
    RunPipeline(PipelineArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for collection, queries, qrels and triplets.
    #[arg(long)]
    out: PathBuf,
    /// JSON generator parameters; defaults are used for omitted keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TokenizerArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = TokenizerSection::default().vocab_size)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Model and schedule settings shared by the training subcommands.
#[derive(Args)]
struct StageArgs {
    /// JSON stage settings: a pipeline config, or the same without `paths`.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    mode: Option<PretrainMode>,
    #[command(flatten)]
    stage: StageArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Checkpoint path; the loss log goes next to it as `loss_log.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    kind: FinetuneKind,
    #[command(flatten)]
    stage: StageArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Checkpoint path; the loss log goes next to it as `loss_log.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// `sparse` or `dense`.
    #[arg(long, default_value = "sparse")]
    kind: FinetuneKind,
    #[arg(long, default_value_t = TokenizerSection::default().max_len)]
    max_len: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    /// `sparse` or `dense`; must match the index.
    #[arg(long, default_value = "sparse")]
    kind: FinetuneKind,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[arg(long, default_value_t = TokenizerSection::default().max_len)]
    max_len: usize,
    /// Cross-encoder checkpoint to rerank the top `depth` hits with.
    #[arg(long, requires = "corpus")]
    rerank_ckpt: Option<PathBuf>,
    /// Collection the index was built from; needed for reranking.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = RerankSection::default().depth)]
    depth: usize,
    #[arg(long, default_value_t = RerankSection::default().pair_max_len)]
    pair_max_len: usize,
    /// TREC run file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "scratch-ir")]
    tag: String,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Comma-separated, e.g. `mrr@10,ndcg@10,recall@1000`.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<MetricSpec>,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment directories written by run-pipeline.
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Report JSON; the table is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `paths.output_dir`.
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Replace existing stage outputs.
    #[arg(long)]
    force: bool,
    /// Reuse the tokenizer and pretrained checkpoint already in the output
    /// directory after verifying their checksums.
    #[arg(long)]
    skip_pretrain: bool,
}

/// Pipeline config minus `paths`, for the single-stage subcommands.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StageFile {
    version: u32,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    tokenizer: TokenizerSection,
    #[serde(default)]
    encoder: EncoderSection,
    #[serde(default)]
    pretrain: PretrainSection,
    #[serde(default)]
    finetune: FinetuneSection,
    #[serde(default)]
    rerank: Option<RerankSection>,
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn blank_paths() -> PathsConfig {
    let p = PathBuf::new();
    PathsConfig {
        corpus: p.clone(),
        queries: p.clone(),
        eval_queries: None,
        qrels: p.clone(),
        triplets: p.clone(),
        output_dir: p,
    }
}

impl StageArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let Some(path) = &self.config else {
            return Ok(PipelineConfig::with_paths(blank_paths(), 0));
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(config_error)?;
        let cfg = if value.get("paths").is_some() {
            PipelineConfig::from_json(&text)?
        } else {
            let s: StageFile = serde_json::from_value(value).map_err(config_error)?;
            PipelineConfig {
                version: s.version,
                seed: s.seed,
                paths: blank_paths(),
                tokenizer: s.tokenizer,
                encoder: s.encoder,
                pretrain: s.pretrain,
                finetune: s.finetune,
                rerank: s.rerank,
                eval: Default::default(),
            }
        };
        if cfg.version != CONFIG_VERSION {
            return Err(config_error(format!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version)));
        }
        Ok(cfg)
    }
}

/// Refuses to replace an existing file unless forced.
fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(config_error(format!("{} exists; pass --force to replace it", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.with_file_name(name)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SyntheticSpec>(&text).map_err(config_error)?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if a.out.exists() && fs::read_dir(&a.out).map_err(|e| Error::io(&a.out, e))?.next().is_some() && !a.force {
        return Err(config_error(format!("{} is not empty; pass --force to write into it", a.out.display())));
    }
    let data = generate_synthetic(&spec)?;
    let paths = data.write_to(&a.out)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn train_tokenizer(a: TokenizerArgs) -> Result<()> {
    guard(&a.out, a.force)?;
    let corpus = load_collection(&a.corpus)?;
    let vocab = train_wordpiece(corpus.texts(), a.vocab_size, a.seed)?;
    vocab.save(&a.out)?;
    println!("{} tokens -> {}", vocab.len(), a.out.display());
    Ok(())
}

fn run_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = a.stage.load()?;
    let log_path = sibling(&a.out, "loss_log.csv");
    guard(&a.out, a.force)?;
    guard(&log_path, a.force)?;
    let vocab = Vocab::load(&a.vocab)?;
    let mut cfg = cfg;
    cfg.tokenizer.vocab_size = vocab.len();
    cfg.encoder_config().validate()?;
    let corpus = load_collection(&a.corpus)?;
    let max_len = cfg.max_len();
    let ids: Vec<Vec<u32>> = corpus.texts().iter().map(|t| vocab.encode(t, max_len)).collect();
    let model = EncoderModel::<f32>::new(cfg.encoder_config())?;
    let out = pretrain(model, &ids, &cfg.pretrain_config(), a.mode.unwrap_or(cfg.pretrain.mode))?;
    save_checkpoint(&out.model, &a.out)?;
    write_loss_log(&out.log, &log_path)?;
    println!("{}", a.out.display());
    Ok(())
}

fn run_finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = a.stage.load()?;
    let log_path = sibling(&a.out, "loss_log.csv");
    guard(&a.out, a.force)?;
    guard(&log_path, a.force)?;
    let vocab = Vocab::load(&a.vocab)?;
    let model = load_checkpoint(&a.ckpt)?;
    let collection = load_collection(&a.corpus)?;
    let queries = load_queries(&a.queries)?;
    let triplets = load_triplets(&a.triplets)?;
    let out = match a.kind {
        FinetuneKind::Cross => {
            cfg.rerank.get_or_insert_with(RerankSection::default);
            let fcfg = cfg.rerank_config().expect("rerank section set");
            finetune_cross(model, &vocab, &triplets, &collection, &queries, &fcfg)?
        }
        FinetuneKind::Sparse => finetune_sparse(model, &vocab, &triplets, &collection, &queries, &cfg.finetune_config())?,
        FinetuneKind::Dense => finetune_dense(model, &vocab, &triplets, &collection, &queries, &cfg.finetune_config())?,
    };
    save_checkpoint(&out.model, &a.out)?;
    write_finetune_log(&out.log, &log_path)?;
    println!("{}", a.out.display());
    Ok(())
}

fn bi_encoder_kind(kind: FinetuneKind) -> Result<bool> {
    match kind {
        FinetuneKind::Sparse => Ok(true),
        FinetuneKind::Dense => Ok(false),
        FinetuneKind::Cross => Err(config_error("cross-encoders rerank; they cannot build an index")),
    }
}

fn run_index(a: IndexArgs) -> Result<()> {
    let sparse = bi_encoder_kind(a.kind)?;
    guard(&a.out, a.force)?;
    let vocab = Vocab::load(&a.vocab)?;
    let model = load_checkpoint(&a.ckpt)?;
    let collection = load_collection(&a.corpus)?;
    let max_len = a.max_len.min(model.config().max_positions);
    if sparse {
        let docs = encode_sparse_all(&model, &vocab, &collection, max_len)?;
        let index = build_index(&docs, model.config().vocab_size)?;
        index.save(&a.out)?;
        println!("{} documents, {} postings -> {}", index.doc_count(), index.num_postings(), a.out.display());
    } else {
        let docs = encode_dense_all(&model, &vocab, &collection, max_len)?;
        let index = DenseIndex::build(&docs)?;
        index.save(&a.out)?;
        println!("{} documents, dim {} -> {}", index.doc_count(), index.dim(), a.out.display());
    }
    Ok(())
}

fn run_search(a: SearchArgs) -> Result<()> {
    let sparse = bi_encoder_kind(a.kind)?;
    guard(&a.out, a.force)?;
    let vocab = Vocab::load(&a.vocab)?;
    let model = load_checkpoint(&a.ckpt)?;
    let queries = load_queries(&a.queries)?;
    let max_len = a.max_len.min(model.config().max_positions);
    let mut run = if sparse {
        let index = InvertedIndex::load(&a.index)?;
        sparse_run(&index, &encode_sparse_all(&model, &vocab, &queries, max_len)?, a.k)
    } else {
        let index = DenseIndex::load(&a.index)?;
        dense_run(&index, &encode_dense_all(&model, &vocab, &queries, max_len)?, a.k)?
    };
    if let (Some(ckpt), Some(corpus)) = (&a.rerank_ckpt, &a.corpus) {
        let cross = load_checkpoint(ckpt)?;
        let collection = load_collection(corpus)?;
        run = rerank_run(&cross, &vocab, &run, &queries, &collection, a.depth, a.pair_max_len)?;
    }
    write_trec_run(&run, &a.tag, &a.out)?;
    println!("{} queries -> {}", run.len(), a.out.display());
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    if let Some(out) = &a.out {
        guard(out, a.force)?;
    }
    let run = read_trec_run(&a.run)?;
    let qrels = load_qrels(&a.qrels)?;
    let metrics = if a.metrics.is_empty() { default_metrics() } else { a.metrics };
    let reports = evaluate_run(&run, &qrels, &metrics)?;
    for r in &reports {
        eprintln!("{:<12} {:.4}", r.label(), r.aggregate);
    }
    match &a.out {
        Some(out) => write_json(out, &reports),
        None => {
            println!("{}", serde_json::to_string_pretty(&reports)?);
            Ok(())
        }
    }
}

fn run_compare(a: CompareArgs) -> Result<()> {
    if let Some(out) = &a.out {
        guard(out, a.force)?;
    }
    let report = compare(&a.runs, a.alpha)?;
    print!("{}", report.table.render());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn run_full(a: PipelineArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(dir) = a.outdir {
        cfg.paths.output_dir = dir;
    }
    let out = run_pipeline(&cfg, RunOptions { force: a.force, skip_pretrain: a.skip_pretrain })?;
    print!("{}", out.report.table.render());
    for s in &out.report.systems {
        if let Some(r) = s.rflops {
            println!("{}: R-FLOPS {r:.3}", s.name);
        }
    }
    println!("{}", out.output_dir.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("SCRATCH_IR_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_error(format!("SCRATCH_IR_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(config_error)
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenerateSynthetic(a) => generate(a),
        Command::TrainTokenizer(a) => train_tokenizer(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Index(a) => run_index(a),
        Command::Search(a) => run_search(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Compare(a) => run_compare(a),
        Command::RunPipeline(a) => run_full(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
