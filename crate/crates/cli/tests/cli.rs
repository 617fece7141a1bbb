use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Argument list of mixed strings and paths.
macro_rules! args {
    ($($x:expr),* $(,)?) => { vec![$(OsString::from($x)),*] };
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scratch-ir"));
    c.env("SCRATCH_IR_THREADS", "2");
    c
}

fn run(args: &[OsString]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[OsString]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[OsString]) -> i32 {
    run(args).status.code().unwrap()
}

const SPEC: &str = r#"{"num_docs": 40, "num_queries": 8, "num_test_queries": 4, "vocab_size_words": 30,
  "keywords_per_topic": 4, "num_topics": 4, "doc_len_range": [6, 10], "negatives_per_query": 3,
  "triplets_per_query": 2, "seed": 5}"#;

const STAGE: &str = r#"{"version": 1, "seed": 3,
  "tokenizer": {"vocab_size": 120, "max_len": 16},
  "encoder": {"num_layers": 1, "hidden_dim": 16, "ffn_dim": 32, "max_positions": 40},
  "pretrain": {"total_steps": 4, "lr_warmup_steps": 1, "flops_warmup_steps": 2, "logits_warmup_steps": 1, "batch_size": 4},
  "finetune": {"num_negatives": 2, "epochs": 1, "batch_size": 4},
  "rerank": {"num_negatives": 2, "epochs": 1, "batch_size": 4, "depth": 5, "pair_max_len": 32}}"#;

/// Tiny task in `root/data` plus a stage settings file.
fn setup(root: &Path) -> (PathBuf, PathBuf) {
    let spec = root.join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let data = root.join("data");
    ok(&args!["generate-synthetic", "--out", &data, "--spec", &spec]);
    let stage = root.join("stage.json");
    fs::write(&stage, STAGE).unwrap();
    (data, stage)
}

fn pipeline_config(root: &Path, data: &Path) -> PathBuf {
    let mut cfg: serde_json::Value = serde_json::from_str(STAGE).unwrap();
    cfg["paths"] = serde_json::json!({
        "corpus": data.join("collection.tsv"),
        "queries": data.join("queries.train.tsv"),
        "eval_queries": data.join("queries.test.tsv"),
        "qrels": data.join("qrels.txt"),
        "triplets": data.join("triplets.tsv"),
        "output_dir": "exp",
    });
    let path = root.join("pipeline.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn stage_by_stage_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, stage) = setup(root);
    let d = |f: &str| data.join(f);
    let o = |f: &str| root.join("out").join(f);

    ok(&args!["train-tokenizer", "--corpus", &d("collection.tsv"), "--vocab-size", "120", "--out", &o("vocab.txt")]);
    // outputs are not replaced without --force
    assert_eq!(code(&args!["train-tokenizer", "--corpus", &d("collection.tsv"), "--out", &o("vocab.txt")]), 2);

    let common = args!["--vocab", &o("vocab.txt"), "--config", &stage];
    let mut args = args!["pretrain", "--mode", "mlm-flops", "--corpus", &d("collection.tsv"), "--out"];
    let pre = o("pre/model.ckpt");
    args.push(pre.clone().into());
    args.extend(common.clone());
    ok(&args);
    assert!(o("pre/loss_log.csv").is_file());

    for kind in ["sparse", "cross"] {
        let out = o(&format!("{kind}/model.ckpt"));
        let mut args = args!["finetune", "--kind", kind, "--ckpt", &pre, "--triplets", &d("triplets.tsv")];
        args.extend(args!["--corpus", &d("collection.tsv"), "--queries", &d("queries.train.tsv"), "--out", &out]);
        args.extend(common.clone());
        ok(&args);
    }

    let sparse = o("sparse/model.ckpt");
    let vocab = o("vocab.txt");
    ok(&args!["index", "--ckpt", &sparse, "--vocab", &vocab, "--corpus", &d("collection.tsv"), "--max-len", "16", "--out", &o("docs.idx")]);
    let search = |out: &Path, rerank: bool| {
        let mut args = args!["search", "--index", &o("docs.idx"), "--ckpt", &sparse, "--vocab", &o("vocab.txt")];
        args.extend(args!["--queries", &d("queries.test.tsv"), "--max-len", "16", "--out", out]);
        let cross = o("cross/model.ckpt");
        if rerank {
            args.extend(args!["--rerank-ckpt", &cross, "--corpus", &d("collection.tsv"), "--depth", "5"]);
        }
        ok(&args);
    };
    search(&o("run.trec"), false);
    search(&o("reranked.trec"), true);
    let first = fs::read_to_string(o("run.trec")).unwrap();
    assert_eq!(first.lines().next().unwrap().split_whitespace().count(), 6);

    let report = ok(&args!["evaluate", "--run", &o("run.trec"), "--qrels", &d("qrels.txt"), "--metrics", "mrr@10,recall@100"]);
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 2);
    assert_eq!(parsed[0]["metric"], "MRR");
    ok(&args!["evaluate", "--run", &o("reranked.trec"), "--qrels", &d("qrels.txt"), "--out", &o("eval.json")]);
    assert!(o("eval.json").is_file());

    // dense bi-encoder from the same checkpoint
    let dense = o("dense/model.ckpt");
    let mut args = args!["finetune", "--kind", "dense", "--ckpt", &pre, "--triplets", &d("triplets.tsv")];
    args.extend(args!["--corpus", &d("collection.tsv"), "--queries", &d("queries.train.tsv"), "--out", &dense]);
    args.extend(common.clone());
    ok(&args);
    ok(&args!["index", "--kind", "dense", "--ckpt", &dense, "--vocab", &o("vocab.txt"), "--corpus", &d("collection.tsv"), "--out", &o("docs.dense")]);
    ok(&args!["search", "--kind", "dense", "--index", &o("docs.dense"), "--ckpt", &dense, "--vocab", &o("vocab.txt"), "--queries", &d("queries.test.tsv"), "--out", &o("dense.trec")]);
}

#[test]
fn pipeline_compare_and_guards() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, _) = setup(root);
    let cfg = pipeline_config(root, &data);
    let a = root.join("a");
    let b = root.join("b");

    let table = ok(&args!["run-pipeline", "--config", &cfg, "--outdir", &a]);
    assert!(table.contains("pretrained") && table.contains("reranked"));
    for stage in ["tokenizer", "pretrain", "finetune", "rerank", "index", "search", "evaluate"] {
        assert!(a.join(stage).is_dir(), "{stage}");
    }
    assert!(a.join("manifest.json").is_file());
    let report = fs::read(a.join("evaluate/report.json")).unwrap();

    assert_eq!(code(&args!["run-pipeline", "--config", &cfg, "--outdir", &a]), 2);
    ok(&args!["run-pipeline", "--config", &cfg, "--outdir", &a, "--force", "--skip-pretrain"]);
    assert_eq!(fs::read(a.join("evaluate/report.json")).unwrap(), report);

    // a held lock blocks a second process
    fs::write(a.join(".lock"), "1").unwrap();
    assert_eq!(code(&args!["run-pipeline", "--config", &cfg, "--outdir", &a, "--force"]), 2);
    fs::remove_file(a.join(".lock")).unwrap();

    // the manifest is itself a runnable config
    ok(&args!["run-pipeline", "--config", &a.join("manifest.json"), "--outdir", &b]);
    assert_eq!(fs::read(b.join("evaluate/report.json")).unwrap(), report);

    let out = ok(&args!["compare", &a, &b, "--out", &root.join("cmp.json")]);
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!((rows[0][0], rows[0][1], rows[1][0], rows[1][1]), ("a)", "a", "b)", "b"));
    assert!(!out.contains('^'), "{out}");
    assert!(root.join("cmp.json").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, _) = setup(root);
    let cfg = pipeline_config(root, &data);

    // unknown keys are configuration errors
    let mut value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    value["encoder"]["hiden_dim"] = 8.into();
    let bad = root.join("bad.json");
    fs::write(&bad, value.to_string()).unwrap();
    assert_eq!(code(&args!["run-pipeline", "--config", &bad]), 2);
    assert_eq!(code(&args!["no-such-command"]), 2);

    let out = bin().env("SCRATCH_IR_THREADS", "zero").args(args!["run-pipeline", "--config", &cfg]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // malformed data
    let corpus = root.join("broken.tsv");
    fs::write(&corpus, "only-an-id\n").unwrap();
    assert_eq!(code(&args!["train-tokenizer", "--corpus", &corpus, "--out", &root.join("v.txt")]), 3);
    assert_eq!(code(&args!["train-tokenizer", "--corpus", &root.join("missing.tsv"), "--out", &root.join("v.txt")]), 3);

    // a diverging learning rate is a numeric failure
    let vocab = root.join("vocab.txt");
    ok(&args!["train-tokenizer", "--corpus", &data.join("collection.tsv"), "--vocab-size", "120", "--out", &vocab]);
    let mut hot: serde_json::Value = serde_json::from_str(STAGE).unwrap();
    hot["pretrain"]["learning_rate"] = 1e38.into();
    hot["pretrain"]["lr_warmup_steps"] = 0.into();
    let hot_path = root.join("hot.json");
    fs::write(&hot_path, hot.to_string()).unwrap();
    let args = args!["pretrain", "--config", &hot_path, "--corpus", &data.join("collection.tsv"), "--vocab", &vocab, "--out", &root.join("hot/model.ckpt")];
    assert_eq!(code(&args), 4);
}
