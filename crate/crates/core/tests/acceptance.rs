//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scratch_ir::data::{generate_synthetic, SyntheticSpec};
use scratch_ir::encoder::{EncoderConfig, EncoderModel};
use scratch_ir::evaluation::{mrr_at_k, ndcg_at_k, paired_ttest, recall_at_k, Qrels};
use scratch_ir::finetuning::{bi_encoder_batch_loss, cross_batch_loss, BiEncoder, Example};
use scratch_ir::gradcheck::{
    check_gradients, check_gradients_smooth, check_gradients_with, cross_listwise_zero, is_structurally_zero,
    splade_pattern, GradCheckReport, Selection,
};
use scratch_ir::index::{build_index, estimate_rflops, search_sparse, RankedList, Run};
use scratch_ir::pipeline::{
    compare, run_pipeline, ExperimentReport, PathsConfig, PipelineConfig, PipelineOutcome, PretrainSection,
    RerankSection, RunOptions, EncoderSection, FinetuneSection, TokenizerSection, REPORT_FILE,
};
use scratch_ir::pretraining::{flops_weight, mask_batch, pretrain_batch_loss, PretrainMode};
use scratch_ir::repr::SparseVector;
use scratch_ir::tokenizer::{CLS, MASK, NUM_SPECIAL, SEP};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- 1

fn jittered(cfg: EncoderConfig, seed: u64) -> EncoderModel<f64> {
    let mut m = EncoderModel::<f64>::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params_mut() {
        for x in p.as_mut_slice() {
            *x += rng.random_range(-0.17..0.17);
        }
    }
    m
}

fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: u32) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(NUM_SPECIAL as u32..vocab)).collect()
}

fn criterion_gradients() -> Verdict {
    const STEP: f64 = 1e-4;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let vocab = 200;
    let model = jittered(EncoderConfig::desk(2, 1, vocab, 11), 12);
    let sel = |seed| Selection::Sample { per_tensor: 4, seed };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let seqs: Vec<Vec<u32>> = (0..3)
        .map(|i| [&[CLS][..], &random_ids(&mut rng, 6 + i, vocab as u32), &[SEP]].concat())
        .collect();
    let mut mb = mask_batch(&seqs, vocab, 0.3, &mut rng);
    for (s, seq) in seqs.iter().enumerate() {
        if mb.target_positions(s).is_empty() {
            mb.labels[s][1] = seq[1];
            mb.input_ids[s][1] = MASK;
        }
    }

    let mut results: Vec<(&str, GradCheckReport)> = Vec::new();
    // (mode, MLM-SPLADE weight, FLOPS weight): every term is MLM plus at
    // most one extra loss, so each extra loss is checked on its own
    let pretrain_cases =
        [("MLM", PretrainMode::Mlm, 0.0, 0.0), ("MLM-SPLADE", PretrainMode::MlmFlops, 1.0, 0.0), ("FLOPS", PretrainMode::MlmFlops, 0.0, 1.0)];
    for (name, mode, lw, fw) in pretrain_cases {
        let res = pretrain_batch_loss(&model, &mb, mode, lw, fw).unwrap();
        let loss = |m: &EncoderModel<f64>| pretrain_batch_loss(m, &mb, mode, lw, fw).unwrap().total;
        let report = if mode == PretrainMode::Mlm {
            check_gradients(&model, &res.grads, loss, STEP, sel(1))
        } else {
            let pattern = |m: &EncoderModel<f64>| splade_pattern(m, &mb.input_ids, &mb.attention_masks).unwrap();
            check_gradients_smooth(&model, &res.grads, loss, STEP, sel(1), is_structurally_zero, pattern)
        };
        results.push((name, report));
    }

    let wrap = |v: Vec<u32>| [&[CLS][..], &v, &[SEP]].concat();
    let examples = |wrapped: bool, rng: &mut ChaCha8Rng| -> Vec<Example> {
        (0..3)
            .map(|i| {
                let mut seq = |n| {
                    let v = random_ids(rng, n, vocab as u32);
                    if wrapped { wrap(v) } else { v }
                };
                Example {
                    query_id: format!("q{i}"),
                    query: seq(3),
                    doc_ids: (0..3).map(|j| format!("d{i}{j}")).collect(),
                    docs: vec![seq(6), seq(5), seq(7)],
                }
            })
            .collect()
    };
    let bi = examples(true, &mut rng);
    let bi_seqs: Vec<Vec<u32>> = bi.iter().flat_map(|x| std::iter::once(x.query.clone()).chain(x.docs.clone())).collect();
    let bi_masks: Vec<Vec<bool>> = bi_seqs.iter().map(|x| vec![true; x.len()]).collect();
    for (name, kind) in [("contrastive sparse", BiEncoder::Sparse { lambda_q: 0.3, lambda_d: 0.2 }), ("contrastive dense", BiEncoder::Dense)] {
        let res = bi_encoder_batch_loss(&model, &bi, kind, true).unwrap();
        let loss = |m: &EncoderModel<f64>| bi_encoder_batch_loss(m, &bi, kind, true).unwrap().total;
        let report = match kind {
            BiEncoder::Dense => check_gradients(&model, &res.grads, loss, STEP, sel(2)),
            BiEncoder::Sparse { .. } => {
                let pattern = |m: &EncoderModel<f64>| splade_pattern(m, &bi_seqs, &bi_masks).unwrap();
                check_gradients_smooth(&model, &res.grads, loss, STEP, sel(2), is_structurally_zero, pattern)
            }
        };
        results.push((name, report));
    }
    let cross = examples(false, &mut rng);
    let res = cross_batch_loss(&model, &cross, 32).unwrap();
    let loss = |m: &EncoderModel<f64>| cross_batch_loss(m, &cross, 32).unwrap().total;
    let zero = cross_listwise_zero(2);
    results.push(("cross", check_gradients_with(&model, &res.grads, loss, STEP, sel(3), zero)));

    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.1.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<String> =
        results.iter().filter(|r| !r.1.passes(TOL)).map(|r| format!("{} at {:?}", r.0, r.1.worst)).collect();
    let per: Vec<String> = results.iter().map(|(n, r)| format!("{n} {:.1e}", r.max_rel_error)).collect();
    let checked: usize = results.iter().map(|r| r.1.checked).sum();
    let kinks: usize = results.iter().map(|r| r.1.kinks).sum();
    let refined = results.iter().map(|r| r.1.refined_max_rel_error).fold(0.0, f64::max);
    verdict(
        failing.is_empty() && secs < 120.0,
        format!(
            "max rel err {worst:.2e} over {checked} components ({}); {kinks} stencils crossing a SPLADE kink re-checked at a smaller step, max rel err {refined:.1e}; failing {failing:?}; {secs:.1} s",
            per.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 2

fn random_sparse(rng: &mut ChaCha8Rng, vocab: u32, max_nnz: usize) -> SparseVector {
    let n = rng.random_range(0..=max_nnz);
    let mut m: HashMap<u32, f32> = HashMap::new();
    for _ in 0..n {
        // coarse weights so score ties are common
        m.insert(rng.random_range(NUM_SPECIAL as u32..vocab), rng.random_range(1..5) as f32 * 0.5);
    }
    SparseVector::new(m.into_iter().collect()).unwrap()
}

/// Scores every document, sorts by descending score then document number.
fn brute_force(docs: &[SparseVector], q: &SparseVector, k: usize) -> Vec<(usize, f64)> {
    let qw: HashMap<u32, f64> = q.entries().iter().map(|&(t, w)| (t, w as f64)).collect();
    let mut all: Vec<(usize, f64)> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| (i, d.entries().iter().map(|&(t, w)| qw.get(&t).map_or(0.0, |x| x * w as f64)).sum::<f64>()))
        .filter(|&(_, s)| s > 0.0)
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Σ_j freq_q(j) · freq_d(j) with frequencies over the nonzero patterns.
fn rflops_oracle(queries: &[SparseVector], docs: &[SparseVector]) -> f64 {
    let freq = |vs: &[SparseVector]| {
        let mut c: HashMap<u32, f64> = HashMap::new();
        for v in vs {
            for &(t, w) in v.entries() {
                if w != 0.0 {
                    *c.entry(t).or_default() += 1.0 / vs.len() as f64;
                }
            }
        }
        c
    };
    let (fq, fd) = (freq(queries), freq(docs));
    fq.iter().map(|(t, p)| p * fd.get(t).copied().unwrap_or(0.0)).sum()
}

fn search_and_rflops_oracles() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let vocab = 300;
    let (mut rank_ok, mut worst_score, mut worst_rflops) = (true, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let n_docs = rng.random_range(1..=1000);
        let docs: Vec<SparseVector> = (0..n_docs).map(|_| random_sparse(&mut rng, vocab, 12)).collect();
        let queries: Vec<SparseVector> = (0..100).map(|_| random_sparse(&mut rng, vocab, 6)).collect();
        let named: Vec<(String, SparseVector)> = docs.iter().cloned().enumerate().map(|(i, d)| (i.to_string(), d)).collect();
        let index = build_index(&named, vocab as usize).unwrap();
        let k = rng.random_range(1..=100);
        for q in &queries {
            let got = search_sparse(&index, "q", q, k);
            let want = brute_force(&docs, q, k);
            rank_ok &= got.hits.len() == want.len()
                && got.hits.iter().zip(&want).all(|(g, w)| g.0 == w.0.to_string());
            for (g, w) in got.hits.iter().zip(&want) {
                worst_score = worst_score.max((g.1 - w.1).abs());
            }
        }
        let est = estimate_rflops(&queries, &index).unwrap();
        worst_rflops = worst_rflops.max((est - rflops_oracle(&queries, &docs)).abs());
    }
    let pass = rank_ok && worst_score < 1e-9 && worst_rflops < 1e-9;
    (pass, format!("50 instances: ranks exact {rank_ok}, max score diff {worst_score:.1e}, max rflops diff {worst_rflops:.1e}"))
}

fn list(q: &str, docs: &[&str]) -> RankedList {
    RankedList { query_id: q.into(), hits: docs.iter().enumerate().map(|(i, d)| (d.to_string(), -(i as f64))).collect() }
}

/// Metric definitions written independently of the library.
fn oracle_metrics(ranking: &[&str], grades: &HashMap<&str, u32>, k: usize) -> (f64, f64, f64) {
    let g = |d: &str| grades.get(d).copied().unwrap_or(0);
    let top = &ranking[..k.min(ranking.len())];
    let mut rr = 0.0;
    for (i, d) in top.iter().enumerate() {
        if g(d) > 0 {
            rr = 1.0 / (i as f64 + 1.0);
            break;
        }
    }
    let mut dcg = 0.0;
    for (i, d) in top.iter().enumerate() {
        dcg += ((1u64 << g(d)) - 1) as f64 / (i as f64 + 2.0).log2();
    }
    let mut ideal: Vec<u32> = grades.values().copied().filter(|&x| x > 0).collect();
    ideal.sort_by(|a, b| b.cmp(a));
    let mut idcg = 0.0;
    for (i, x) in ideal.iter().take(k).enumerate() {
        idcg += ((1u64 << x) - 1) as f64 / (i as f64 + 2.0).log2();
    }
    let relevant = grades.values().filter(|&&x| x > 0).count();
    let found = top.iter().filter(|d| g(d) > 0).count();
    let ndcg = if idcg > 0.0 { dcg / idcg } else { 0.0 };
    let recall = if relevant > 0 { found as f64 / relevant as f64 } else { 0.0 };
    (rr, ndcg, recall)
}

fn metric_oracles() -> (bool, String) {
    // hand example: relevant d1 (grade 1) at rank 2, d2 (grade 2) at rank 3
    let mut run = Run::new();
    run.insert("q1".into(), list("q1", &["d3", "d1", "d2"]));
    let mut qrels = Qrels::new();
    qrels.insert("q1", "d1", 1).unwrap();
    qrels.insert("q1", "d2", 2).unwrap();
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());
    check(mrr_at_k(&run, &qrels, 10).unwrap().aggregate, 0.5);
    check(ndcg_at_k(&run, &qrels, 10).unwrap().aggregate, 0.58688267143572);
    check(recall_at_k(&run, &qrels, 2).unwrap().aggregate, 0.5);
    check(mrr_at_k(&run, &qrels, 1).unwrap().aggregate, 0.0);

    // random runs against the independent definitions
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let names: Vec<String> = (0..40).map(|i| format!("d{i}")).collect();
    for trial in 0..200 {
        let q = format!("q{trial}");
        let mut ranking: Vec<&str> = names.iter().map(String::as_str).collect();
        for i in (1..ranking.len()).rev() {
            ranking.swap(i, rng.random_range(0..=i));
        }
        ranking.truncate(rng.random_range(1..=40));
        let mut grades: HashMap<&str, u32> = HashMap::new();
        let mut qrels = Qrels::new();
        for d in &names {
            if rng.random_bool(0.2) {
                let grade = rng.random_range(0..4);
                grades.insert(d.as_str(), grade);
                qrels.insert(&q, d, grade).unwrap();
            }
        }
        if grades.is_empty() {
            continue;
        }
        let mut run = Run::new();
        run.insert(q.clone(), list(&q, &ranking));
        let k = rng.random_range(1..=50);
        let (rr, ndcg, recall) = oracle_metrics(&ranking, &grades, k);
        check(mrr_at_k(&run, &qrels, k).unwrap().aggregate, rr);
        check(ndcg_at_k(&run, &qrels, k).unwrap().aggregate, ndcg);
        check(recall_at_k(&run, &qrels, k).unwrap().aggregate, recall);
    }
    (worst < 1e-9, format!("metrics max diff {worst:.1e}"))
}

fn ttest_oracle() -> (bool, String) {
    // reference p-values from scipy.stats.ttest_rel
    let cases: [(&[f64], &[f64], f64); 4] = [
        (&[0.5, 0.7, 0.2, 0.9, 0.4, 0.6], &[0.3, 0.6, 0.25, 0.5, 0.1, 0.55], 0.05762356733738467),
        (&[1.0, 0.0, 0.5, 0.333, 0.25, 1.0, 1.0, 0.0], &[0.5, 0.0, 0.5, 1.0, 0.2, 1.0, 0.5, 0.1], 0.7934884820761856),
        (&[0.1, 0.2, 0.3], &[0.15, 0.18, 0.41], 0.34003367089255576),
        (
            &[0.91, 0.85, 0.77, 0.93, 0.88, 0.81, 0.79, 0.95, 0.9, 0.84],
            &[0.2, 0.35, 0.1, 0.4, 0.3, 0.25, 0.15, 0.33, 0.28, 0.22],
            2.4378882050378454e-10,
        ),
    ];
    let worst = cases.iter().map(|(a, b, p)| (paired_ttest(a, b).unwrap().p_raw - p).abs()).fold(0.0, f64::max);
    (worst < 1e-6, format!("t-test p max diff {worst:.1e}"))
}

fn criterion_oracles() -> Verdict {
    let parts = [search_and_rflops_oracles(), metric_oracles(), ttest_oracle()];
    verdict(parts.iter().all(|p| p.0), parts.iter().map(|p| p.1.as_str()).collect::<Vec<_>>().join("; "))
}

// ---------------------------------------------------------------- 3-6, 8

struct Runs {
    data: PathBuf,
    flops: PipelineOutcome,
    flops_secs: f64,
    mlm: PipelineOutcome,
    repeat: PipelineOutcome,
    root: PathBuf,
}

fn paths(data: &Path, out: PathBuf) -> PathsConfig {
    PathsConfig {
        corpus: data.join("collection.tsv"),
        queries: data.join("queries.train.tsv"),
        eval_queries: Some(data.join("queries.test.tsv")),
        qrels: data.join("qrels.txt"),
        triplets: data.join("triplets.tsv"),
        output_dir: out,
    }
}

/// Default config on the default synthetic task, reranker enabled.
fn default_config(data: &Path, out: PathBuf, mode: PretrainMode) -> PipelineConfig {
    let mut cfg = PipelineConfig::with_paths(paths(data, out), 42);
    cfg.pretrain.mode = mode;
    cfg.rerank = Some(RerankSection::default());
    cfg
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn pipeline_runs(root: &Path) -> Runs {
    let data = root.join("data");
    generate_synthetic(&SyntheticSpec::default()).unwrap().write_to(&data).unwrap();
    let start = Instant::now();
    let flops = single_thread(|| run_pipeline(&default_config(&data, root.join("mlm-flops"), PretrainMode::MlmFlops), RunOptions::default()))
        .unwrap();
    let flops_secs = start.elapsed().as_secs_f64();
    // the reranker plays no part in the MLM-only comparison
    let mut mlm_cfg = default_config(&data, root.join("mlm"), PretrainMode::Mlm);
    mlm_cfg.rerank = None;
    let mlm = run_pipeline(&mlm_cfg, RunOptions::default()).unwrap();
    let repeat =
        run_pipeline(&default_config(&data, root.join("mlm-flops-repeat"), PretrainMode::MlmFlops), RunOptions::default())
            .unwrap();
    Runs { data, flops, flops_secs, mlm, repeat, root: root.to_path_buf() }
}

fn mrr(report: &ExperimentReport, system: &str) -> f64 {
    report.system(system).unwrap().metric("MRR@10").unwrap().aggregate
}

fn criterion_learnability(r: &Runs) -> Verdict {
    let (pre, fine) = (mrr(&r.flops.report, "pretrained"), mrr(&r.flops.report, "finetuned"));
    verdict(
        fine >= 0.7 && fine >= pre + 0.2 && r.flops_secs < 600.0,
        format!(
            "test MRR@10 finetuned {fine:.4}, pretrained-only {pre:.4} (gap {:.4}); single-thread run {:.0} s incl. reranker",
            fine - pre,
            r.flops_secs
        ),
    )
}

fn criterion_flops(r: &Runs) -> Verdict {
    let rf = |o: &PipelineOutcome| o.report.system("finetuned").unwrap().rflops.unwrap();
    let (f, m) = (rf(&r.flops), rf(&r.mlm));
    let (mf, mm) = (mrr(&r.flops.report, "finetuned"), mrr(&r.mlm.report, "finetuned"));
    verdict(
        f < m && mm - mf <= 0.05,
        format!("finetuned R-FLOPS MLM+FLOPS {f:.3} vs MLM {m:.3}; MRR@10 {mf:.4} vs {mm:.4} (drop {:.4})", mm - mf),
    )
}

fn criterion_rerank(r: &Runs) -> Verdict {
    let (first, reranked) = (mrr(&r.flops.report, "finetuned"), mrr(&r.flops.report, "reranked"));
    let depth = r.flops.manifest.config.rerank.as_ref().unwrap().depth;
    verdict(reranked >= first, format!("MRR@10 first stage {first:.4}, reranked top-{depth} {reranked:.4}"))
}

fn criterion_determinism(r: &Runs) -> Verdict {
    let read = |o: &PipelineOutcome| fs::read(o.output_dir.join("evaluate").join(REPORT_FILE)).unwrap();
    let same_report = read(&r.flops) == read(&r.repeat);
    let (a, b) = (r.flops.manifest.checksums(), r.repeat.manifest.checksums());
    verdict(
        same_report && a == b,
        format!("report bytes identical {same_report}; {} artifact checksums identical {}", a.len(), a == b),
    )
}

/// A deliberately weak third system: tiny schedule, different seed.
fn weak_config(data: &Path, out: PathBuf) -> PipelineConfig {
    let mut cfg = PipelineConfig::with_paths(paths(data, out), 7);
    cfg.tokenizer = TokenizerSection { vocab_size: 600, ..Default::default() };
    cfg.encoder = EncoderSection { num_layers: 1, hidden_dim: 16, ffn_dim: 32, ..Default::default() };
    cfg.pretrain = PretrainSection { total_steps: 10, lr_warmup_steps: 2, flops_warmup_steps: 2, logits_warmup_steps: 1, batch_size: 8, ..Default::default() };
    cfg.finetune = FinetuneSection { epochs: 1, num_negatives: 2, warmup_steps: 0, ..Default::default() };
    cfg
}

fn criterion_significance(r: &Runs) -> Verdict {
    let weak = r.root.join("weak");
    run_pipeline(&weak_config(&r.data, weak.clone()), RunOptions::default()).unwrap();
    let dirs = [r.flops.output_dir.clone(), r.mlm.output_dir.clone(), weak];
    let cmp = compare(&dirs, 0.05).unwrap();
    let rendered = cmp.table.render();
    let mut antisymmetric = true;
    let mut consistent = true;
    for m in &cmp.significance {
        let k = m.systems.len();
        for i in 0..k {
            consistent &= cmp.table.rows[i].cells[cmp.significance.iter().position(|x| x.metric == m.metric).unwrap()].1
                == m.superscripts(i);
            for j in 0..k {
                if i == j {
                    continue;
                }
                let (a, b) = (m.tests[i][j].as_ref().unwrap(), m.tests[j][i].as_ref().unwrap());
                antisymmetric &= a.mean_diff == -b.mean_diff && a.t == -b.t && a.p_raw == b.p_raw;
                antisymmetric &= !(m.better[i][j] && m.better[j][i]);
            }
        }
    }
    let supers = cmp.table.rows.iter().flat_map(|r| &r.cells).filter(|c| !c.1.is_empty()).count();
    verdict(
        supers > 0 && antisymmetric && consistent && rendered.contains("^{"),
        format!("{supers} cells with superscripts, antisymmetric {antisymmetric}, letters match matrix {consistent}\n{rendered}"),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_schedules() -> Verdict {
    let cfg = PipelineConfig::with_paths(paths(Path::new("."), PathBuf::from("out")), 42).pretrain_config();
    let t = cfg.flops_warmup_steps;
    let (w, total) = (cfg.lr_warmup_steps, cfg.total_steps);
    let checks = [
        flops_weight(0, &cfg) == 0.0,
        flops_weight(t, &cfg) == cfg.lambda_flops,
        cfg.learning_rate_at(0) == 0.0,
        cfg.learning_rate_at(w) == cfg.learning_rate,
        cfg.learning_rate_at(total) == 0.0,
    ];
    verdict(
        checks.iter().all(|&c| c),
        format!(
            "flops_weight(0)={}, flops_weight({t})={} (lambda {}); lr(0)={}, lr({w})={} (peak {}), lr({total})={}",
            flops_weight(0, &cfg),
            flops_weight(t, &cfg),
            cfg.lambda_flops,
            cfg.learning_rate_at(0),
            cfg.learning_rate_at(w),
            cfg.learning_rate,
            cfg.learning_rate_at(total)
        ),
    )
}

fn report(n: u8, name: &str, v: &Verdict) -> bool {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} [{tag}] {name}: {}", v.detail);
    v.pass
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut passed = Vec::new();
    passed.push(report(1, "gradient suite", &criterion_gradients()));
    passed.push(report(2, "oracle equivalence", &criterion_oracles()));
    let runs = pipeline_runs(dir.path());
    passed.push(report(3, "learnability", &criterion_learnability(&runs)));
    passed.push(report(4, "FLOPS effect", &criterion_flops(&runs)));
    passed.push(report(5, "reranking", &criterion_rerank(&runs)));
    passed.push(report(6, "determinism", &criterion_determinism(&runs)));
    passed.push(report(7, "schedules", &criterion_schedules()));
    passed.push(report(8, "significance formatting", &criterion_significance(&runs)));
    let ok = passed.iter().filter(|&&p| p).count();
    println!("{ok} of {} criteria passed", passed.len());
    if ok < passed.len() {
        std::process::exit(1);
    }
}
