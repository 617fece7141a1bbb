//! Contrastive finetuning of SPLADE and dense bi-encoders, and listwise
//! training of cross-encoder rerankers.
//!
//! Every query is scored against its positive, its first `num_negatives`
//! negatives and (bi-encoders only) the positives of the other queries in
//! the batch; the loss is softmax cross-entropy with the positive as target.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::NodeId;
use crate::batch::{batch_step, LossNodes, StepResult};
use crate::data::Collection;
pub use crate::data::{Triplet, Triplets};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::optim::{linear_warmup_decay, Adam};
use crate::pretraining::{flops_loss_sparse, flops_node};
use crate::repr::{DenseVector, SparseVector};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenizer::{wrap_pair, TokenId, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneKind {
    Sparse,
    Dense,
    Cross,
}

impl std::str::FromStr for FinetuneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Self::Sparse),
            "dense" => Ok(Self::Dense),
            "cross" => Ok(Self::Cross),
            other => Err(Error::Config(format!("unknown finetune kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub num_negatives: usize,
    pub epochs: usize,
    pub lambda_q: f64,
    pub lambda_d: f64,
    pub use_in_batch_negatives: bool,
    /// Triplets per optimizer step.
    pub batch_size: usize,
    /// Truncation length of queries and documents, and of cross-encoder
    /// pairs.
    pub max_len: usize,
    /// Linear warmup steps; the rate then decays linearly to 0.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    /// Bi-encoder recipe: lr 2e-5, 32 negatives, 2 epochs, lambda 1e-3.
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            num_negatives: 32,
            epochs: 2,
            lambda_q: 1e-3,
            lambda_d: 1e-3,
            use_in_batch_negatives: true,
            batch_size: 32,
            max_len: 256,
            warmup_steps: 0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Cross-encoder recipe: lr 1e-4, no in-batch negatives.
    pub fn cross_encoder() -> Self {
        Self { learning_rate: 1e-4, use_in_batch_negatives: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("finetune: {m}")));
        if self.num_negatives == 0 {
            return bad("num_negatives must be >= 1");
        }
        if !(self.lambda_q >= 0.0 && self.lambda_d >= 0.0) {
            return bad("lambda_q and lambda_d must be >= 0");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_len < 3 {
            return bad("epochs and batch_size must be positive and max_len >= 3");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// A representation that can be scored against another of its kind.
pub trait Representation {
    fn score(&self, other: &Self) -> Result<f64>;
}

impl Representation for SparseVector {
    fn score(&self, other: &Self) -> Result<f64> {
        Ok(self.dot(other))
    }
}

impl Representation for DenseVector {
    fn score(&self, other: &Self) -> Result<f64> {
        self.dot(other)
    }
}

/// `-log softmax(scores)[0]`.
pub fn softmax_ce_first(scores: &[f64]) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    lse - scores[0]
}

/// Softmax cross-entropy over `{pos} + negs + in_batch` by dot product.
pub fn contrastive_loss<R: Representation>(q: &R, pos: &R, negs: &[R], in_batch: &[R]) -> Result<f64> {
    let mut scores = vec![q.score(pos)?];
    for d in negs.iter().chain(in_batch) {
        scores.push(q.score(d)?);
    }
    Ok(softmax_ce_first(&scores))
}

/// `lambda_q * mean_q L1(q) + lambda_d * FLOPS(d)`; either term is 0 when
/// its set is empty.
pub fn splade_regularizer(q_reps: &[SparseVector], d_reps: &[SparseVector], lambda_q: f64, lambda_d: f64) -> f64 {
    let l1 = if q_reps.is_empty() { 0.0 } else { q_reps.iter().map(SparseVector::l1).sum::<f64>() / q_reps.len() as f64 };
    let flops = if d_reps.is_empty() { 0.0 } else { flops_loss_sparse(d_reps).expect("nonempty") };
    lambda_q * l1 + lambda_d * flops
}

/// Tokenized training unit: one query with its positive first, then its
/// negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub query_id: String,
    pub query: Vec<TokenId>,
    pub doc_ids: Vec<String>,
    pub docs: Vec<Vec<TokenId>>,
}

/// Resolves triplets against the texts. Bi-encoder examples hold
/// `[CLS] .. [SEP]` sequences; cross-encoder examples hold bare subword ids
/// (pairs are built later).
pub fn tokenize_examples(
    vocab: &Vocab,
    triplets: &Triplets,
    collection: &Collection,
    queries: &Collection,
    num_negatives: usize,
    max_len: usize,
    wrapped: bool,
) -> Result<Vec<Example>> {
    let enc = |text: &str| if wrapped { vocab.encode(text, max_len) } else { vocab.tokenize(text) };
    let doc = |id: &str| {
        collection.get(id).ok_or_else(|| Error::DanglingReference { kind: "document", id: id.to_string() })
    };
    triplets
        .records
        .iter()
        .map(|t| {
            let qtext = queries
                .get(&t.query_id)
                .ok_or_else(|| Error::DanglingReference { kind: "query", id: t.query_id.clone() })?;
            let doc_ids: Vec<String> =
                std::iter::once(&t.positive).chain(t.negatives.iter().take(num_negatives)).cloned().collect();
            let docs = doc_ids.iter().map(|d| doc(d).map(enc)).collect::<Result<_>>()?;
            Ok(Example { query_id: t.query_id.clone(), query: enc(qtext), doc_ids, docs })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BiEncoder {
    Sparse { lambda_q: f64, lambda_d: f64 },
    Dense,
}

/// In-batch candidates of example `i`: other examples' positives, skipping
/// those of the same query and documents already among `i`'s candidates.
pub fn in_batch_candidates(batch: &[Example], i: usize) -> Vec<usize> {
    (0..batch.len())
        .filter(|&k| {
            k != i && batch[k].query_id != batch[i].query_id && !batch[i].doc_ids.contains(&batch[k].doc_ids[0])
        })
        .collect()
}

/// Loss and gradients of one bi-encoder batch. `parts` are the ranking loss
/// and the regularizer.
pub fn bi_encoder_batch_loss<T: Scalar>(
    model: &EncoderModel<T>,
    batch: &[Example],
    kind: BiEncoder,
    in_batch: bool,
) -> Result<StepResult<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let b = batch.len();
    // sequence j < b is query j; documents follow, example by example
    let mut doc_start = Vec::with_capacity(b);
    let mut seqs: Vec<&[TokenId]> = batch.iter().map(|e| e.query.as_slice()).collect();
    for e in batch {
        doc_start.push(seqs.len());
        seqs.extend(e.docs.iter().map(Vec::as_slice));
    }
    let sparse = matches!(kind, BiEncoder::Sparse { .. });
    batch_step(
        model,
        seqs.len(),
        |j, s| {
            let ids = seqs[j];
            let mask = vec![true; ids.len()];
            let h = s.encode(ids, None, &mask)?;
            let rep = if sparse {
                let logits = s.mlm_logits(h);
                s.splade_pool(logits, &mask)?
            } else {
                s.cls(h)
            };
            Ok(vec![rep])
        },
        |g, ins| {
            let rep = |j: usize| ins[j][0];
            let mut ces = Vec::with_capacity(b);
            for (i, e) in batch.iter().enumerate() {
                let mut cands: Vec<NodeId> = (0..e.docs.len()).map(|k| rep(doc_start[i] + k)).collect();
                if in_batch {
                    cands.extend(in_batch_candidates(batch, i).into_iter().map(|k| rep(doc_start[k])));
                }
                let c = g.stack_rows(&cands);
                let scores = g.matmul_bt(rep(i), c);
                ces.push(g.cross_entropy_sum(scores, &[0]));
            }
            let st = g.stack_rows(&ces);
            let sum = g.sum(st);
            let ranking = g.scale(sum, T::of(1.0 / b as f64));
            let reg = match kind {
                BiEncoder::Sparse { lambda_q, lambda_d } => {
                    let qs: Vec<NodeId> = (0..b).map(rep).collect();
                    let qs = g.stack_rows(&qs);
                    let l1 = g.sum(qs);
                    let l1 = g.scale(l1, T::of(lambda_q / b as f64));
                    let ds: Vec<NodeId> = (b..seqs.len()).map(rep).collect();
                    let ds = g.stack_rows(&ds);
                    let fl = flops_node(g, ds);
                    let fl = g.scale(fl, T::of(lambda_d));
                    g.add(l1, fl)
                }
                BiEncoder::Dense => g.input(Matrix::scalar(T::zero())),
            };
            let total = g.add(ranking, reg);
            Ok(LossNodes { total, parts: vec![ranking, reg] })
        },
    )
}

/// Cross-encoder batch: softmax over the scores of each example's own
/// candidates. Examples hold bare subword ids.
pub fn cross_batch_loss<T: Scalar>(model: &EncoderModel<T>, batch: &[Example], max_len: usize) -> Result<StepResult<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let max_len = max_len.min(model.config().max_positions);
    let mut pairs: Vec<(Vec<TokenId>, Vec<u8>)> = Vec::new();
    let mut starts = Vec::with_capacity(batch.len());
    for e in batch {
        starts.push(pairs.len());
        pairs.extend(e.docs.iter().map(|d| wrap_pair(&e.query, d, max_len)));
    }
    batch_step(
        model,
        pairs.len(),
        |j, s| {
            let (ids, segs) = &pairs[j];
            let h = s.encode(ids, Some(segs), &vec![true; ids.len()])?;
            Ok(vec![s.cross_score(h)])
        },
        |g, ins| {
            let one = g.input(Matrix::scalar(T::one()));
            let mut ces = Vec::with_capacity(batch.len());
            for (i, e) in batch.iter().enumerate() {
                let col: Vec<NodeId> = (0..e.docs.len()).map(|k| ins[starts[i] + k][0]).collect();
                let col = g.stack_rows(&col);
                let row = g.matmul_bt(one, col);
                ces.push(g.cross_entropy_sum(row, &[0]));
            }
            let st = g.stack_rows(&ces);
            let sum = g.sum(st);
            let total = g.scale(sum, T::of(1.0 / batch.len() as f64));
            Ok(LossNodes { total, parts: vec![total] })
        },
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub ranking: f64,
    pub regularizer: f64,
    pub lr: f64,
}

pub const FINETUNE_LOG_HEADER: &str = "step,epoch,loss,ranking,regularizer,lr";

pub fn finetune_log_csv(records: &[FinetuneRecord]) -> String {
    let mut s = String::from(FINETUNE_LOG_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.epoch, r.loss, r.ranking, r.regularizer, r.lr);
    }
    s
}

pub fn write_finetune_log(records: &[FinetuneRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, finetune_log_csv(records)).map_err(|e| Error::io(path, e))
}

pub struct FinetuneOutput<T> {
    pub model: EncoderModel<T>,
    pub log: Vec<FinetuneRecord>,
}

/// Adam over `epochs` passes of the examples in seeded shuffled batches.
pub fn train_examples<T: Scalar>(
    mut model: EncoderModel<T>,
    examples: &[Example],
    config: &FinetuneConfig,
    loss: impl Fn(&EncoderModel<T>, &[Example]) -> Result<StepResult<T>>,
) -> Result<FinetuneOutput<T>> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per_epoch = examples.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let warmup = config.warmup_steps.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(model.params());
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let res = loss(&model, &batch)?;
            if !res.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            // decays towards 0 one step past the end so the last update is nonzero
            let lr = linear_warmup_decay(step, config.learning_rate, warmup, total + 1);
            let part = |i: usize| res.parts.get(i).map_or(0.0, |v| v.as_f64());
            log.push(FinetuneRecord {
                step,
                epoch,
                loss: res.total.as_f64(),
                ranking: part(0),
                regularizer: part(1),
                lr,
            });
            opt.step(model.params_mut(), &res.grads, T::of(lr));
        }
    }
    Ok(FinetuneOutput { model, log })
}

fn check_inputs(triplets: &Triplets, collection: &Collection, queries: &Collection) -> Result<()> {
    if triplets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    triplets.check(queries, collection)
}

pub fn finetune_sparse<T: Scalar>(
    model: EncoderModel<T>,
    vocab: &Vocab,
    triplets: &Triplets,
    collection: &Collection,
    queries: &Collection,
    config: &FinetuneConfig,
) -> Result<FinetuneOutput<T>> {
    config.validate()?;
    check_inputs(triplets, collection, queries)?;
    let max_len = config.max_len.min(model.config().max_positions);
    let ex = tokenize_examples(vocab, triplets, collection, queries, config.num_negatives, max_len, true)?;
    let kind = BiEncoder::Sparse { lambda_q: config.lambda_q, lambda_d: config.lambda_d };
    let ib = config.use_in_batch_negatives;
    train_examples(model, &ex, config, |m, b| bi_encoder_batch_loss(m, b, kind, ib))
}

pub fn finetune_dense<T: Scalar>(
    model: EncoderModel<T>,
    vocab: &Vocab,
    triplets: &Triplets,
    collection: &Collection,
    queries: &Collection,
    config: &FinetuneConfig,
) -> Result<FinetuneOutput<T>> {
    config.validate()?;
    check_inputs(triplets, collection, queries)?;
    let max_len = config.max_len.min(model.config().max_positions);
    let ex = tokenize_examples(vocab, triplets, collection, queries, config.num_negatives, max_len, true)?;
    let ib = config.use_in_batch_negatives;
    train_examples(model, &ex, config, |m, b| bi_encoder_batch_loss(m, b, BiEncoder::Dense, ib))
}

/// In-batch negatives are never used, whatever the config says.
pub fn finetune_cross<T: Scalar>(
    model: EncoderModel<T>,
    vocab: &Vocab,
    triplets: &Triplets,
    collection: &Collection,
    queries: &Collection,
    config: &FinetuneConfig,
) -> Result<FinetuneOutput<T>> {
    config.validate()?;
    check_inputs(triplets, collection, queries)?;
    if config.use_in_batch_negatives {
        log::warn!("cross-encoder training ignores use_in_batch_negatives");
    }
    let config = FinetuneConfig { use_in_batch_negatives: false, ..config.clone() };
    let ex = tokenize_examples(vocab, triplets, collection, queries, config.num_negatives, config.max_len, false)?;
    let max_len = config.max_len;
    train_examples(model, &ex, &config, |m, b| cross_batch_loss(m, b, max_len))
}
