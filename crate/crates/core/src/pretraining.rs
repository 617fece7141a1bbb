//! MLM and MLM+FLOPS pretraining.
//!
//! In MLM+FLOPS mode each step minimizes
//!
//! ```text
//! l_MLM + r(step) * l_MLM-SPLADE + w(step) * l_FLOPS
//! ```
//!
//! where `l_MLM-SPLADE` is the MLM cross-entropy over `log(1 + relu(logits))`,
//! `l_FLOPS` is the sum over the vocabulary of the squared batch-mean SPLADE
//! weight, `r` ramps linearly from 0 to 1 over `logits_warmup_steps` and `w`
//! is [`flops_weight`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::batch::{batch_step, LossNodes};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::optim::{linear_warmup_decay, Adam};
use crate::repr::SparseVector;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenizer::{is_special, TokenId, MASK, NUM_SPECIAL, PAD};

/// Label value at positions that carry no prediction target.
pub const NO_LABEL: TokenId = TokenId::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainMode {
    Mlm,
    MlmFlops,
}

impl std::str::FromStr for PretrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlm" => Ok(Self::Mlm),
            "mlm-flops" => Ok(Self::MlmFlops),
            other => Err(Error::Config(format!("unknown pretrain mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub mask_prob: f64,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub lr_warmup_steps: usize,
    pub flops_warmup_steps: usize,
    pub logits_warmup_steps: usize,
    pub lambda_flops: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    /// Full-scale schedule: 125k steps, 10k LR warmup, 5k FLOPS warmup, 1k
    /// logits warmup, lambda 1e-3, lr 1e-4, 256 tokens.
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            learning_rate: 1e-4,
            total_steps: 125_000,
            lr_warmup_steps: 10_000,
            flops_warmup_steps: 5_000,
            logits_warmup_steps: 1_000,
            lambda_flops: 1e-3,
            batch_size: 200,
            max_len: 256,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// The full-scale schedule with every step count divided by `factor`
    /// (rounded, at least 1 where the original is nonzero).
    pub fn scaled(factor: usize) -> Self {
        let d = |x: usize| if x == 0 { 0 } else { (x / factor).max(1) };
        let base = Self::default();
        Self {
            total_steps: d(base.total_steps),
            lr_warmup_steps: d(base.lr_warmup_steps),
            flops_warmup_steps: d(base.flops_warmup_steps),
            logits_warmup_steps: d(base.logits_warmup_steps),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pretrain: {m}")));
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad("mask_prob must be in (0, 1)");
        }
        if !(self.lambda_flops >= 0.0) {
            return bad("lambda_flops must be >= 0");
        }
        if self.lr_warmup_steps > self.total_steps
            || self.flops_warmup_steps > self.total_steps
            || self.logits_warmup_steps > self.total_steps
        {
            return bad("warmup steps must not exceed total_steps");
        }
        if self.batch_size == 0 || self.max_len < 3 {
            return bad("batch_size must be positive and max_len >= 3");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        linear_warmup_decay(step, self.learning_rate, self.lr_warmup_steps, self.total_steps)
    }

    /// Coefficient of the MLM-SPLADE term: linear 0 -> 1 ramp.
    pub fn logits_weight(&self, step: usize) -> f64 {
        if self.logits_warmup_steps == 0 || step >= self.logits_warmup_steps {
            1.0
        } else {
            step as f64 / self.logits_warmup_steps as f64
        }
    }
}

/// `lambda * (e^(t/T) - 1) / (e - 1)` with `t = min(step, T)`; exactly 0 at
/// step 0 and exactly `lambda` from step `T` on.
pub fn flops_weight(step: usize, config: &PretrainConfig) -> f64 {
    let t = config.flops_warmup_steps;
    if step >= t {
        return config.lambda_flops;
    }
    let x = step as f64 / t as f64;
    config.lambda_flops * x.exp_m1() / (std::f64::consts::E - 1.0)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input_ids: Vec<Vec<TokenId>>,
    /// Original id at positions to predict, [`NO_LABEL`] elsewhere.
    pub labels: Vec<Vec<TokenId>>,
    pub attention_masks: Vec<Vec<bool>>,
}

impl MaskedBatch {
    pub fn num_targets(&self) -> usize {
        self.labels.iter().flatten().filter(|&&l| l != NO_LABEL).count()
    }

    pub fn target_positions(&self, seq: usize) -> Vec<usize> {
        self.labels[seq].iter().enumerate().filter(|(_, &l)| l != NO_LABEL).map(|(i, _)| i).collect()
    }

    pub fn targets(&self, seq: usize) -> Vec<usize> {
        self.labels[seq].iter().filter(|&&l| l != NO_LABEL).map(|&l| l as usize).collect()
    }
}

/// BERT masking: every non-special, non-padding token is selected with
/// probability `mask_prob`; a selected token becomes `[MASK]` (80%), a
/// uniformly random non-special id (10%) or stays unchanged (10%).
pub fn mask_batch<R: Rng>(ids: &[Vec<TokenId>], vocab_size: usize, mask_prob: f64, rng: &mut R) -> MaskedBatch {
    let mut input_ids = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    let mut attention_masks = Vec::with_capacity(ids.len());
    for seq in ids {
        let mut inp = seq.clone();
        let mut lab = vec![NO_LABEL; seq.len()];
        for (i, &tok) in seq.iter().enumerate() {
            if is_special(tok) {
                continue;
            }
            if rng.random::<f64>() < mask_prob {
                lab[i] = tok;
                let r: f64 = rng.random();
                if r < 0.8 {
                    inp[i] = MASK;
                } else if r < 0.9 && vocab_size > NUM_SPECIAL {
                    inp[i] = rng.random_range(NUM_SPECIAL as TokenId..vocab_size as TokenId);
                }
            }
        }
        attention_masks.push(seq.iter().map(|&t| t != PAD).collect());
        input_ids.push(inp);
        labels.push(lab);
    }
    MaskedBatch { input_ids, labels, attention_masks }
}

fn labelled_rows(labels: &[TokenId]) -> (Vec<usize>, Vec<usize>) {
    labels.iter().enumerate().filter(|(_, &l)| l != NO_LABEL).map(|(i, &l)| (i, l as usize)).unzip()
}

fn mean_cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[TokenId], transform: bool) -> T {
    let (rows, targets) = labelled_rows(labels);
    if rows.is_empty() {
        return T::zero();
    }
    let mut g: Graph<'_, T> = Graph::new();
    let x = g.input(logits.clone());
    let sel = g.select_rows(x, &rows);
    let sel = if transform { g.splade_act(sel) } else { sel };
    let ce = g.cross_entropy_sum(sel, &targets);
    g.value(ce).item() / T::of(rows.len() as f64)
}

/// Mean softmax cross-entropy over labelled positions (0 when none).
pub fn mlm_loss<T: Scalar>(logits: &Matrix<T>, labels: &[TokenId]) -> T {
    mean_cross_entropy(logits, labels, false)
}

/// [`mlm_loss`] on `log(1 + relu(logits))`.
pub fn mlm_splade_loss<T: Scalar>(logits: &Matrix<T>, labels: &[TokenId]) -> T {
    mean_cross_entropy(logits, labels, true)
}

/// `sum_j (mean_d w_j^(d))^2` over dense nonnegative representation rows.
pub fn flops_loss<T: Scalar>(reps: &[Vec<T>]) -> Result<T> {
    let first = reps.first().ok_or(Error::EmptyBatch)?;
    let dim = first.len();
    let mut mean = vec![T::zero(); dim];
    for r in reps {
        if r.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: r.len() });
        }
        for (m, &w) in mean.iter_mut().zip(r) {
            *m += w;
        }
    }
    let n = T::of(reps.len() as f64);
    Ok(mean.into_iter().map(|m| (m / n) * (m / n)).sum())
}

/// [`flops_loss`] over sparse vectors.
pub fn flops_loss_sparse(reps: &[SparseVector]) -> Result<f64> {
    if reps.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sums: std::collections::BTreeMap<u32, f64> = Default::default();
    for r in reps {
        for &(t, w) in r.entries() {
            *sums.entry(t).or_default() += w as f64;
        }
    }
    let n = reps.len() as f64;
    Ok(sums.values().map(|s| (s / n) * (s / n)).sum())
}

/// FLOPS on the loss graph: `stacked` is `batch x vocab`.
pub fn flops_node<T: Scalar>(g: &mut Graph<'_, T>, stacked: NodeId) -> NodeId {
    let mean = g.mean_rows(stacked);
    g.sum_squares(mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub mlm: f64,
    pub mlm_splade: f64,
    pub flops: f64,
    pub lr: f64,
    pub flops_weight: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,mlm,mlm_splade,flops,lr,flops_weight";

pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.mlm, r.mlm_splade, r.flops, r.lr, r.flops_weight);
    }
    s
}

pub fn write_loss_log(records: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, loss_log_csv(records)).map_err(|e| Error::io(path, e))
}

/// Loss of one masked batch. Returns `(total, [mlm, mlm_splade, flops])` and
/// parameter gradients.
pub fn pretrain_batch_loss<T: Scalar>(
    model: &EncoderModel<T>,
    batch: &MaskedBatch,
    mode: PretrainMode,
    logits_weight: f64,
    flops_weight: f64,
) -> Result<crate::batch::StepResult<T>> {
    let n_targets = batch.num_targets();
    let with_splade = mode == PretrainMode::MlmFlops;
    let vocab = model.config().vocab_size;
    batch_step(
        model,
        batch.input_ids.len(),
        |i, s| {
            let ids = &batch.input_ids[i];
            let mask = &batch.attention_masks[i];
            let hidden = s.encode(ids, None, mask)?;
            let rows = batch.target_positions(i);
            let targets = batch.targets(i);
            let mut outs = Vec::with_capacity(3);
            if with_splade {
                let logits = s.mlm_logits(hidden);
                if rows.is_empty() {
                    let z = s.graph_mut().input(Matrix::scalar(T::zero()));
                    outs.extend([z, z]);
                } else {
                    let g = s.graph_mut();
                    let sel = g.select_rows(logits, &rows);
                    let ce = g.cross_entropy_sum(sel, &targets);
                    let act = g.splade_act(sel);
                    let ce_sp = g.cross_entropy_sum(act, &targets);
                    outs.extend([ce, ce_sp]);
                }
                outs.push(s.splade_pool(logits, mask)?);
            } else if rows.is_empty() {
                outs.push(s.graph_mut().input(Matrix::scalar(T::zero())));
            } else {
                let logits = s.mlm_logits_at(hidden, &rows);
                outs.push(s.graph_mut().cross_entropy_sum(logits, &targets));
            }
            Ok(outs)
        },
        |g, ins| {
            let inv = T::one() / T::of(n_targets.max(1) as f64);
            let ce: Vec<NodeId> = ins.iter().map(|o| o[0]).collect();
            let ce = g.stack_rows(&ce);
            let ce = g.sum(ce);
            let mlm = g.scale(ce, inv);
            if !with_splade {
                return Ok(LossNodes { total: mlm, parts: vec![mlm] });
            }
            let sp: Vec<NodeId> = ins.iter().map(|o| o[1]).collect();
            let sp = g.stack_rows(&sp);
            let sp = g.sum(sp);
            let mlm_sp = g.scale(sp, inv);
            let reps: Vec<NodeId> = ins.iter().map(|o| o[2]).collect();
            let stacked = g.stack_rows(&reps);
            debug_assert_eq!(g.value(stacked).cols(), vocab);
            let flops = flops_node(g, stacked);
            let a = g.scale(mlm_sp, T::of(logits_weight));
            let b = g.scale(flops, T::of(flops_weight));
            let total = g.add(mlm, a);
            let total = g.add(total, b);
            Ok(LossNodes { total, parts: vec![mlm, mlm_sp, flops] })
        },
    )
}

pub struct PretrainOutput<T> {
    pub model: EncoderModel<T>,
    pub log: Vec<LossRecord>,
}

/// Sequence sampler: reshuffles the corpus every epoch with a seeded RNG.
pub(crate) struct Shuffler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Shuffler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..n).collect(), pos: n, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.pos = s.order.len();
        s
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs `total_steps` Adam updates (steps numbered from 1) over `corpus`,
/// a list of already tokenized `[CLS] ... [SEP]` sequences.
pub fn pretrain<T: Scalar>(
    mut model: EncoderModel<T>,
    corpus: &[Vec<TokenId>],
    config: &PretrainConfig,
    mode: PretrainMode,
) -> Result<PretrainOutput<T>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let max_len = config.max_len.min(model.config().max_positions);
    let corpus: Vec<Vec<TokenId>> = corpus.iter().map(|s| truncate_keep_sep(s, max_len)).collect();
    let mut sampler = Shuffler::new(corpus.len(), config.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x6d61_736b));
    let mut opt = Adam::new(model.params());
    let vocab = model.config().vocab_size;
    let mut log = Vec::with_capacity(config.total_steps);
    for step in 1..=config.total_steps {
        let idx = sampler.next_batch(config.batch_size);
        let seqs: Vec<Vec<TokenId>> = idx.iter().map(|&i| corpus[i].clone()).collect();
        let batch = mask_batch(&seqs, vocab, config.mask_prob, &mut mask_rng);
        let lr = config.learning_rate_at(step);
        let (lw, fw) = match mode {
            PretrainMode::Mlm => (0.0, 0.0),
            PretrainMode::MlmFlops => (config.logits_weight(step), flops_weight(step, config)),
        };
        let res = pretrain_batch_loss(&model, &batch, mode, lw, fw)?;
        if !res.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let part = |i: usize| res.parts.get(i).map_or(0.0, |v| v.as_f64());
        log.push(LossRecord { step, mlm: part(0), mlm_splade: part(1), flops: part(2), lr, flops_weight: fw });
        opt.step(model.params_mut(), &res.grads, T::of(lr));
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: loss {:.4}", res.total.as_f64());
        }
    }
    Ok(PretrainOutput { model, log })
}

pub(crate) fn truncate_keep_sep(seq: &[TokenId], max_len: usize) -> Vec<TokenId> {
    if seq.len() <= max_len {
        return seq.to_vec();
    }
    let mut out = seq[..max_len - 1].to_vec();
    out.push(*seq.last().expect("nonempty"));
    out
}

/// Fraction of masked positions whose argmax prediction equals the label,
/// over one seeded masking of `corpus`.
pub fn masked_accuracy<T: Scalar>(
    model: &EncoderModel<T>,
    corpus: &[Vec<TokenId>],
    mask_prob: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = mask_batch(corpus, model.config().vocab_size, mask_prob, &mut rng);
    let per_seq = crate::batch::par_map(&(0..corpus.len()).collect::<Vec<_>>(), |&i| {
        let rows = batch.target_positions(i);
        if rows.is_empty() {
            return Ok((0usize, 0usize));
        }
        let targets = batch.targets(i);
        let mut s = model.session();
        let h = s.encode(&batch.input_ids[i], None, &batch.attention_masks[i])?;
        let l = s.mlm_logits_at(h, &rows);
        let logits = s.value(l);
        let hits = (0..rows.len())
            .filter(|&r| {
                let row = logits.row(r);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == targets[r]
            })
            .count();
        Ok((hits, rows.len()))
    })?;
    let (hits, total) = per_seq.into_iter().fold((0, 0), |(a, b), (h, t)| (a + h, b + t));
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}
