//! Glue between encoders and indexes: encoding texts, producing runs,
//! reranking and scoring runs against qrels.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batch::par_map;
use crate::data::Collection;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::evaluation::{mrr_at_k, ndcg_at_k, recall_at_k, MetricReport, Qrels};
use crate::index::{search_dense, search_sparse, DenseIndex, InvertedIndex, RankedList, Run};
use crate::repr::{DenseVector, SparseVector};
use crate::scalar::Scalar;
use crate::tokenizer::Vocab;

/// SPLADE vectors of every text, `[CLS] .. [SEP]` wrapped and truncated to
/// `max_len`.
pub fn encode_sparse_all<T: Scalar>(
    model: &EncoderModel<T>,
    vocab: &Vocab,
    texts: &Collection,
    max_len: usize,
) -> Result<Vec<(String, SparseVector)>> {
    let items: Vec<(&str, &str)> = texts.iter().collect();
    par_map(&items, |&(id, text)| Ok((id.to_string(), model.encode_sparse(&vocab.encode(text, max_len))?)))
}

pub fn encode_dense_all<T: Scalar>(
    model: &EncoderModel<T>,
    vocab: &Vocab,
    texts: &Collection,
    max_len: usize,
) -> Result<Vec<(String, DenseVector)>> {
    let items: Vec<(&str, &str)> = texts.iter().collect();
    par_map(&items, |&(id, text)| Ok((id.to_string(), model.encode_dense(&vocab.encode(text, max_len))?)))
}

pub fn sparse_run(index: &InvertedIndex, queries: &[(String, SparseVector)], k: usize) -> Run {
    queries.iter().map(|(id, q)| (id.clone(), search_sparse(index, id, q, k))).collect()
}

pub fn dense_run(index: &DenseIndex, queries: &[(String, DenseVector)], k: usize) -> Result<Run> {
    queries.iter().map(|(id, q)| Ok((id.clone(), search_dense(index, id, q, k)?))).collect()
}

/// Rescores the top `depth` hits of every list with the cross-encoder. The
/// rescored hits come first; the remaining hits keep their order and get
/// scores strictly below the lowest rescored one.
pub fn rerank_run<T: Scalar>(
    model: &EncoderModel<T>,
    vocab: &Vocab,
    first_stage: &Run,
    queries: &Collection,
    collection: &Collection,
    depth: usize,
    pair_max_len: usize,
) -> Result<Run> {
    let lists: Vec<&RankedList> = first_stage.values().collect();
    let doc_tokens: HashMap<&str, Vec<u32>> = lists
        .iter()
        .flat_map(|l| l.hits.iter().take(depth))
        .map(|(d, _)| {
            let text = collection.get(d).ok_or_else(|| Error::DanglingReference { kind: "document", id: d.clone() })?;
            Ok((d.as_str(), vocab.tokenize(text)))
        })
        .collect::<Result<_>>()?;
    let reranked = par_map(&lists, |list| {
        let qtext = queries
            .get(&list.query_id)
            .ok_or_else(|| Error::DanglingReference { kind: "query", id: list.query_id.clone() })?;
        let q = vocab.tokenize(qtext);
        let head = &list.hits[..depth.min(list.hits.len())];
        let mut scored: Vec<(usize, f64)> = head
            .iter()
            .enumerate()
            .map(|(i, (d, _))| Ok((i, model.cross_score(&q, &doc_tokens[d.as_str()], pair_max_len)?.as_f64())))
            .collect::<Result<_>>()?;
        // stable: equal scores keep first-stage order
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut hits: Vec<(String, f64)> = scored.iter().map(|&(i, s)| (head[i].0.clone(), s)).collect();
        let floor = scored.last().map_or(0.0, |s| s.1);
        for (rank, (d, _)) in list.hits[head.len()..].iter().enumerate() {
            hits.push((d.clone(), floor - 1.0 - rank as f64));
        }
        Ok((list.query_id.clone(), RankedList { query_id: list.query_id.clone(), hits }))
    })?;
    Ok(reranked.into_iter().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mrr,
    Ndcg,
    Recall,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mrr" => Ok(Self::Mrr),
            "ndcg" => Ok(Self::Ndcg),
            "recall" | "r" => Ok(Self::Recall),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub name: Metric,
    pub k: usize,
}

impl MetricSpec {
    pub fn evaluate(&self, run: &Run, qrels: &Qrels) -> Result<MetricReport> {
        match self.name {
            Metric::Mrr => mrr_at_k(run, qrels, self.k),
            Metric::Ndcg => ndcg_at_k(run, qrels, self.k),
            Metric::Recall => recall_at_k(run, qrels, self.k),
        }
    }
}

impl FromStr for MetricSpec {
    type Err = Error;
    /// `mrr@10`, `ndcg@10`, `recall@1000`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = s.split_once('@').ok_or_else(|| Error::Config(format!("metric {s:?} lacks @k")))?;
        let k = k.parse().map_err(|_| Error::Config(format!("bad cutoff in {s:?}")))?;
        Ok(Self { name: name.parse()?, k })
    }
}

/// MRR@10, nDCG@10 and R@1000.
pub fn default_metrics() -> Vec<MetricSpec> {
    vec![
        MetricSpec { name: Metric::Mrr, k: 10 },
        MetricSpec { name: Metric::Ndcg, k: 10 },
        MetricSpec { name: Metric::Recall, k: 1000 },
    ]
}

pub fn evaluate_run(run: &Run, qrels: &Qrels, metrics: &[MetricSpec]) -> Result<Vec<MetricReport>> {
    metrics.iter().map(|m| m.evaluate(run, qrels)).collect()
}
