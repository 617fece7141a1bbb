//! Inverted index over sparse vectors, exact dense retrieval, R-FLOPS, and
//! TREC run files.
//!
//! Documents get dense internal numbers in insertion order; score ties are
//! broken by that order, which coincides with ascending id for collections
//! whose ids sort in file order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr::{DenseVector, SparseVector};

#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    /// Descending score, ties by ascending document number.
    pub hits: Vec<(String, f64)>,
}

/// Query id -> ranking.
pub type Run = BTreeMap<String, RankedList>;

#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    vocab_size: usize,
    doc_ids: Vec<String>,
    /// Indexed by term id; each posting list is sorted by document number.
    postings: Vec<Vec<(u32, f32)>>,
}

impl InvertedIndex {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn postings(&self, term: u32) -> &[(u32, f32)] {
        self.postings.get(term as usize).map_or(&[], Vec::as_slice)
    }

    pub fn num_postings(&self) -> usize {
        self.postings.iter().map(Vec::len).sum()
    }

    /// Fraction of documents with a positive weight on `term`.
    pub fn doc_activation_prob(&self, term: u32) -> f64 {
        if self.doc_ids.is_empty() {
            return 0.0;
        }
        self.postings(term).len() as f64 / self.doc_ids.len() as f64
    }

    /// Exact top-`k` by dot product as `(document number, score)`.
    pub fn top_k(&self, query: &SparseVector, k: usize) -> Vec<(u32, f64)> {
        if k == 0 || query.is_empty() {
            return Vec::new();
        }
        let mut acc = vec![0.0f64; self.doc_ids.len()];
        let mut touched = vec![false; self.doc_ids.len()];
        let mut hits: Vec<u32> = Vec::new();
        for &(t, qw) in query.entries() {
            for &(d, dw) in self.postings(t) {
                acc[d as usize] += qw as f64 * dw as f64;
                if !touched[d as usize] {
                    touched[d as usize] = true;
                    hits.push(d);
                }
            }
        }
        let mut scored: Vec<(u32, f64)> = hits.into_iter().map(|d| (d, acc[d as usize])).collect();
        select_top_k(&mut scored, k);
        scored
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut f).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// `u64` LE header length, JSON header, then for every nonempty term:
    /// `term_id: u32, count: u32` and `count` pairs of `doc: u32, weight: f32`,
    /// all little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let header = IndexHeader {
            format: INDEX_FORMAT.into(),
            version: 1,
            endianness: "little".into(),
            vocab_size: self.vocab_size,
            doc_count: self.doc_ids.len(),
            num_terms: self.postings.iter().filter(|p| !p.is_empty()).count(),
            doc_ids: self.doc_ids.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(8 * (self.num_postings() + header.num_terms));
        for (t, list) in self.postings.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            buf.extend_from_slice(&(t as u32).to_le_bytes());
            buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for &(d, x) in list {
                buf.extend_from_slice(&d.to_le_bytes());
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::IndexFormat(m.to_string());
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::IndexFormat(e.to_string()))?;
        let hlen = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?;
        let hlen = u64::from_le_bytes(hlen.try_into().expect("8 bytes")) as usize;
        let json = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: IndexHeader = serde_json::from_slice(json).map_err(|e| Error::IndexFormat(e.to_string()))?;
        if header.format != INDEX_FORMAT || header.version != 1 || header.endianness != "little" {
            return Err(bad("unsupported format, version or endianness"));
        }
        if header.doc_ids.len() != header.doc_count {
            return Err(bad("doc id table does not match doc_count"));
        }
        let mut words = bytes[8 + hlen..].chunks_exact(4);
        if !words.remainder().is_empty() {
            return Err(bad("trailing bytes"));
        }
        let mut next = || words.next().map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"));
        let mut postings = vec![Vec::new(); header.vocab_size];
        let mut last_term = None;
        for _ in 0..header.num_terms {
            let t = u32::from_le_bytes(next().ok_or_else(|| bad("truncated postings"))?);
            let n = u32::from_le_bytes(next().ok_or_else(|| bad("truncated postings"))?) as usize;
            if t as usize >= header.vocab_size || last_term.is_some_and(|l| l >= t) || n == 0 {
                return Err(bad("term ids must be increasing and within vocab"));
            }
            last_term = Some(t);
            let mut list = Vec::with_capacity(n);
            for _ in 0..n {
                let d = u32::from_le_bytes(next().ok_or_else(|| bad("truncated postings"))?);
                let x = f32::from_le_bytes(next().ok_or_else(|| bad("truncated postings"))?);
                if d as usize >= header.doc_count || !(x > 0.0 && x.is_finite()) {
                    return Err(bad("posting out of range"));
                }
                if list.last().is_some_and(|&(p, _)| p >= d) {
                    return Err(bad("postings must be strictly increasing"));
                }
                list.push((d, x));
            }
            postings[t as usize] = list;
        }
        if next().is_some() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { vocab_size: header.vocab_size, doc_ids: header.doc_ids, postings })
    }
}

const INDEX_FORMAT: &str = "scratch-ir-index";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexHeader {
    format: String,
    version: u32,
    endianness: String,
    vocab_size: usize,
    doc_count: usize,
    num_terms: usize,
    doc_ids: Vec<String>,
}

/// Descending score, then ascending document number.
fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

fn select_top_k(scored: &mut Vec<(u32, f64)>, k: usize) {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
}

/// Builds the index; `vocab_size` bounds the term ids.
pub fn build_index(docs: &[(String, SparseVector)], vocab_size: usize) -> Result<InvertedIndex> {
    if docs.is_empty() {
        return Err(Error::EmptyCollection);
    }
    if docs.len() > u32::MAX as usize {
        return Err(Error::InvalidConfig("too many documents".into()));
    }
    let mut seen = HashSet::with_capacity(docs.len());
    let mut postings: Vec<Vec<(u32, f32)>> = vec![Vec::new(); vocab_size];
    for (d, (id, v)) in docs.iter().enumerate() {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
        for &(t, w) in v.entries() {
            let list = postings
                .get_mut(t as usize)
                .ok_or(Error::IdOutOfRange { id: t as usize, size: vocab_size })?;
            list.push((d as u32, w));
        }
    }
    Ok(InvertedIndex { vocab_size, doc_ids: docs.iter().map(|(id, _)| id.clone()).collect(), postings })
}

pub fn search_sparse(index: &InvertedIndex, query_id: &str, query: &SparseVector, k: usize) -> RankedList {
    let hits = index.top_k(query, k).into_iter().map(|(d, s)| (index.doc_ids[d as usize].clone(), s)).collect();
    RankedList { query_id: query_id.to_string(), hits }
}

/// Row-major matrix of document embeddings for brute-force retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    doc_ids: Vec<String>,
    data: Vec<f32>,
}

impl DenseIndex {
    pub fn build(docs: &[(String, DenseVector)]) -> Result<Self> {
        let first = docs.first().ok_or(Error::EmptyCollection)?;
        let dim = first.1.len();
        let mut seen = HashSet::with_capacity(docs.len());
        let mut data = Vec::with_capacity(dim * docs.len());
        for (id, v) in docs {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
            }
            data.extend_from_slice(v.values());
        }
        Ok(Self { dim, doc_ids: docs.iter().map(|(id, _)| id.clone()).collect(), data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn top_k(&self, query: &DenseVector, k: usize) -> Result<Vec<(u32, f64)>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: query.len() });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let q = query.values();
        let mut scored: Vec<(u32, f64)> = self
            .data
            .chunks_exact(self.dim.max(1))
            .take(self.doc_ids.len())
            .enumerate()
            .map(|(d, row)| (d as u32, row.iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum()))
            .collect();
        if self.dim == 0 {
            scored = (0..self.doc_ids.len() as u32).map(|d| (d, 0.0)).collect();
        }
        select_top_k(&mut scored, k);
        Ok(scored)
    }
}

const DENSE_FORMAT: &str = "scratch-ir-dense-index";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseHeader {
    format: String,
    version: u32,
    endianness: String,
    dim: usize,
    doc_ids: Vec<String>,
}

impl DenseIndex {
    /// `u64` LE header length, JSON header, then the row-major LE `f32`
    /// embeddings.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = DenseHeader {
            format: DENSE_FORMAT.into(),
            version: 1,
            endianness: "little".into(),
            dim: self.dim,
            doc_ids: self.doc_ids.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(8 + json.len() + 4 * self.data.len());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |m: &str| Error::IndexFormat(m.to_string());
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let hlen = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?;
        let hlen = u64::from_le_bytes(hlen.try_into().expect("8 bytes")) as usize;
        let json = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: DenseHeader = serde_json::from_slice(json).map_err(|e| Error::IndexFormat(e.to_string()))?;
        if header.format != DENSE_FORMAT || header.version != 1 || header.endianness != "little" {
            return Err(bad("unsupported format, version or endianness"));
        }
        let body = &bytes[8 + hlen..];
        if body.len() != 4 * header.dim * header.doc_ids.len() {
            return Err(bad("embedding block has the wrong size"));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { dim: header.dim, doc_ids: header.doc_ids, data })
    }
}

pub fn search_dense(index: &DenseIndex, query_id: &str, query: &DenseVector, k: usize) -> Result<RankedList> {
    let hits = index.top_k(query, k)?.into_iter().map(|(d, s)| (index.doc_ids[d as usize].clone(), s)).collect();
    Ok(RankedList { query_id: query_id.to_string(), hits })
}

/// `sum_j p_j(q) * p_j(d)`, with `p_j(q)` the fraction of queries that
/// activate term `j` and `p_j(d)` the document activation probability.
pub fn estimate_rflops(queries: &[SparseVector], index: &InvertedIndex) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for q in queries {
        for t in q.terms() {
            *counts.entry(t).or_default() += 1;
        }
    }
    let nq = queries.len() as f64;
    // + 0.0: the empty sum is -0.0
    Ok(counts.into_iter().map(|(t, c)| c as f64 / nq * index.doc_activation_prob(t)).sum::<f64>() + 0.0)
}

/// Mean number of nonzero terms per vector.
pub fn mean_nonzeros(vectors: &[SparseVector]) -> f64 {
    if vectors.is_empty() {
        return 0.0;
    }
    vectors.iter().map(SparseVector::len).sum::<usize>() as f64 / vectors.len() as f64
}

/// TREC run lines `qid Q0 docid rank score tag`, queries in `run` order.
pub fn format_trec_run(run: &Run, tag: &str) -> String {
    let mut s = String::new();
    for list in run.values() {
        for (rank, (doc, score)) in list.hits.iter().enumerate() {
            let _ = writeln!(s, "{} Q0 {} {} {} {}", list.query_id, doc, rank + 1, score, tag);
        }
    }
    s
}

pub fn write_trec_run(run: &Run, tag: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_trec_run(run, tag)).map_err(|e| Error::io(path, e))
}

/// Parses a TREC run; hits are re-sorted by rank. Queries with no lines are
/// absent from the result.
pub fn parse_trec_run(text: &str, path: &Path) -> Result<Run> {
    let mut by_query: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    let mut seen: HashMap<String, HashSet<String>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::MalformedLine { path: path.to_path_buf(), line: i + 1, reason: reason.into() };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad("expected `qid Q0 docid rank score tag`"));
        }
        let rank: usize = f[3].parse().map_err(|_| bad("rank is not an integer"))?;
        let score: f64 = f[4].parse().map_err(|_| bad("score is not a number"))?;
        if !seen.entry(f[0].to_string()).or_default().insert(f[2].to_string()) {
            return Err(bad("document listed twice for the query"));
        }
        by_query.entry(f[0].to_string()).or_default().push((rank, f[2].to_string(), score));
    }
    Ok(by_query
        .into_iter()
        .map(|(q, mut hits)| {
            hits.sort_by_key(|h| h.0);
            let hits = hits.into_iter().map(|(_, d, s)| (d, s)).collect();
            (q.clone(), RankedList { query_id: q, hits })
        })
        .collect())
}

pub fn read_trec_run(path: impl AsRef<Path>) -> Result<Run> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trec_run(&text, path)
}
