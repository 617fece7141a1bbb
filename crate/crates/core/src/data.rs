//! MSMARCO/TREC style file formats and the seeded synthetic task.
//!
//! * collection and queries: `id \t text`
//! * qrels: `qid 0 docid grade`, whitespace separated
//! * triplets: `qid \t pos \t neg1,neg2,...`
//!
//! Ids are opaque strings without whitespace (or commas, for documents
//! listed as negatives); text is a single line without tabs.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Qrels;

/// Ordered `id -> text` map (documents or queries).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Collection {
    ids: Vec<String>,
    texts: Vec<String>,
    position: HashMap<String, usize>,
}

fn check_id(id: &str) -> std::result::Result<(), String> {
    if id.is_empty() {
        Err("empty id".into())
    } else if id.chars().any(|c| c.is_whitespace() || c == ',') {
        Err(format!("id {id:?} contains whitespace or a comma"))
    } else {
        Ok(())
    }
}

impl Collection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, text: &str) -> Result<()> {
        check_id(id).map_err(Error::InvalidRecord)?;
        if text.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidRecord(format!("text of {id} contains a tab or line break")));
        }
        if self.position.contains_key(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        self.position.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.texts.push(text.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.position.get(id).map(|&i| self.texts[i].as_str())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.position.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.position.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.ids.iter().map(String::as_str).zip(self.texts.iter().map(String::as_str))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (id, text) in self.iter() {
            let _ = writeln!(s, "{id}\t{text}");
        }
        s
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut c = Collection::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: String| Error::MalformedLine { path: path.to_path_buf(), line: i + 1, reason };
            let (id, body) = line.split_once('\t').ok_or_else(|| bad("expected `id<TAB>text`".into()))?;
            if body.contains('\t') {
                return Err(bad("more than one tab".into()));
            }
            match c.insert(id, body) {
                Err(Error::DuplicateId(id)) => return Err(Error::DuplicateId(id)),
                Err(Error::InvalidRecord(r)) => return Err(bad(r)),
                other => other?,
            }
        }
        Ok(c)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn load_collection(path: impl AsRef<Path>) -> Result<Collection> {
    let path = path.as_ref();
    Collection::parse_tsv(&read(path)?, path)
}

/// Queries share the collection format.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Collection> {
    load_collection(path)
}

pub fn write_collection(c: &Collection, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &c.to_tsv())
}

pub fn parse_qrels(text: &str, path: &Path) -> Result<Qrels> {
    let mut q = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::MalformedLine { path: path.to_path_buf(), line: i + 1, reason: reason.into() };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad("expected `qid 0 docid grade`"));
        }
        let grade: u32 = f[3].parse().map_err(|_| bad("grade is not a nonnegative integer"))?;
        q.insert(f[0], f[2], grade)?;
    }
    Ok(q)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    parse_qrels(&read(path)?, path)
}

pub fn qrels_to_string(q: &Qrels) -> String {
    let mut s = String::new();
    for (qid, doc, g) in q.iter() {
        let _ = writeln!(s, "{qid} 0 {doc} {g}");
    }
    s
}

pub fn write_qrels(q: &Qrels, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &qrels_to_string(q))
}

/// Every judged query exists in `queries` and every judged document in
/// `collection`.
pub fn check_qrels(q: &Qrels, queries: &Collection, collection: &Collection) -> Result<()> {
    for (qid, doc, _) in q.iter() {
        if !queries.contains(qid) {
            return Err(Error::DanglingReference { kind: "query", id: qid.to_string() });
        }
        if !collection.contains(doc) {
            return Err(Error::DanglingReference { kind: "document", id: doc.to_string() });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub query_id: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Triplets {
    pub records: Vec<Triplet>,
}

impl Triplets {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, t: Triplet) -> Result<()> {
        for id in std::iter::once(&t.query_id).chain(std::iter::once(&t.positive)).chain(&t.negatives) {
            check_id(id).map_err(Error::InvalidRecord)?;
        }
        if t.negatives.is_empty() {
            return Err(Error::InvalidRecord(format!("triplet for {} has no negatives", t.query_id)));
        }
        if t.negatives.contains(&t.positive) {
            return Err(Error::InvalidRecord(format!("positive {} listed as a negative", t.positive)));
        }
        self.records.push(t);
        Ok(())
    }

    /// Every id resolves.
    pub fn check(&self, queries: &Collection, collection: &Collection) -> Result<()> {
        for t in &self.records {
            if !queries.contains(&t.query_id) {
                return Err(Error::DanglingReference { kind: "query", id: t.query_id.clone() });
            }
            for d in std::iter::once(&t.positive).chain(&t.negatives) {
                if !collection.contains(d) {
                    return Err(Error::DanglingReference { kind: "document", id: d.clone() });
                }
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for t in &self.records {
            let _ = writeln!(s, "{}\t{}\t{}", t.query_id, t.positive, t.negatives.join(","));
        }
        s
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut out = Triplets::default();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: String| Error::MalformedLine { path: path.to_path_buf(), line: i + 1, reason };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad("expected `qid<TAB>pos<TAB>neg1,neg2,...`".into()));
            }
            let t = Triplet {
                query_id: f[0].to_string(),
                positive: f[1].to_string(),
                negatives: f[2].split(',').map(str::to_string).collect(),
            };
            out.push(t).map_err(|e| bad(e.to_string()))?;
        }
        Ok(out)
    }
}

pub fn load_triplets(path: impl AsRef<Path>) -> Result<Triplets> {
    let path = path.as_ref();
    Triplets::parse_tsv(&read(path)?, path)
}

pub fn write_triplets(t: &Triplets, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &t.to_tsv())
}

/// Parameters of the synthetic topic-retrieval task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_docs: usize,
    /// Training queries (the ones with triplets).
    pub num_queries: usize,
    /// Held-out queries used for evaluation.
    pub num_test_queries: usize,
    /// Background (non-topical) word types.
    pub vocab_size_words: usize,
    pub keywords_per_topic: usize,
    pub num_topics: usize,
    /// Inclusive range of words per document.
    pub doc_len_range: (usize, usize),
    pub negatives_per_query: usize,
    /// Triplets per training query, each with a different positive where
    /// possible.
    pub triplets_per_query: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_docs: 1000,
            num_queries: 100,
            num_test_queries: 50,
            vocab_size_words: 400,
            keywords_per_topic: 10,
            num_topics: 20,
            doc_len_range: (16, 32),
            negatives_per_query: 16,
            triplets_per_query: 20,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_docs == 0
            || self.num_queries == 0
            || self.vocab_size_words == 0
            || self.keywords_per_topic < 3
            || self.num_topics == 0
            || self.negatives_per_query == 0
            || self.triplets_per_query == 0
        {
            return bad("counts must be positive (at least 3 keywords per topic)");
        }
        if self.doc_len_range.0 < 2 || self.doc_len_range.0 > self.doc_len_range.1 {
            return bad("doc_len_range must satisfy 2 <= min <= max");
        }
        if self.num_docs < self.num_topics {
            return bad("need at least one document per topic");
        }
        if self.num_topics > 1 && self.num_docs - self.num_docs.div_ceil(self.num_topics) < self.negatives_per_query {
            return bad("not enough off-topic documents for the requested negatives");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub collection: Collection,
    pub train_queries: Collection,
    pub test_queries: Collection,
    /// Judgments for training and test queries.
    pub qrels: Qrels,
    pub triplets: Triplets,
    /// `keywords[t]`: the keyword set of topic `t`.
    pub keywords: Vec<Vec<String>>,
    pub doc_topics: Vec<usize>,
    pub train_topics: Vec<usize>,
    pub test_topics: Vec<usize>,
}

pub const COLLECTION_FILE: &str = "collection.tsv";
pub const TRAIN_QUERIES_FILE: &str = "queries.train.tsv";
pub const TEST_QUERIES_FILE: &str = "queries.test.tsv";
pub const QRELS_FILE: &str = "qrels.txt";
pub const TRIPLETS_FILE: &str = "triplets.tsv";

impl SyntheticData {
    /// Writes the five files into `dir` and returns their paths in the order
    /// collection, train queries, test queries, qrels, triplets.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<[PathBuf; 5]> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = [COLLECTION_FILE, TRAIN_QUERIES_FILE, TEST_QUERIES_FILE, QRELS_FILE, TRIPLETS_FILE].map(|f| dir.join(f));
        write_collection(&self.collection, &paths[0])?;
        write_collection(&self.train_queries, &paths[1])?;
        write_collection(&self.test_queries, &paths[2])?;
        write_qrels(&self.qrels, &paths[3])?;
        write_triplets(&self.triplets, &paths[4])?;
        Ok(paths)
    }

    /// Index of the topic a keyword belongs to.
    pub fn keyword_topics(&self) -> HashMap<&str, usize> {
        self.keywords.iter().enumerate().flat_map(|(t, ks)| ks.iter().map(move |k| (k.as_str(), t))).collect()
    }
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn make_words(n: usize, rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).expect("nonempty"), VOWELS.choose(rng).expect("nonempty")))
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Topic assignment with every topic used at least once, then shuffled.
fn assign_topics(n: usize, topics: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).map(|i| i % topics).collect();
    v.shuffle(rng);
    v
}

/// Documents mix keywords of their topic with Zipf-distributed background
/// words; queries hold 2-3 distinct keywords of one topic plus 1-2
/// background words. A document is relevant to a query iff they share the
/// topic. Triplet negatives come from other topics.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = HashSet::new();
    let background = make_words(spec.vocab_size_words, &mut rng, &mut taken);
    let keywords: Vec<Vec<String>> =
        (0..spec.num_topics).map(|_| make_words(spec.keywords_per_topic, &mut rng, &mut taken)).collect();
    let zipf = WeightedIndex::new((1..=background.len()).map(|r| 1.0 / r as f64)).expect("positive weights");

    let doc_topics = assign_topics(spec.num_docs, spec.num_topics, &mut rng);
    let mut collection = Collection::new();
    let width = spec.num_docs.to_string().len();
    for (i, &t) in doc_topics.iter().enumerate() {
        let len = rng.random_range(spec.doc_len_range.0..=spec.doc_len_range.1);
        let n_kw = (len / 4).max(1);
        let mut words: Vec<&str> = (0..n_kw).map(|_| keywords[t].choose(&mut rng).expect("nonempty").as_str()).collect();
        words.extend((n_kw..len).map(|_| background[zipf.sample(&mut rng)].as_str()));
        words.shuffle(&mut rng);
        collection.insert(&format!("d{i:0width$}"), &words.join(" "))?;
    }

    let make_queries = |n: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Result<(Collection, Vec<usize>)> {
        let topics = assign_topics(n, spec.num_topics, rng);
        let mut c = Collection::new();
        let width = n.to_string().len();
        for (i, &t) in topics.iter().enumerate() {
            let n_kw = rng.random_range(2..=3);
            let mut words: Vec<&str> = keywords[t].choose_multiple(rng, n_kw).map(String::as_str).collect();
            let n_bg = rng.random_range(1..=2);
            words.extend((0..n_bg).map(|_| background[zipf.sample(rng)].as_str()));
            words.shuffle(rng);
            c.insert(&format!("{prefix}{i:0width$}"), &words.join(" "))?;
        }
        Ok((c, topics))
    };
    let (train_queries, train_topics) = make_queries(spec.num_queries, "q", &mut rng)?;
    let (test_queries, test_topics) = make_queries(spec.num_test_queries, "t", &mut rng)?;

    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); spec.num_topics];
    for (d, &t) in doc_topics.iter().enumerate() {
        by_topic[t].push(d);
    }
    let doc_ids = collection.ids().to_vec();
    let mut qrels = Qrels::new();
    for (qs, topics) in [(&train_queries, &train_topics), (&test_queries, &test_topics)] {
        for (qid, &t) in qs.ids().iter().zip(topics.iter()) {
            for &d in &by_topic[t] {
                qrels.insert(qid, &doc_ids[d], 1)?;
            }
        }
    }

    let mut triplets = Triplets::default();
    for (qid, &t) in train_queries.ids().iter().zip(&train_topics) {
        let off_topic: Vec<usize> = (0..spec.num_docs).filter(|&d| doc_topics[d] != t).collect();
        let positives: Vec<usize> =
            by_topic[t].choose_multiple(&mut rng, spec.triplets_per_query.min(by_topic[t].len())).copied().collect();
        for j in 0..spec.triplets_per_query {
            let pos = positives[j % positives.len()];
            let negatives = if off_topic.is_empty() {
                // a single topic has no off-topic documents; fall back to other docs
                let others: Vec<usize> = (0..spec.num_docs).filter(|&d| d != pos).collect();
                others.choose_multiple(&mut rng, spec.negatives_per_query.min(others.len())).copied().collect::<Vec<_>>()
            } else {
                off_topic.choose_multiple(&mut rng, spec.negatives_per_query).copied().collect::<Vec<_>>()
            };
            if negatives.is_empty() {
                return Err(Error::Config("synthetic spec: a single document leaves no negatives".into()));
            }
            triplets.push(Triplet {
                query_id: qid.clone(),
                positive: doc_ids[pos].clone(),
                negatives: negatives.into_iter().map(|d| doc_ids[d].clone()).collect(),
            })?;
        }
    }

    Ok(SyntheticData { collection, train_queries, test_queries, qrels, triplets, keywords, doc_topics, train_topics, test_topics })
}

/// Scores each document by how many of its words are keywords of the
/// topics named by the query's keywords; returns the top `k` document
/// positions per query (ties by position). This is the upper anchor for the
/// synthetic task.
pub fn keyword_overlap_ranking(data: &SyntheticData, query: &str, k: usize) -> Vec<usize> {
    let topic_of = data.keyword_topics();
    let q_topics: BTreeSet<usize> = query.split_whitespace().filter_map(|w| topic_of.get(w).copied()).collect();
    let mut scored: Vec<(usize, usize)> = data
        .collection
        .texts()
        .iter()
        .enumerate()
        .map(|(d, text)| {
            let s = text.split_whitespace().filter(|w| topic_of.get(w).is_some_and(|t| q_topics.contains(t))).count();
            (d, s)
        })
        .filter(|&(_, s)| s > 0)
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(d, _)| d).collect()
}

#[cfg(test)]
mod tests;
