//! Ranking metrics and paired t-tests with Bonferroni correction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{RankedList, Run};
use crate::stats::student_t_two_sided;

/// `(query, doc) -> grade`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: &str, doc: &str, grade: u32) -> Result<()> {
        let per = self.judgments.entry(query.to_string()).or_default();
        if per.insert(doc.to_string(), grade).is_some() {
            return Err(Error::DuplicateId(format!("judgment ({query}, {doc})")));
        }
        Ok(())
    }

    pub fn grade(&self, query: &str, doc: &str) -> u32 {
        self.judgments.get(query).and_then(|m| m.get(doc)).copied().unwrap_or(0)
    }

    pub fn judged(&self, query: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn num_queries(&self) -> usize {
        self.judgments.len()
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// `(query, doc, grade)` in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments.iter().flat_map(|(q, m)| m.iter().map(move |(d, &g)| (q.as_str(), d.as_str(), g)))
    }

    /// Judgments restricted to the given queries.
    pub fn restrict<'a>(&self, queries: impl IntoIterator<Item = &'a str>) -> Qrels {
        let judgments = queries
            .into_iter()
            .filter_map(|q| self.judgments.get(q).map(|m| (q.to_string(), m.clone())))
            .collect();
        Qrels { judgments }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub k: usize,
    pub per_query: BTreeMap<String, f64>,
    pub aggregate: f64,
}

impl MetricReport {
    fn from_values(metric: &str, k: usize, per_query: BTreeMap<String, f64>) -> Self {
        let aggregate =
            if per_query.is_empty() { 0.0 } else { per_query.values().sum::<f64>() / per_query.len() as f64 };
        Self { metric: metric.to_string(), k, per_query, aggregate }
    }

    /// Display label such as `MRR@10`.
    pub fn label(&self) -> String {
        format!("{}@{}", self.metric, self.k)
    }
}

fn per_query<F>(run: &Run, qrels: &Qrels, mut f: F) -> Result<BTreeMap<String, f64>>
where
    F: FnMut(&RankedList, &BTreeMap<String, u32>) -> f64,
{
    run.iter()
        .map(|(q, list)| {
            let judged = qrels.judged(q).ok_or_else(|| Error::QueryMissingJudgments(q.clone()))?;
            Ok((q.clone(), f(list, judged)))
        })
        .collect()
}

fn grade_of(judged: &BTreeMap<String, u32>, doc: &str) -> u32 {
    judged.get(doc).copied().unwrap_or(0)
}

pub fn mrr_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    let v = per_query(run, qrels, |list, judged| {
        list.hits
            .iter()
            .take(k)
            .position(|(d, _)| grade_of(judged, d) >= 1)
            .map_or(0.0, |r| 1.0 / (r + 1) as f64)
    })?;
    Ok(MetricReport::from_values("MRR", k, v))
}

/// Gain `2^g - 1`, discount `log2(rank + 1)`, ideal ranking from all judged
/// grades of the query.
pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let v = per_query(run, qrels, |list, judged| {
        let dcg: f64 = list
            .hits
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (d, _))| gain(grade_of(judged, d)) / ((i + 2) as f64).log2())
            .sum::<f64>()
            + 0.0; // the empty sum is -0.0
        let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| gain(g) / ((i + 2) as f64).log2()).sum();
        if idcg > 0.0 {
            dcg / idcg
        } else {
            0.0
        }
    })?;
    Ok(MetricReport::from_values("nDCG", k, v))
}

/// Queries without a relevant document score 0 and are logged.
pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    let v = per_query(run, qrels, |list, judged| {
        let relevant = judged.values().filter(|&&g| g >= 1).count();
        if relevant == 0 {
            log::warn!("query {} has no relevant documents; recall set to 0", list.query_id);
            return 0.0;
        }
        let found = list.hits.iter().take(k).filter(|(d, _)| grade_of(judged, d) >= 1).count();
        found as f64 / relevant as f64
    })?;
    Ok(MetricReport::from_values("R", k, v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub t: f64,
    pub p_raw: f64,
    pub p_corrected: f64,
    /// Nonzero differences without variance: `t` is infinite and `p` is the
    /// zero limit.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::MismatchedQuerySets);
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InsufficientData("at least 2 queries".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let (t, p, degenerate) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0, false)
        } else {
            (mean.signum() * f64::INFINITY, 0.0, true)
        }
    } else {
        let t = mean / (var / n as f64).sqrt();
        (t, student_t_two_sided(t, (n - 1) as f64), false)
    };
    Ok(PairedTest { mean_diff: mean, t, p_raw: p, p_corrected: p, degenerate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceMatrix {
    pub systems: Vec<String>,
    pub metric: String,
    pub alpha: f64,
    /// Number of pairwise comparisons, the Bonferroni factor.
    pub comparisons: usize,
    /// `tests[i][j]` compares system `i` against system `j` (`None` on the
    /// diagonal).
    pub tests: Vec<Vec<Option<PairedTest>>>,
    /// `better[i][j]`: system `i` is significantly better than system `j`.
    pub better: Vec<Vec<bool>>,
}

/// Every ordered pair of systems, corrected by `k(k-1)/2`.
pub fn paired_ttest_bonferroni(systems: &[(String, MetricReport)], alpha: f64) -> Result<SignificanceMatrix> {
    let k = systems.len();
    if k < 2 {
        return Err(Error::InsufficientData("at least 2 systems".into()));
    }
    let queries: Vec<&String> = systems[0].1.per_query.keys().collect();
    for (_, r) in &systems[1..] {
        if !r.per_query.keys().eq(queries.iter().copied()) {
            return Err(Error::MismatchedQuerySets);
        }
    }
    let values: Vec<Vec<f64>> = systems.iter().map(|(_, r)| r.per_query.values().copied().collect()).collect();
    let comparisons = k * (k - 1) / 2;
    let mut tests = vec![vec![None; k]; k];
    let mut better = vec![vec![false; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let mut t = paired_ttest(&values[i], &values[j])?;
            t.p_corrected = (t.p_raw * comparisons as f64).min(1.0);
            better[i][j] = t.p_corrected <= alpha && t.mean_diff > 0.0;
            tests[i][j] = Some(t);
        }
    }
    Ok(SignificanceMatrix {
        systems: systems.iter().map(|(n, _)| n.clone()).collect(),
        metric: systems[0].1.label(),
        alpha,
        comparisons,
        tests,
        better,
    })
}

/// Letter of the `i`-th system: a, b, ..., z, aa, ab, ...
pub fn system_letter(i: usize) -> String {
    let mut n = i;
    let mut s = Vec::new();
    loop {
        s.push(b'a' + (n % 26) as u8);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

impl SignificanceMatrix {
    /// Letters of the systems that system `i` significantly outperforms.
    pub fn superscripts(&self, i: usize) -> String {
        (0..self.systems.len()).filter(|&j| self.better[i][j]).map(system_letter).collect()
    }
}

/// One row per system: letter, name, and per metric the aggregate x100 with
/// the superscript letters of the systems it significantly beats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub metrics: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub letter: String,
    pub system: String,
    /// `(value x100, superscript letters)` per metric.
    pub cells: Vec<(f64, String)>,
}

/// `reports[s][m]`: metric `m` of system `s`; every system must list the
/// same metrics in the same order.
pub fn comparison_table(
    names: &[String],
    reports: &[Vec<MetricReport>],
    alpha: f64,
) -> Result<(ComparisonTable, Vec<SignificanceMatrix>)> {
    if names.len() != reports.len() || reports.is_empty() {
        return Err(Error::InsufficientData("one report list per system".into()));
    }
    let n_metrics = reports[0].len();
    if reports.iter().any(|r| r.len() != n_metrics) {
        return Err(Error::InsufficientData("the same metrics for every system".into()));
    }
    let mut matrices = Vec::with_capacity(n_metrics);
    for m in 0..n_metrics {
        let systems: Vec<(String, MetricReport)> =
            names.iter().zip(reports).map(|(n, r)| (n.clone(), r[m].clone())).collect();
        if systems.iter().any(|(_, r)| r.label() != systems[0].1.label()) {
            return Err(Error::InsufficientData("metrics listed in the same order for every system".into()));
        }
        matrices.push(paired_ttest_bonferroni(&systems, alpha)?);
    }
    let rows = names
        .iter()
        .enumerate()
        .map(|(i, name)| ComparisonRow {
            letter: system_letter(i),
            system: name.clone(),
            cells: (0..n_metrics).map(|m| (reports[i][m].aggregate * 100.0, matrices[m].superscripts(i))).collect(),
        })
        .collect();
    let metrics = reports[0].iter().map(MetricReport::label).collect();
    Ok((ComparisonTable { metrics, rows }, matrices))
}

impl ComparisonTable {
    /// Plain-text rendering; superscripts are written as `^{ab}`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let name_w = self.rows.iter().map(|r| r.system.len()).max().unwrap_or(6).max(6);
        let _ = write!(s, "{:<3} {:<name_w$}", "", "system");
        for m in &self.metrics {
            let _ = write!(s, " {m:>14}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<3} {:<name_w$}", format!("{})", r.letter), r.system);
            for (v, sup) in &r.cells {
                let cell = if sup.is_empty() { format!("{v:.1}") } else { format!("{v:.1}^{{{sup}}}") };
                let _ = write!(s, " {cell:>14}");
            }
            s.push('\n');
        }
        s
    }
}
