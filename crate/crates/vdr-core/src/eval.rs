//! TREC-format I/O, ranking metrics, paired significance testing, and
//! token-level interpretability reports.
//!
//! Metric conventions (documented, since tooling differs):
//! * NDCG gain is the raw relevance grade with a `1/log2(rank+1)` discount;
//!   the ideal ranking is the judged documents sorted by grade, truncated at
//!   `k`. Queries whose ideal gain is zero score 0 and are still counted.
//! * Recall and MRR treat grade >= 1 as relevant and skip queries that have
//!   no relevant documents.
//! * Unjudged retrieved documents count as grade 0. Queries judged in the
//!   qrels but missing from the run score 0.

use std::collections::BTreeMap;
use std::path::Path;

use crate::sparsevec::SparseVector;
use crate::vocab::Vocabulary;
use crate::{Error, Result};

/// Relevance judgments: query id -> doc id -> grade.
#[derive(Debug, Clone, Default)]
pub struct Qrels {
    by_query: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: &str, docid: &str, grade: u32) -> Result<()> {
        let entry = self.by_query.entry(qid.to_string()).or_default();
        if entry.insert(docid.to_string(), grade).is_some() {
            return Err(Error::invalid(format!(
                "duplicate judgment for query {qid:?} doc {docid:?}"
            )));
        }
        Ok(())
    }

    pub fn queries(&self) -> impl Iterator<Item = &String> {
        self.by_query.keys()
    }

    pub fn judgments(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.by_query.get(qid)
    }

    pub fn num_queries(&self) -> usize {
        self.by_query.len()
    }

    /// Parse whitespace-separated `qid 0 docid grade` lines.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut qrels = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::parse(
                    source_name,
                    lineno + 1,
                    format!("expected 4 fields, got {}", fields.len()),
                ));
            }
            let grade: u32 = fields[3].parse().map_err(|_| {
                Error::parse(
                    source_name,
                    lineno + 1,
                    format!("bad grade {:?}", fields[3]),
                )
            })?;
            qrels
                .insert(fields[0], fields[2], grade)
                .map_err(|e| Error::parse(source_name, lineno + 1, e.to_string()))?;
        }
        Ok(qrels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Ranked retrieval output per query, scores descending (stable on ties).
#[derive(Debug, Clone, Default)]
pub struct RunFile {
    by_query: BTreeMap<String, Vec<(String, f64)>>,
}

impl RunFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one query's ranking in order (already sorted by the caller).
    pub fn insert_ranking(&mut self, qid: &str, ranking: Vec<(String, f64)>) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (docid, _) in &ranking {
            if !seen.insert(docid.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate doc {docid:?} for query {qid:?}"
                )));
            }
        }
        if self.by_query.insert(qid.to_string(), ranking).is_some() {
            return Err(Error::invalid(format!("duplicate query {qid:?}")));
        }
        Ok(())
    }

    pub fn ranking(&self, qid: &str) -> Option<&[(String, f64)]> {
        self.by_query.get(qid).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &String> {
        self.by_query.keys()
    }

    /// Parse whitespace-separated `qid Q0 docid rank score tag` lines. Lines
    /// are grouped per query and stable-sorted by score descending, so file
    /// order breaks ties.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut per_query: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        let mut seen: std::collections::HashSet<(String, String)> =
            std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(Error::parse(
                    source_name,
                    lineno + 1,
                    format!("expected 6 fields, got {}", fields.len()),
                ));
            }
            let score: f64 = fields[4].parse().map_err(|_| {
                Error::parse(
                    source_name,
                    lineno + 1,
                    format!("bad score {:?}", fields[4]),
                )
            })?;
            if !seen.insert((fields[0].to_string(), fields[2].to_string())) {
                return Err(Error::parse(
                    source_name,
                    lineno + 1,
                    format!("duplicate doc {:?} for query {:?}", fields[2], fields[0]),
                ));
            }
            per_query
                .entry(fields[0].to_string())
                .or_default()
                .push((fields[2].to_string(), score));
        }
        let mut run = Self::new();
        for (qid, mut ranking) in per_query {
            ranking.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));
            run.by_query.insert(qid, ranking);
        }
        Ok(run)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Write `qid Q0 docid rank score tag` lines.
    pub fn write<W: std::io::Write>(&self, out: &mut W, tag: &str) -> std::io::Result<()> {
        for (qid, ranking) in &self.by_query {
            for (rank, (docid, score)) in ranking.iter().enumerate() {
                writeln!(out, "{qid} Q0 {docid} {} {score} {tag}", rank + 1)?;
            }
        }
        Ok(())
    }
}

/// Per-query metric values and their arithmetic mean.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub metric: String,
    pub k: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
}

impl MetricReport {
    fn from_values(metric: String, k: usize, per_query: BTreeMap<String, f64>) -> Self {
        let mean = if per_query.is_empty() {
            0.0
        } else {
            per_query.values().sum::<f64>() / per_query.len() as f64
        };
        Self {
            metric,
            k,
            per_query,
            mean,
        }
    }

    pub fn evaluated_queries(&self) -> usize {
        self.per_query.len()
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("metric cutoff k must be >= 1"));
    }
    Ok(())
}

/// NDCG@k over all judged queries.
pub fn ndcg_at_k(qrels: &Qrels, run: &RunFile, k: usize) -> Result<MetricReport> {
    check_k(k)?;
    let mut per_query = BTreeMap::new();
    for qid in qrels.queries() {
        let judgments = qrels.judgments(qid).expect("listed query");
        let ranking = run.ranking(qid).unwrap_or(&[]);
        let dcg: f64 = ranking
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (docid, _))| {
                let rel = judgments.get(docid).copied().unwrap_or(0);
                f64::from(rel) / ((i + 2) as f64).log2()
            })
            .sum();
        let mut grades: Vec<u32> = judgments.values().copied().collect();
        grades.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = grades
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| f64::from(g) / ((i + 2) as f64).log2())
            .sum();
        let ndcg = if idcg > 0.0 { dcg / idcg } else { 0.0 };
        per_query.insert(qid.clone(), ndcg);
    }
    Ok(MetricReport::from_values(format!("ndcg@{k}"), k, per_query))
}

/// Recall@k over queries with at least one relevant (grade >= 1) document.
pub fn recall_at_k(qrels: &Qrels, run: &RunFile, k: usize) -> Result<MetricReport> {
    check_k(k)?;
    let mut per_query = BTreeMap::new();
    for qid in qrels.queries() {
        let judgments = qrels.judgments(qid).expect("listed query");
        let relevant: Vec<&String> = judgments
            .iter()
            .filter(|(_, &g)| g >= 1)
            .map(|(d, _)| d)
            .collect();
        if relevant.is_empty() {
            continue;
        }
        let ranking = run.ranking(qid).unwrap_or(&[]);
        let hits = ranking
            .iter()
            .take(k)
            .filter(|(docid, _)| judgments.get(docid).copied().unwrap_or(0) >= 1)
            .count();
        per_query.insert(qid.clone(), hits as f64 / relevant.len() as f64);
    }
    Ok(MetricReport::from_values(
        format!("recall@{k}"),
        k,
        per_query,
    ))
}

/// MRR@k over queries with at least one relevant (grade >= 1) document.
pub fn mrr_at_k(qrels: &Qrels, run: &RunFile, k: usize) -> Result<MetricReport> {
    check_k(k)?;
    let mut per_query = BTreeMap::new();
    for qid in qrels.queries() {
        let judgments = qrels.judgments(qid).expect("listed query");
        if !judgments.values().any(|&g| g >= 1) {
            continue;
        }
        let ranking = run.ranking(qid).unwrap_or(&[]);
        let rr = ranking
            .iter()
            .take(k)
            .position(|(docid, _)| judgments.get(docid).copied().unwrap_or(0) >= 1)
            .map_or(0.0, |pos| 1.0 / (pos + 1) as f64);
        per_query.insert(qid.clone(), rr);
    }
    Ok(MetricReport::from_values(format!("mrr@{k}"), k, per_query))
}

/// Two-sided paired Student t-test result.
#[derive(Debug, Clone, Copy)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    /// Two-sided p < 0.01.
    pub significant: bool,
}

/// Paired two-sided t-test on aligned per-query values. With zero variance
/// the test degenerates: equal means give `t = 0, p = 1`; unequal means give
/// `t = +/-inf, p = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::invalid("paired t-test inputs must align"));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::NotEnoughSamples { n });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                p: 1.0,
                significant: false,
            }
        } else {
            TTest {
                t: if mean > 0.0 {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                },
                p: 0.0,
                significant: true,
            }
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    // Two-sided tail of Student's t with nu = n-1 degrees of freedom via the
    // regularized incomplete beta function I_{nu/(nu+t^2)}(nu/2, 1/2).
    let nu = (n - 1) as f64;
    let x = nu / (nu + t * t);
    let p = statrs::function::beta::beta_reg(nu / 2.0, 0.5, x);
    Ok(TTest {
        t,
        p,
        significant: p < 0.01,
    })
}

/// Align two metric reports on their shared query ids (sorted).
pub fn align_by_query(a: &MetricReport, b: &MetricReport) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (qid, &va) in &a.per_query {
        if let Some(&vb) = b.per_query.get(qid) {
            xs.push(va);
            ys.push(vb);
        }
    }
    (xs, ys)
}

/// Top-`m` entries by weight (ties by lower dimension), resolved to tokens.
pub fn top_tokens(vec: &SparseVector, vocab: &Vocabulary, m: usize) -> Vec<(String, f64)> {
    let mut entries: Vec<(u32, f64)> = vec.entries().to_vec();
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite weights")
            .then(a.0.cmp(&b.0))
    });
    entries
        .into_iter()
        .take(m)
        .map(|(dim, w)| (vocab.token(dim).to_string(), w))
        .collect()
}

/// Per-dimension products of two embeddings: the top-`m` token contributions
/// plus the total over all shared dimensions (which equals the dot product).
pub fn token_contributions(
    query: &SparseVector,
    target: &SparseVector,
    vocab: &Vocabulary,
    m: usize,
) -> (Vec<(String, f64)>, f64) {
    let mut products: Vec<(u32, f64)> = Vec::new();
    let (xs, ys) = (query.entries(), target.entries());
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    while i < xs.len() && j < ys.len() {
        match xs[i].0.cmp(&ys[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let prod = xs[i].1 * ys[j].1;
                total += prod;
                products.push((xs[i].0, prod));
                i += 1;
                j += 1;
            }
        }
    }
    products.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite products")
            .then(a.0.cmp(&b.0))
    });
    let top = products
        .into_iter()
        .take(m)
        .map(|(dim, p)| (vocab.token(dim).to_string(), p))
        .collect();
    (top, total)
}

/// Corpus-level token statistics: per-token mean activation across a set of
/// embeddings (absent entries count as zero).
#[derive(Debug, Clone)]
pub struct TokenStatsReport {
    /// Top tokens by mean activation.
    pub top: Vec<(String, f64)>,
    /// Distribution of per-token means over the whole vocabulary.
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub num_embeddings: usize,
}

pub fn corpus_token_stats(
    embeddings: &[SparseVector],
    vocab: &Vocabulary,
    m: usize,
) -> Result<TokenStatsReport> {
    if embeddings.is_empty() {
        return Err(Error::invalid("need at least one embedding"));
    }
    let mut sums = vec![0.0f64; vocab.size()];
    for emb in embeddings {
        for &(dim, w) in emb.entries() {
            sums[dim as usize] += w;
        }
    }
    let n = embeddings.len() as f64;
    let means: Vec<f64> = sums.into_iter().map(|s| s / n).collect();

    let mut order: Vec<u32> = (0..vocab.size() as u32).collect();
    order.sort_by(|&a, &b| {
        means[b as usize]
            .partial_cmp(&means[a as usize])
            .expect("finite means")
            .then(a.cmp(&b))
    });
    let top = order
        .iter()
        .take(m)
        .map(|&dim| (vocab.token(dim).to_string(), means[dim as usize]))
        .collect();

    let mut sorted = means.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    Ok(TokenStatsReport {
        top,
        min: sorted[0],
        median: sorted[sorted.len() / 2],
        max: sorted[sorted.len() - 1],
        num_embeddings: embeddings.len(),
    })
}
