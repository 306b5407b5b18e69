//! Effectiveness–efficiency harness: per-query wall-clock latency and exact
//! instrumentation counters over an inverted index, plus the query-side
//! activation sweep.
//!
//! The measurement loop is strictly sequential on one thread, batch size
//! one; timing covers embedding plus search and excludes all I/O. Counters
//! are exact and deterministic; latencies are reported but never asserted.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::encoder::{embed_query, EncoderParams};
use crate::eval::{ndcg_at_k, Qrels, RunFile};
use crate::index::{search_with_counters, InvertedIndex, SearchCounters, SearchResult};
use crate::vocab::Vocabulary;
use crate::{Error, Result};

/// Query-side inference mode for a measurement run.
#[derive(Clone, Copy)]
pub enum Mode<'a> {
    /// Full encoder pipeline with gate budget `k`.
    Parametric {
        params: &'a EncoderParams,
        k: usize,
        normalize: bool,
    },
    /// Normalized bag-of-words; no encoder forward at all.
    Nonparametric,
}

impl Mode<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Parametric { .. } => "parametric",
            Mode::Nonparametric => "nonparametric",
        }
    }
}

/// One query's timing and work counters.
#[derive(Debug, Clone, Serialize)]
pub struct QueryBench {
    pub query_id: String,
    pub latency_us: f64,
    pub encoder_forwards: u64,
    pub postings_scanned: u64,
    pub accumulator_updates: u64,
}

/// Aggregate measurement report.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub mode: String,
    pub k: Option<usize>,
    pub corpus_size: usize,
    pub query_count: usize,
    pub top_n: usize,
    pub per_query: Vec<QueryBench>,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub encoder_forwards: u64,
    pub postings_scanned: u64,
    pub accumulator_updates: u64,
}

fn percentile(sorted: &[f64], fraction: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((fraction * sorted.len() as f64).ceil() as usize).saturating_sub(1);
    sorted[idx.min(sorted.len() - 1)]
}

/// Process queries one at a time on the calling thread: embed (per `mode`),
/// search, and record latency plus counters. Also returns each query's
/// ranked results so callers can evaluate effectiveness on the same run.
pub fn measure(
    ix: &InvertedIndex,
    vocab: &Vocabulary,
    queries: &[(String, String)],
    mode: Mode<'_>,
    top_n: usize,
) -> Result<(BenchReport, Vec<(String, SearchResult)>)> {
    if queries.is_empty() {
        return Err(Error::invalid("need at least one query"));
    }
    let mut per_query = Vec::with_capacity(queries.len());
    let mut results = Vec::with_capacity(queries.len());
    let mut totals = SearchCounters::default();
    let mut encoder_forwards = 0u64;

    for (qid, text) in queries {
        let start = Instant::now();
        let embedded = match mode {
            Mode::Parametric {
                params,
                k,
                normalize,
            } => embed_query(params, vocab, text, k, normalize).map_err(|e| match e {
                Error::EmptyInput => {
                    Error::invalid(format!("query {qid:?}: cannot encode empty input"))
                }
                other => other,
            })?,
            Mode::Nonparametric => crate::encoder::embed_nonparametric(vocab, text),
        };
        let (hits, counters) = search_with_counters(ix, &embedded, top_n);
        let latency_us = start.elapsed().as_secs_f64() * 1e6;

        let forwards = match mode {
            Mode::Parametric { .. } => 1,
            Mode::Nonparametric => 0,
        };
        encoder_forwards += forwards;
        totals.postings_scanned += counters.postings_scanned;
        totals.accumulator_updates += counters.accumulator_updates;
        per_query.push(QueryBench {
            query_id: qid.clone(),
            latency_us,
            encoder_forwards: forwards,
            postings_scanned: counters.postings_scanned,
            accumulator_updates: counters.accumulator_updates,
        });
        results.push((qid.clone(), hits));
    }

    let mut sorted: Vec<f64> = per_query.iter().map(|q| q.latency_us).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));
    let mean_us = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let median_us = if sorted.len().is_multiple_of(2) {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    } else {
        sorted[sorted.len() / 2]
    };
    let p95_us = percentile(&sorted, 0.95);

    let k = match mode {
        Mode::Parametric { k, .. } => Some(k),
        Mode::Nonparametric => None,
    };
    Ok((
        BenchReport {
            mode: mode.label().to_string(),
            k,
            corpus_size: ix.num_docs(),
            query_count: queries.len(),
            top_n,
            per_query,
            mean_us,
            median_us,
            p95_us,
            encoder_forwards,
            postings_scanned: totals.postings_scanned,
            accumulator_updates: totals.accumulator_updates,
        },
        results,
    ))
}

impl BenchReport {
    pub const TSV_HEADER: &'static str = "mode\tk\tqueries\tdocs\tmean_us\tmedian_us\tp95_us\tencoder_forwards\tpostings_scanned\taccumulator_updates";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{}\t{}\t{}",
            self.mode,
            self.k.map_or_else(|| "-".to_string(), |k| k.to_string()),
            self.query_count,
            self.corpus_size,
            self.mean_us,
            self.median_us,
            self.p95_us,
            self.encoder_forwards,
            self.postings_scanned,
            self.accumulator_updates,
        )
    }

    /// One JSON record per query: latency and counters.
    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for q in &self.per_query {
            let line = serde_json::to_string(q).expect("plain fields serialize");
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// One row of the activation sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub k: usize,
    pub report: BenchReport,
    pub ndcg10: f64,
}

impl SweepRow {
    pub const TSV_HEADER: &'static str =
        "k\tmean_us\tmedian_us\tp95_us\tpostings_scanned\taccumulator_updates\tndcg@10";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.2}\t{:.2}\t{:.2}\t{}\t{}\t{:.5}",
            self.k,
            self.report.mean_us,
            self.report.median_us,
            self.report.p95_us,
            self.report.postings_scanned,
            self.report.accumulator_updates,
            self.ndcg10,
        )
    }
}

/// Measure once per `k` (parametric mode) and evaluate NDCG@10 on each run.
/// Duplicate `k` values produce duplicate rows.
#[allow(clippy::too_many_arguments)]
pub fn sweep_k(
    ix: &InvertedIndex,
    vocab: &Vocabulary,
    queries: &[(String, String)],
    params: &EncoderParams,
    k_values: &[usize],
    qrels: &Qrels,
    top_n: usize,
    normalize: bool,
) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() {
        return Err(Error::invalid("sweep needs at least one k value"));
    }
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let (report, results) = measure(
            ix,
            vocab,
            queries,
            Mode::Parametric {
                params,
                k,
                normalize,
            },
            top_n,
        )?;
        let mut run = RunFile::new();
        for (qid, hits) in results {
            run.insert_ranking(&qid, hits)?;
        }
        let ndcg10 = ndcg_at_k(qrels, &run, 10)?.mean;
        rows.push(SweepRow { k, report, ndcg10 });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsevec::SparseVector;

    fn tiny_setup() -> (InvertedIndex, Vocabulary, EncoderParams) {
        let vocab = Vocabulary::from_lines("alpha\nbeta\ngamma\ndelta").unwrap();
        let params = EncoderParams::init(4, 2, true, 17).unwrap();
        let docs = vec![
            (
                "d0".to_string(),
                SparseVector::from_sorted_entries(vec![(0, 1.0), (1, 0.5)]).unwrap(),
            ),
            (
                "d1".to_string(),
                SparseVector::from_sorted_entries(vec![(1, 2.0), (3, 1.0)]).unwrap(),
            ),
        ];
        let ix = InvertedIndex::build(4, &docs).unwrap();
        (ix, vocab, params)
    }

    #[test]
    fn nonparametric_mode_does_zero_forwards() {
        let (ix, vocab, _) = tiny_setup();
        let queries = vec![
            ("q0".to_string(), "alpha beta".to_string()),
            ("q1".to_string(), "delta".to_string()),
        ];
        let (report, results) = measure(&ix, &vocab, &queries, Mode::Nonparametric, 2).unwrap();
        assert_eq!(report.encoder_forwards, 0);
        assert_eq!(results.len(), 2);
        assert!(report.per_query.iter().all(|q| q.encoder_forwards == 0));
    }

    #[test]
    fn parametric_mode_does_one_forward_per_query() {
        let (ix, vocab, params) = tiny_setup();
        let queries: Vec<(String, String)> = (0..5)
            .map(|i| (format!("q{i}"), "alpha gamma".to_string()))
            .collect();
        let mode = Mode::Parametric {
            params: &params,
            k: 2,
            normalize: false,
        };
        let (report, _) = measure(&ix, &vocab, &queries, mode, 2).unwrap();
        assert_eq!(report.encoder_forwards, 5);
    }

    #[test]
    fn counters_monotone_in_k() {
        let (ix, vocab, params) = tiny_setup();
        let queries = vec![("q0".to_string(), "alpha".to_string())];
        let updates = |k: usize| {
            let mode = Mode::Parametric {
                params: &params,
                k,
                normalize: false,
            };
            measure(&ix, &vocab, &queries, mode, 2)
                .unwrap()
                .0
                .accumulator_updates
        };
        assert!(updates(0) <= updates(2));
        assert!(updates(2) <= updates(4));
    }

    #[test]
    fn sweep_keeps_duplicate_k_rows() {
        let (ix, vocab, params) = tiny_setup();
        let queries = vec![("q0".to_string(), "alpha".to_string())];
        let mut qrels = Qrels::new();
        qrels.insert("q0", "d0", 1).unwrap();
        let rows = sweep_k(&ix, &vocab, &queries, &params, &[2, 2], &qrels, 2, false).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].k, rows[1].k);
        assert_eq!(
            rows[0].report.accumulator_updates,
            rows[1].report.accumulator_updates
        );
    }

    #[test]
    fn jsonl_report_has_one_record_per_query() {
        let (ix, vocab, _) = tiny_setup();
        let queries = vec![
            ("q0".to_string(), "alpha".to_string()),
            ("q1".to_string(), "beta".to_string()),
        ];
        let (report, _) = measure(&ix, &vocab, &queries, Mode::Nonparametric, 1).unwrap();
        let mut out = Vec::new();
        report.write_jsonl(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"query_id\":\"q0\""));
    }
}
