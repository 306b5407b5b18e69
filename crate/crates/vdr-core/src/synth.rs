//! Seeded synthetic topic corpora for end-to-end runs: the vocabulary is
//! partitioned into disjoint per-topic token sets plus a shared noise pool;
//! documents and queries sample from their topic's set with probability
//! `1 - noise`, otherwise from the pool. Relevance is topic identity.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::training::TrainPair;
use crate::vocab::Vocabulary;
use crate::{Error, Result};

/// Generation parameters; everything is deterministic under `seed`.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub topics: usize,
    pub vocab_size: usize,
    pub docs: usize,
    pub queries: usize,
    pub doc_len: usize,
    pub query_len: usize,
    /// Probability that a sampled token comes from the shared noise pool.
    pub noise: f64,
    pub seed: u64,
}

/// A generated dataset, in memory. Documents and evaluation queries carry
/// ids and texts; training pairs use freshly sampled queries so the
/// evaluation queries stay held out.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub vocab: Vocabulary,
    pub docs: Vec<(String, String)>,
    pub queries: Vec<(String, String)>,
    /// (query id, doc id, grade) triples: grade 1 for same-topic documents.
    pub qrels: Vec<(String, String, u32)>,
    pub pairs: Vec<TrainPair>,
}

#[derive(Serialize)]
struct JsonRecord<'a> {
    id: &'a str,
    text: &'a str,
}

/// Generate a dataset. One eighth of the vocabulary (at least one token,
/// plus any remainder of the topic split) forms the noise pool; the rest is
/// divided evenly among topics. Each document gets one training pair whose
/// query is freshly sampled from the document's topic and whose negative is
/// a different-topic document.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.topics < 2 {
        return Err(Error::invalid("need at least 2 topics"));
    }
    if cfg.docs < cfg.topics || cfg.queries == 0 || cfg.doc_len == 0 || cfg.query_len == 0 {
        return Err(Error::invalid(
            "need docs >= topics, queries >= 1, and positive lengths",
        ));
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(Error::invalid("noise must lie in [0, 1]"));
    }
    let noise_base = (cfg.vocab_size / 8).max(1);
    let topic_pool = cfg.vocab_size.saturating_sub(noise_base);
    let per_topic = topic_pool / cfg.topics;
    if per_topic < 2 {
        return Err(Error::invalid(format!(
            "infeasible sizes: vocabulary of {} cannot give {} topics at least 2 tokens each plus a noise pool",
            cfg.vocab_size, cfg.topics
        )));
    }

    let width = (cfg.vocab_size.max(10) as f64).log10().ceil() as usize;
    let tokens: Vec<String> = (0..cfg.vocab_size)
        .map(|i| format!("tok{i:0width$}"))
        .collect();
    let vocab = Vocabulary::new(tokens.clone())?;

    // Token ids [t*per_topic, (t+1)*per_topic) belong to topic t; the rest
    // (remainder of the split plus the reserved eighth) is the noise pool.
    let topic_tokens: Vec<&[String]> = (0..cfg.topics)
        .map(|t| &tokens[t * per_topic..(t + 1) * per_topic])
        .collect();
    let noise_tokens: &[String] = &tokens[cfg.topics * per_topic..];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sample_text = |rng: &mut ChaCha8Rng, topic: usize, len: usize| -> String {
        let words: Vec<&str> = (0..len)
            .map(|_| {
                let from_noise = cfg.noise > 0.0 && rng.gen_bool(cfg.noise);
                if from_noise && !noise_tokens.is_empty() {
                    noise_tokens[rng.gen_range(0..noise_tokens.len())].as_str()
                } else {
                    topic_tokens[topic][rng.gen_range(0..per_topic)].as_str()
                }
            })
            .collect();
        words.join(" ")
    };

    let id_width = (cfg.docs.max(cfg.queries).max(10) as f64).log10().ceil() as usize;
    let docs: Vec<(String, String)> = (0..cfg.docs)
        .map(|i| {
            let topic = i % cfg.topics;
            (
                format!("d{i:0id_width$}"),
                sample_text(&mut rng, topic, cfg.doc_len),
            )
        })
        .collect();

    let queries: Vec<(String, String)> = (0..cfg.queries)
        .map(|i| {
            let topic = i % cfg.topics;
            (
                format!("q{i:0id_width$}"),
                sample_text(&mut rng, topic, cfg.query_len),
            )
        })
        .collect();

    let mut qrels = Vec::new();
    for (qi, (qid, _)) in queries.iter().enumerate() {
        let topic = qi % cfg.topics;
        for (di, (did, _)) in docs.iter().enumerate() {
            if di % cfg.topics == topic {
                qrels.push((qid.clone(), did.clone(), 1));
            }
        }
    }

    // Training pairs: a fresh same-topic query per document (the evaluation
    // queries above are never used for training), negative drawn from a
    // different topic.
    let pairs: Vec<TrainPair> = (0..cfg.docs)
        .map(|i| {
            let topic = i % cfg.topics;
            let query = sample_text(&mut rng, topic, cfg.query_len);
            let negative = loop {
                let j = rng.gen_range(0..cfg.docs);
                if j % cfg.topics != topic {
                    break docs[j].1.clone();
                }
            };
            TrainPair {
                query,
                positive: docs[i].1.clone(),
                negative: Some(negative),
            }
        })
        .collect();

    Ok(SynthData {
        vocab,
        docs,
        queries,
        qrels,
        pairs,
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_jsonl(path: &Path, records: &[(String, String)]) -> Result<()> {
    let mut w = create(path)?;
    for (id, text) in records {
        let line =
            serde_json::to_string(&JsonRecord { id, text }).expect("plain strings serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Materialize a dataset under `out_dir` as `vocab.txt`, `corpus.jsonl`,
/// `queries.jsonl`, `qrels.txt`, and `pairs.jsonl`.
pub fn write_dataset(data: &SynthData, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let vocab_path = dir.join("vocab.txt");
    let mut w = create(&vocab_path)?;
    for token in data.vocab.tokens() {
        writeln!(w, "{token}").map_err(|e| Error::io(&vocab_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&vocab_path, e))?;

    write_jsonl(&dir.join("corpus.jsonl"), &data.docs)?;
    write_jsonl(&dir.join("queries.jsonl"), &data.queries)?;

    let qrels_path = dir.join("qrels.txt");
    let mut w = create(&qrels_path)?;
    for (qid, did, grade) in &data.qrels {
        writeln!(w, "{qid} 0 {did} {grade}").map_err(|e| Error::io(&qrels_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&qrels_path, e))?;

    let pairs_path = dir.join("pairs.jsonl");
    let mut w = create(&pairs_path)?;
    for pair in &data.pairs {
        let line = serde_json::to_string(pair).expect("plain strings serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(&pairs_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&pairs_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            topics: 2,
            vocab_size: 32,
            docs: 10,
            queries: 4,
            doc_len: 6,
            query_len: 3,
            noise: 0.2,
            seed: 7,
        }
    }

    #[test]
    fn zero_noise_keeps_tokens_in_topic() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..small_cfg()
        };
        let data = generate(&cfg).unwrap();
        let per_topic = (cfg.vocab_size - cfg.vocab_size / 8) / cfg.topics;
        for (i, (_, text)) in data.docs.iter().enumerate() {
            let topic = i % cfg.topics;
            for word in text.split(' ') {
                let id = data.vocab.id(word).unwrap() as usize;
                assert!(id >= topic * per_topic && id < (topic + 1) * per_topic);
            }
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_dataset(&generate(&small_cfg()).unwrap(), &a).unwrap();
        write_dataset(&generate(&small_cfg()).unwrap(), &b).unwrap();
        for name in [
            "vocab.txt",
            "corpus.jsonl",
            "queries.jsonl",
            "qrels.txt",
            "pairs.jsonl",
        ] {
            assert_eq!(
                std::fs::read(a.join(name)).unwrap(),
                std::fs::read(b.join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn qrels_mark_exactly_same_topic_docs() {
        let cfg = small_cfg();
        let data = generate(&cfg).unwrap();
        let docs_per_topic = cfg.docs / cfg.topics;
        for (qid, _) in &data.queries {
            let count = data.qrels.iter().filter(|(q, _, _)| q == qid).count();
            assert_eq!(count, docs_per_topic);
        }
    }

    #[test]
    fn infeasible_sizes_rejected() {
        let cfg = SynthConfig {
            topics: 20,
            vocab_size: 24,
            ..small_cfg()
        };
        assert!(generate(&cfg).is_err());

        let cfg = SynthConfig {
            topics: 1,
            ..small_cfg()
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn pairs_use_held_out_queries() {
        let data = generate(&small_cfg()).unwrap();
        let eval_queries: std::collections::HashSet<&str> =
            data.queries.iter().map(|(_, t)| t.as_str()).collect();
        // Training queries are sampled independently of the evaluation set;
        // with a 3-token query space collisions are possible but the pair
        // count must match the doc count and negatives must exist.
        assert_eq!(data.pairs.len(), data.docs.len());
        assert!(data.pairs.iter().all(|p| p.negative.is_some()));
        let _ = eval_queries;
    }
}
