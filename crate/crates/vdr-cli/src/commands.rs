//! Subcommand implementations.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

use vdr_core::bench::{measure, sweep_k, BenchReport, Mode, SweepRow};
use vdr_core::encoder::{
    embed_corpus_seq, embed_nonparametric, embed_query, lexical_weights, load_checkpoint,
    Activation, EncoderParams, TargetGate,
};
use vdr_core::eval::{
    align_by_query, corpus_token_stats, mrr_at_k, ndcg_at_k, paired_t_test, recall_at_k,
    token_contributions, top_tokens, MetricReport, Qrels, RunFile,
};
use vdr_core::index::{self, InvertedIndex, SearchResult};
use vdr_core::sparsevec::{dot, SparseVector};
use vdr_core::synth::{generate, write_dataset, SynthConfig};
use vdr_core::training::{gradcheck_random, load_pairs, train, Decay, TrainConfig};
use vdr_core::vocab::{load_vocab, tokenize, Vocabulary};

use crate::util::{echo_config, load_jsonl_records};
use crate::{ActivationArg, DecayArg, ModeArg};

pub fn run(cmd: crate::Command) -> Result<()> {
    match cmd {
        crate::Command::Train(args) => cmd_train(args),
        crate::Command::Embed(args) => cmd_embed(args),
        crate::Command::Index(args) => cmd_index(args),
        crate::Command::Search(args) => cmd_search(args),
        crate::Command::Eval(args) => cmd_eval(args),
        crate::Command::Bench(args) => cmd_bench(args),
        crate::Command::Explain(args) => cmd_explain(args),
        crate::Command::Gradcheck(args) => cmd_gradcheck(args),
        crate::Command::Synth(args) => cmd_synth(args),
    }
}

fn mode_str(mode: ModeArg) -> &'static str {
    match mode {
        ModeArg::Parametric => "parametric",
        ModeArg::Nonparametric => "nonparametric",
    }
}

fn cmd_train(args: crate::TrainArgs) -> Result<()> {
    let k_query = args.k_query.unwrap_or(args.d);
    let cfg = TrainConfig {
        d: args.d,
        tau: args.tau,
        lr: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        k_query,
        warmup_epochs: args.warmup_epochs,
        decay: match args.decay {
            DecayArg::Linear => Decay::Linear,
            DecayArg::Cosine => Decay::Cosine,
        },
        use_bow_entry: !args.no_bow_entry,
        use_cts: args.cts,
        activation: match args.activation {
            ActivationArg::Elu1p => Activation::Elu1p,
            ActivationArg::Relu => Activation::Relu,
        },
        tied: !args.untied,
        normalize: args.normalize,
        weight_decay: args.weight_decay,
        seed: args.seed,
        ..TrainConfig::default()
    };
    echo_config(
        "train",
        &[
            ("pairs", args.pairs.display().to_string()),
            ("vocab", args.vocab.display().to_string()),
            ("out", args.out.display().to_string()),
            ("d", cfg.d.to_string()),
            ("tau", cfg.tau.to_string()),
            ("lr", cfg.lr.to_string()),
            ("epochs", cfg.epochs.to_string()),
            ("batch-size", cfg.batch_size.to_string()),
            ("k-query", cfg.k_query.to_string()),
            ("warmup-epochs", cfg.warmup_epochs.to_string()),
            ("decay", format!("{:?}", cfg.decay).to_lowercase()),
            ("bow-entry", cfg.use_bow_entry.to_string()),
            ("cts", cfg.use_cts.to_string()),
            ("activation", format!("{:?}", cfg.activation).to_lowercase()),
            ("tied", cfg.tied.to_string()),
            ("normalize", cfg.normalize.to_string()),
            ("weight-decay", cfg.weight_decay.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    );

    let vocab = load_vocab(&args.vocab)?;
    let pairs = load_pairs(&args.pairs)?;
    let with_negatives = pairs.iter().all(|p| p.negative.is_some());
    if !with_negatives && pairs.iter().any(|p| p.negative.is_some()) {
        eprintln!("note: not all pairs carry a negative; training with in-batch negatives only");
    }
    let outcome = train(&pairs, &cfg, &vocab, Some(&args.out))?;
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {} mean loss {loss:.6}", epoch + 1);
    }
    println!(
        "wrote checkpoint {} (|V|={}, d={})",
        args.out.display(),
        vocab.size(),
        cfg.d
    );
    Ok(())
}

fn embed_records(
    records: &[(String, String)],
    vocab: &Vocabulary,
    mode: ModeArg,
    checkpoint: Option<&Path>,
    k: Option<usize>,
    normalize: bool,
) -> Result<Vec<(String, SparseVector)>> {
    match mode {
        ModeArg::Parametric => {
            let Some(ckpt) = checkpoint else {
                bail!("parametric mode requires --checkpoint");
            };
            let params = load_checkpoint(ckpt)?;
            let k = k.unwrap_or(params.d());
            Ok(embed_corpus_seq(
                &params,
                vocab,
                records,
                TargetGate::TopK(k),
                normalize,
            )?)
        }
        ModeArg::Nonparametric => Ok(records
            .iter()
            .map(|(id, text)| (id.clone(), embed_nonparametric(vocab, text)))
            .collect()),
    }
}

fn cmd_embed(args: crate::EmbedArgs) -> Result<()> {
    echo_config(
        "embed",
        &[
            ("corpus", args.corpus.display().to_string()),
            ("vocab", args.vocab.display().to_string()),
            (
                "checkpoint",
                args.checkpoint
                    .as_ref()
                    .map_or("-".into(), |p| p.display().to_string()),
            ),
            ("mode", mode_str(args.mode).to_string()),
            ("k", args.k.map_or("d".into(), |k| k.to_string())),
            ("normalize", args.normalize.to_string()),
            ("stats", args.stats.to_string()),
            ("m", args.m.to_string()),
        ],
    );
    let vocab = load_vocab(&args.vocab)?;
    let records = load_jsonl_records(&args.corpus)?;
    let embedded = embed_records(
        &records,
        &vocab,
        args.mode,
        args.checkpoint.as_deref(),
        args.k,
        args.normalize,
    )?;

    if args.stats {
        let vectors: Vec<SparseVector> = embedded.iter().map(|(_, v)| v.clone()).collect();
        let report = corpus_token_stats(&vectors, &vocab, args.m)?;
        println!(
            "token activation means over {} embeddings (min {:.6} / median {:.6} / max {:.6}):",
            report.num_embeddings, report.min, report.median, report.max
        );
        for (token, mean) in &report.top {
            println!("{token}\t{mean:.6}");
        }
    }
    match &args.out {
        Some(path) => {
            let mut file = std::io::BufWriter::new(
                std::fs::File::create(path)
                    .with_context(|| format!("creating {}", path.display()))?,
            );
            index::write_embedding_dump(&embedded, &mut file)?;
            file.flush()?;
            eprintln!("wrote {} embeddings to {}", embedded.len(), path.display());
        }
        None if !args.stats => {
            let stdout = std::io::stdout();
            index::write_embedding_dump(&embedded, &mut stdout.lock())?;
        }
        None => {}
    }
    Ok(())
}

fn cmd_index(args: crate::IndexArgs) -> Result<()> {
    echo_config(
        "index",
        &[
            ("corpus", args.corpus.display().to_string()),
            ("vocab", args.vocab.display().to_string()),
            ("checkpoint", args.checkpoint.display().to_string()),
            ("k", args.k.map_or("d".into(), |k| k.to_string())),
            ("normalize", args.normalize.to_string()),
            ("out", args.out.display().to_string()),
        ],
    );
    let vocab = load_vocab(&args.vocab)?;
    let records = load_jsonl_records(&args.corpus)?;
    let params = load_checkpoint(&args.checkpoint)?;
    let k = args.k.unwrap_or(params.d());
    let embedded = embed_corpus_seq(
        &params,
        &vocab,
        &records,
        TargetGate::TopK(k),
        args.normalize,
    )?;
    let ix = InvertedIndex::build(vocab.size(), &embedded)?;
    index::save(&ix, &args.out)?;
    let stats = index::stats(&ix);
    println!(
        "indexed {} docs, {} stored entries across {} dimensions -> {}",
        stats.num_docs,
        stats.nonzero_count,
        stats.nonempty_dims,
        args.out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn search_one(
    ix: &InvertedIndex,
    vocab: &Vocabulary,
    params: Option<&EncoderParams>,
    args_k: Option<usize>,
    normalize: bool,
    top_n: usize,
    qid: &str,
    text: &str,
) -> Result<SearchResult> {
    let embedded = match params {
        Some(p) => {
            let k = args_k.unwrap_or(p.d());
            embed_query(p, vocab, text, k, normalize)
                .map_err(|e| anyhow::anyhow!("query {qid:?}: {e}"))?
        }
        None => embed_nonparametric(vocab, text),
    };
    Ok(index::search(ix, &embedded, top_n))
}

fn cmd_search(args: crate::SearchArgs) -> Result<()> {
    echo_config(
        "search",
        &[
            ("index", args.index.display().to_string()),
            ("queries", args.queries.display().to_string()),
            ("vocab", args.vocab.display().to_string()),
            ("mode", mode_str(args.mode).to_string()),
            (
                "checkpoint",
                args.checkpoint
                    .as_ref()
                    .map_or("-".into(), |p| p.display().to_string()),
            ),
            ("k", args.k.map_or("d".into(), |k| k.to_string())),
            ("normalize", args.normalize.to_string()),
            ("top-n", args.top_n.to_string()),
            ("threads", args.threads.to_string()),
            ("tag", args.tag.clone()),
            ("out", args.out.display().to_string()),
        ],
    );
    let vocab = load_vocab(&args.vocab)?;
    let queries = load_jsonl_records(&args.queries)?;
    let ix = index::load(&args.index)?;
    let params = match args.mode {
        ModeArg::Parametric => {
            let Some(ckpt) = &args.checkpoint else {
                bail!("parametric mode requires --checkpoint");
            };
            Some(load_checkpoint(ckpt)?)
        }
        ModeArg::Nonparametric => None,
    };

    let results: Vec<(String, SearchResult)> =
        run_queries(&ix, &vocab, params.as_ref(), &args, &queries)?;

    let mut run = RunFile::new();
    for (qid, hits) in results {
        run.insert_ranking(&qid, hits)?;
    }
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(&args.out)
            .with_context(|| format!("creating {}", args.out.display()))?,
    );
    run.write(&mut file, &args.tag)?;
    file.flush()?;
    println!(
        "searched {} queries ({} mode) -> {}",
        queries.len(),
        mode_str(args.mode),
        args.out.display()
    );
    Ok(())
}

#[cfg(feature = "parallel")]
fn run_queries(
    ix: &InvertedIndex,
    vocab: &Vocabulary,
    params: Option<&EncoderParams>,
    args: &crate::SearchArgs,
    queries: &[(String, String)],
) -> Result<Vec<(String, SearchResult)>> {
    if args.threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.threads)
            .build()
            .context("building thread pool")?;
        return pool.install(|| {
            queries
                .par_iter()
                .map(|(qid, text)| {
                    let hits = search_one(
                        ix,
                        vocab,
                        params,
                        args.k,
                        args.normalize,
                        args.top_n,
                        qid,
                        text,
                    )?;
                    Ok((qid.clone(), hits))
                })
                .collect()
        });
    }
    run_queries_seq(ix, vocab, params, args, queries)
}

#[cfg(not(feature = "parallel"))]
fn run_queries(
    ix: &InvertedIndex,
    vocab: &Vocabulary,
    params: Option<&EncoderParams>,
    args: &crate::SearchArgs,
    queries: &[(String, String)],
) -> Result<Vec<(String, SearchResult)>> {
    if args.threads > 1 {
        eprintln!("note: built without the `parallel` feature; searching sequentially");
    }
    run_queries_seq(ix, vocab, params, args, queries)
}

fn run_queries_seq(
    ix: &InvertedIndex,
    vocab: &Vocabulary,
    params: Option<&EncoderParams>,
    args: &crate::SearchArgs,
    queries: &[(String, String)],
) -> Result<Vec<(String, SearchResult)>> {
    queries
        .iter()
        .map(|(qid, text)| {
            let hits = search_one(
                ix,
                vocab,
                params,
                args.k,
                args.normalize,
                args.top_n,
                qid,
                text,
            )?;
            Ok((qid.clone(), hits))
        })
        .collect()
}

enum MetricKind {
    Ndcg,
    Recall,
    Mrr,
}

fn parse_metric(name: &str) -> Result<(MetricKind, usize)> {
    let (kind, k) = name
        .split_once('@')
        .with_context(|| format!("metric {name:?} is not of the form name@k"))?;
    let k: usize = k
        .parse()
        .with_context(|| format!("metric {name:?} has a bad cutoff"))?;
    let kind = match kind {
        "ndcg" => MetricKind::Ndcg,
        "recall" => MetricKind::Recall,
        "mrr" => MetricKind::Mrr,
        other => bail!("unknown metric {other:?} (expected ndcg, recall, or mrr)"),
    };
    Ok((kind, k))
}

fn compute_metric(qrels: &Qrels, run: &RunFile, name: &str) -> Result<MetricReport> {
    let (kind, k) = parse_metric(name)?;
    Ok(match kind {
        MetricKind::Ndcg => ndcg_at_k(qrels, run, k)?,
        MetricKind::Recall => recall_at_k(qrels, run, k)?,
        MetricKind::Mrr => mrr_at_k(qrels, run, k)?,
    })
}

fn cmd_eval(args: crate::EvalArgs) -> Result<()> {
    echo_config(
        "eval",
        &[
            ("run", args.run.display().to_string()),
            ("qrels", args.qrels.display().to_string()),
            ("metrics", args.metrics.clone()),
            (
                "compare",
                args.compare
                    .as_ref()
                    .map_or("-".into(), |p| p.display().to_string()),
            ),
        ],
    );
    let qrels = Qrels::load(&args.qrels)?;
    let run = RunFile::load(&args.run)?;
    let compare = args.compare.as_ref().map(RunFile::load).transpose()?;

    let names: Vec<&str> = args.metrics.split(',').map(str::trim).collect();
    for name in names {
        let report = compute_metric(&qrels, &run, name)?;
        match &compare {
            None => println!(
                "{name}\t{:.5}\t({} queries)",
                report.mean,
                report.evaluated_queries()
            ),
            Some(other_run) => {
                let other = compute_metric(&qrels, other_run, name)?;
                let (a, b) = align_by_query(&report, &other);
                let test = paired_t_test(&a, &b)?;
                println!(
                    "{name}\t{:.5}\tvs\t{:.5}\tt={:.4}\tp={:.5}\tsignificant(p<0.01)={}",
                    report.mean, other.mean, test.t, test.p, test.significant
                );
            }
        }
    }
    Ok(())
}

fn cmd_bench(args: crate::BenchArgs) -> Result<()> {
    echo_config(
        "bench",
        &[
            ("index", args.index.display().to_string()),
            ("queries", args.queries.display().to_string()),
            ("vocab", args.vocab.display().to_string()),
            ("mode", mode_str(args.mode).to_string()),
            (
                "checkpoint",
                args.checkpoint
                    .as_ref()
                    .map_or("-".into(), |p| p.display().to_string()),
            ),
            ("k", args.k.map_or("d".into(), |k| k.to_string())),
            ("normalize", args.normalize.to_string()),
            ("top-n", args.top_n.to_string()),
            (
                "sweep-k",
                args.sweep_k.clone().unwrap_or_else(|| "-".into()),
            ),
        ],
    );
    let vocab = load_vocab(&args.vocab)?;
    let queries = load_jsonl_records(&args.queries)?;
    let ix = index::load(&args.index)?;

    if let Some(sweep) = &args.sweep_k {
        let Some(ckpt) = &args.checkpoint else {
            bail!("--sweep-k requires --checkpoint");
        };
        let Some(qrels_path) = &args.qrels else {
            bail!("--sweep-k requires --qrels");
        };
        let params = load_checkpoint(ckpt)?;
        let qrels = Qrels::load(qrels_path)?;
        let k_values: Vec<usize> = sweep
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .with_context(|| format!("bad k value {s:?}"))
            })
            .collect::<Result<_>>()?;
        let rows = sweep_k(
            &ix,
            &vocab,
            &queries,
            &params,
            &k_values,
            &qrels,
            args.top_n,
            args.normalize,
        )?;
        println!("{}", SweepRow::TSV_HEADER);
        for row in &rows {
            println!("{}", row.tsv_row());
        }
        return Ok(());
    }

    let params = match args.mode {
        ModeArg::Parametric => {
            let Some(ckpt) = &args.checkpoint else {
                bail!("parametric mode requires --checkpoint");
            };
            Some(load_checkpoint(ckpt)?)
        }
        ModeArg::Nonparametric => None,
    };
    let mode = match &params {
        Some(p) => Mode::Parametric {
            params: p,
            k: args.k.unwrap_or(p.d()),
            normalize: args.normalize,
        },
        None => Mode::Nonparametric,
    };
    let (report, _) = measure(&ix, &vocab, &queries, mode, args.top_n)?;
    println!("{}", BenchReport::TSV_HEADER);
    println!("{}", report.tsv_row());
    if let Some(path) = &args.report {
        let mut file = std::io::BufWriter::new(
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        report.write_jsonl(&mut file)?;
        file.flush()?;
        eprintln!("wrote per-query report to {}", path.display());
    }
    Ok(())
}

fn cmd_explain(args: crate::ExplainArgs) -> Result<()> {
    echo_config(
        "explain",
        &[
            ("vocab", args.vocab.display().to_string()),
            (
                "checkpoint",
                args.checkpoint
                    .as_ref()
                    .map_or("-".into(), |p| p.display().to_string()),
            ),
            ("text", args.text.clone().unwrap_or_else(|| "-".into())),
            ("doc-id", args.doc_id.clone().unwrap_or_else(|| "-".into())),
            ("query", args.query.clone().unwrap_or_else(|| "-".into())),
            ("m", args.m.to_string()),
        ],
    );
    let vocab = load_vocab(&args.vocab)?;
    let params = args.checkpoint.as_ref().map(load_checkpoint).transpose()?;

    let target: SparseVector = match (&args.text, &args.doc_id) {
        (Some(text), None) => match &params {
            // With a checkpoint, show the full weighting distribution.
            Some(p) => {
                let seq = tokenize(&vocab, text);
                if seq.is_empty() {
                    bail!("--text has no in-vocabulary tokens");
                }
                let lw = lexical_weights(p, &seq)?;
                SparseVector::from_dense(&lw.values)?
            }
            None => embed_nonparametric(&vocab, text),
        },
        (None, Some(doc_id)) => {
            let ix_path = args.index.as_ref().expect("clap enforces --index");
            let ix = index::load(ix_path)?;
            ix.doc_vector(doc_id)
                .with_context(|| format!("document {doc_id:?} not found in index"))?
        }
        _ => bail!("provide exactly one of --text or --doc-id"),
    };

    println!("top {} dimensions ({} stored):", args.m, target.nnz());
    for (token, weight) in top_tokens(&target, &vocab, args.m) {
        println!("{token}\t{weight:.6}");
    }

    if let Some(query_text) = &args.query {
        let query = match &params {
            Some(p) => {
                let k = args.k.unwrap_or(p.d());
                embed_query(p, &vocab, query_text, k, args.normalize)?
            }
            None => embed_nonparametric(&vocab, query_text),
        };
        let score = dot(&query, &target);
        let (contribs, total) = token_contributions(&query, &target, &vocab, args.m);
        println!("score = {score}");
        println!("token contributions (sum = {total}):");
        for (token, value) in contribs {
            println!("{token}\t{value:.6}");
        }
    }
    Ok(())
}

fn cmd_gradcheck(args: crate::GradcheckArgs) -> Result<()> {
    echo_config(
        "gradcheck",
        &[
            ("trials", args.trials.to_string()),
            ("seed", args.seed.to_string()),
        ],
    );
    let trials = gradcheck_random(args.trials, args.seed)?;
    let mut max = 0.0f64;
    for t in &trials {
        println!(
            "trial {:>3}: max_rel_err {:.3e} ({} checked, {} skipped)",
            t.trial, t.max_rel_err, t.checked, t.skipped
        );
        max = max.max(t.max_rel_err);
    }
    println!("overall max relative error: {max:.3e}");
    if max > 1e-3 {
        bail!("gradient check failed: max relative error {max:.3e} > 1e-3");
    }
    Ok(())
}

fn cmd_synth(args: crate::SynthArgs) -> Result<()> {
    echo_config(
        "synth",
        &[
            ("out-dir", args.out_dir.display().to_string()),
            ("topics", args.topics.to_string()),
            ("vocab-size", args.vocab_size.to_string()),
            ("docs", args.docs.to_string()),
            ("queries", args.queries.to_string()),
            ("doc-len", args.doc_len.to_string()),
            ("query-len", args.query_len.to_string()),
            ("noise", args.noise.to_string()),
            ("seed", args.seed.to_string()),
        ],
    );
    let cfg = SynthConfig {
        topics: args.topics,
        vocab_size: args.vocab_size,
        docs: args.docs,
        queries: args.queries,
        doc_len: args.doc_len,
        query_len: args.query_len,
        noise: args.noise,
        seed: args.seed,
    };
    let data = generate(&cfg)?;
    write_dataset(&data, &args.out_dir)?;
    println!(
        "wrote vocab.txt, corpus.jsonl, queries.jsonl, qrels.txt, pairs.jsonl under {}",
        args.out_dir.display()
    );
    Ok(())
}
