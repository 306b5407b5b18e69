//! End-to-end tests of the `vdr` binary: pipeline runs, file formats, the
//! config-file mechanism, and error exits.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vdr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vdr"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = vdr().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "vdr {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> Output {
    let out = vdr().args(args).output().unwrap();
    assert!(
        !out.status.success(),
        "vdr {:?} unexpectedly succeeded",
        args
    );
    out
}

struct Pipeline {
    dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
    index: PathBuf,
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// synth -> train (short) -> index, shared by several tests.
fn small_pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(&[
        "synth",
        "--out-dir",
        p(&data),
        "--topics",
        "4",
        "--vocab-size",
        "64",
        "--docs",
        "40",
        "--queries",
        "12",
        "--doc-len",
        "10",
        "--query-len",
        "4",
        "--noise",
        "0.2",
        "--seed",
        "11",
    ]);
    let ckpt = dir.path().join("model.vdrc");
    run_ok(&[
        "train",
        "--pairs",
        p(&data.join("pairs.jsonl")),
        "--vocab",
        p(&data.join("vocab.txt")),
        "--out",
        p(&ckpt),
        "--d",
        "8",
        "--epochs",
        "4",
        "--batch-size",
        "8",
        "--lr",
        "0.02",
        "--seed",
        "3",
    ]);
    let index = dir.path().join("ix.vdri");
    run_ok(&[
        "index",
        "--corpus",
        p(&data.join("corpus.jsonl")),
        "--vocab",
        p(&data.join("vocab.txt")),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&index),
    ]);
    Pipeline {
        dir,
        data,
        ckpt,
        index,
    }
}

#[test]
fn full_pipeline_with_eval_and_compare() {
    let pl = small_pipeline();
    let run_param = pl.dir.path().join("run_param.txt");
    let run_np = pl.dir.path().join("run_np.txt");
    run_ok(&[
        "search",
        "--index",
        p(&pl.index),
        "--queries",
        p(&pl.data.join("queries.jsonl")),
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--mode",
        "parametric",
        "--checkpoint",
        p(&pl.ckpt),
        "--top-n",
        "5",
        "--out",
        p(&run_param),
    ]);
    run_ok(&[
        "search",
        "--index",
        p(&pl.index),
        "--queries",
        p(&pl.data.join("queries.jsonl")),
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--mode",
        "nonparametric",
        "--top-n",
        "5",
        "--out",
        p(&run_np),
    ]);

    // Run-file lines follow "qid Q0 docid rank score tag".
    let text = std::fs::read_to_string(&run_param).unwrap();
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 6, "bad line {line:?}");
        assert_eq!(fields[1], "Q0");
        fields[3].parse::<usize>().unwrap();
        fields[4].parse::<f64>().unwrap();
        assert_eq!(fields[5], "vdr");
    }

    let out = run_ok(&[
        "eval",
        "--run",
        p(&run_param),
        "--qrels",
        p(&pl.data.join("qrels.txt")),
        "--metrics",
        "ndcg@10,recall@5,mrr@10",
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 3, "{stdout}");
    assert!(stdout.contains("ndcg@10"), "{stdout}");

    // Comparing a run against itself: zero differences, p = 1.
    let out = run_ok(&[
        "eval",
        "--run",
        p(&run_param),
        "--qrels",
        p(&pl.data.join("qrels.txt")),
        "--metrics",
        "ndcg@10",
        "--compare",
        p(&run_param),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("t=0.0000"), "{stdout}");
    assert!(stdout.contains("p=1.00000"), "{stdout}");
}

#[test]
fn searching_a_docs_own_text_ranks_it_first() {
    let pl = small_pipeline();
    // Query with the exact text of an indexed document.
    let corpus = std::fs::read_to_string(pl.data.join("corpus.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(corpus.lines().next().unwrap()).unwrap();
    let queries = pl.dir.path().join("self_queries.jsonl");
    std::fs::write(
        &queries,
        format!(
            "{}\n",
            serde_json::json!({"id": "self", "text": first["text"].as_str().unwrap()})
        ),
    )
    .unwrap();
    let run = pl.dir.path().join("self_run.txt");
    run_ok(&[
        "search",
        "--index",
        p(&pl.index),
        "--queries",
        p(&queries),
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--mode",
        "nonparametric",
        "--top-n",
        "3",
        "--out",
        p(&run),
    ]);
    let text = std::fs::read_to_string(&run).unwrap();
    let top = text.lines().next().unwrap();
    assert_eq!(
        top.split_whitespace().nth(2).unwrap(),
        first["id"].as_str().unwrap(),
        "{text}"
    );
}

#[test]
fn eval_reproduces_hand_computed_ndcg() {
    let dir = tempfile::tempdir().unwrap();
    let qrels = dir.path().join("qrels.txt");
    let run = dir.path().join("run.txt");
    std::fs::write(&qrels, "q1 0 d1 2\nq1 0 d2 1\n").unwrap();
    std::fs::write(
        &run,
        "q1 Q0 d2 1 3.0 t\nq1 Q0 d1 2 2.0 t\nq1 Q0 d3 3 1.0 t\n",
    )
    .unwrap();
    let out = run_ok(&[
        "eval",
        "--run",
        p(&run),
        "--qrels",
        p(&qrels),
        "--metrics",
        "ndcg@10",
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("0.85972"), "{stdout}");
}

#[test]
fn search_threads_are_byte_identical() {
    let pl = small_pipeline();
    let run1 = pl.dir.path().join("run_t1.txt");
    let run4 = pl.dir.path().join("run_t4.txt");
    for (threads, out) in [("1", &run1), ("4", &run4)] {
        run_ok(&[
            "search",
            "--index",
            p(&pl.index),
            "--queries",
            p(&pl.data.join("queries.jsonl")),
            "--vocab",
            p(&pl.data.join("vocab.txt")),
            "--mode",
            "parametric",
            "--checkpoint",
            p(&pl.ckpt),
            "--threads",
            threads,
            "--out",
            p(out),
        ]);
    }
    assert_eq!(
        std::fs::read(&run1).unwrap(),
        std::fs::read(&run4).unwrap(),
        "multi-threaded search output differs"
    );
}

#[test]
fn search_parametric_requires_checkpoint() {
    let pl = small_pipeline();
    let out = run_err(&[
        "search",
        "--index",
        p(&pl.index),
        "--queries",
        p(&pl.data.join("queries.jsonl")),
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--mode",
        "parametric",
        "--out",
        p(&pl.dir.path().join("r.txt")),
    ]);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("requires --checkpoint"), "{stderr}");
}

#[test]
fn train_missing_vocab_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_err(&[
        "train",
        "--pairs",
        p(&dir.path().join("nope.jsonl")),
        "--vocab",
        p(&dir.path().join("nope.txt")),
        "--out",
        p(&dir.path().join("x.vdrc")),
    ]);
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_epochs_zero_writes_init_checkpoint() {
    let pl = small_pipeline();
    let c1 = pl.dir.path().join("z1.vdrc");
    let c2 = pl.dir.path().join("z2.vdrc");
    for out in [&c1, &c2] {
        run_ok(&[
            "train",
            "--pairs",
            p(&pl.data.join("pairs.jsonl")),
            "--vocab",
            p(&pl.data.join("vocab.txt")),
            "--out",
            p(out),
            "--d",
            "8",
            "--epochs",
            "0",
            "--seed",
            "3",
        ]);
    }
    let bytes = std::fs::read(&c1).unwrap();
    assert_eq!(&bytes[..4], b"VDRC");
    assert_eq!(bytes, std::fs::read(&c2).unwrap());
}

#[test]
fn eval_unknown_metric_fails() {
    let pl = small_pipeline();
    let run = pl.dir.path().join("run.txt");
    run_ok(&[
        "search",
        "--index",
        p(&pl.index),
        "--queries",
        p(&pl.data.join("queries.jsonl")),
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--mode",
        "nonparametric",
        "--out",
        p(&run),
    ]);
    let out = run_err(&[
        "eval",
        "--run",
        p(&run),
        "--qrels",
        p(&pl.data.join("qrels.txt")),
        "--metrics",
        "precision@10",
    ]);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("unknown metric"), "{stderr}");
}

#[test]
fn config_file_applies_and_flags_override() {
    let pl = small_pipeline();
    let conf = pl.dir.path().join("train.conf");
    std::fs::write(
        &conf,
        "# settings\nepochs = 2\nd = 8\nbatch-size = 8\nseed = 3\nlr = 0.02\n",
    )
    .unwrap();
    let from_conf = pl.dir.path().join("conf.vdrc");
    let out = run_ok(&[
        "train",
        "--pairs",
        p(&pl.data.join("pairs.jsonl")),
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--out",
        p(&from_conf),
        "--config",
        p(&conf),
    ]);
    // The resolved configuration is echoed to standard error.
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("epochs = 2"), "{stderr}");

    // A command-line flag overrides the file value.
    let out = run_ok(&[
        "train",
        "--pairs",
        p(&pl.data.join("pairs.jsonl")),
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--out",
        p(&pl.dir.path().join("conf2.vdrc")),
        "--config",
        p(&conf),
        "--epochs",
        "1",
    ]);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("epochs = 1"), "{stderr}");

    // Unknown keys are rejected.
    std::fs::write(&conf, "bogus-key = 1\n").unwrap();
    let out = run_err(&[
        "train",
        "--pairs",
        p(&pl.data.join("pairs.jsonl")),
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--out",
        p(&pl.dir.path().join("conf3.vdrc")),
        "--config",
        p(&conf),
    ]);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("unknown key"), "{stderr}");
}

#[test]
fn explain_lists_tokens_and_contributions() {
    let pl = small_pipeline();
    // Pull a real document id and query text from the dataset.
    let corpus = std::fs::read_to_string(pl.data.join("corpus.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(corpus.lines().next().unwrap()).unwrap();
    let doc_id = first["id"].as_str().unwrap();
    let doc_text = first["text"].as_str().unwrap();
    let query_text = doc_text.split(' ').take(3).collect::<Vec<_>>().join(" ");

    let out = run_ok(&[
        "explain",
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--checkpoint",
        p(&pl.ckpt),
        "--doc-id",
        doc_id,
        "--index",
        p(&pl.index),
        "--query",
        &query_text,
        "-m",
        "5",
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("top 5 dimensions"), "{stdout}");
    // The printed contribution sum equals the printed score (same text).
    let score_line = stdout.lines().find(|l| l.starts_with("score = ")).unwrap();
    let sum_line = stdout.lines().find(|l| l.contains("(sum = ")).unwrap();
    let score = score_line.trim_start_matches("score = ").trim();
    let sum = sum_line
        .split("(sum = ")
        .nth(1)
        .unwrap()
        .trim_end_matches("):");
    assert_eq!(score, sum, "{stdout}");

    // Nonparametric query against a nonparametric text embedding:
    // contributions can only appear at the query's own token dimensions.
    let out = run_ok(&[
        "explain",
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--text",
        doc_text,
        "--query",
        &query_text,
        "-m",
        "64",
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let query_tokens: std::collections::HashSet<&str> = query_text.split(' ').collect();
    let mut in_contribs = false;
    for line in stdout.lines() {
        if line.starts_with("token contributions") {
            in_contribs = true;
            continue;
        }
        if in_contribs {
            let token = line.split('\t').next().unwrap();
            assert!(query_tokens.contains(token), "unexpected token {token}");
        }
    }
}

#[test]
fn bench_reports_counters_and_sweep() {
    let pl = small_pipeline();
    let report = pl.dir.path().join("bench.jsonl");
    let out = run_ok(&[
        "bench",
        "--index",
        p(&pl.index),
        "--queries",
        p(&pl.data.join("queries.jsonl")),
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--mode",
        "nonparametric",
        "--report",
        p(&report),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let data_line = stdout.lines().nth(1).unwrap();
    assert!(data_line.starts_with("nonparametric\t"), "{stdout}");
    let forwards: u64 = data_line.split('\t').nth(7).unwrap().parse().unwrap();
    assert_eq!(forwards, 0);
    assert_eq!(
        std::fs::read_to_string(&report).unwrap().lines().count(),
        12
    );

    let out = run_ok(&[
        "bench",
        "--index",
        p(&pl.index),
        "--queries",
        p(&pl.data.join("queries.jsonl")),
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--checkpoint",
        p(&pl.ckpt),
        "--qrels",
        p(&pl.data.join("qrels.txt")),
        "--sweep-k",
        "0,4,16,64",
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut updates = Vec::new();
    for line in stdout.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        updates.push(cols[5].parse::<u64>().unwrap());
    }
    assert_eq!(updates.len(), 4);
    assert!(updates.windows(2).all(|w| w[0] <= w[1]), "{updates:?}");
}

#[test]
fn embed_stats_and_dump() {
    let pl = small_pipeline();
    let dump = pl.dir.path().join("emb.txt");
    run_ok(&[
        "embed",
        "--corpus",
        p(&pl.data.join("corpus.jsonl")),
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--checkpoint",
        p(&pl.ckpt),
        "--out",
        p(&dump),
    ]);
    let text = std::fs::read_to_string(&dump).unwrap();
    assert_eq!(text.lines().count(), 40);
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("d"), "{first}");
    assert!(first.contains(':'), "{first}");

    let out = run_ok(&[
        "embed",
        "--corpus",
        p(&pl.data.join("corpus.jsonl")),
        "--vocab",
        p(&pl.data.join("vocab.txt")),
        "--mode",
        "nonparametric",
        "--stats",
        "-m",
        "5",
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("token activation means"), "{stdout}");
}

#[test]
fn gradcheck_cli_runs_and_rejects_zero_trials() {
    let out = run_ok(&["gradcheck", "--trials", "4", "--seed", "5"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("overall max relative error"), "{stdout}");

    let again = run_ok(&["gradcheck", "--trials", "4", "--seed", "5"]);
    assert_eq!(
        stdout,
        String::from_utf8(again.stdout).unwrap(),
        "gradcheck output not deterministic"
    );

    let out = run_err(&["gradcheck", "--trials", "0"]);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("no trials"), "{stderr}");
}

#[test]
fn synth_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&[
            "synth",
            "--out-dir",
            p(out),
            "--topics",
            "2",
            "--vocab-size",
            "32",
            "--docs",
            "10",
            "--queries",
            "4",
            "--doc-len",
            "6",
            "--query-len",
            "3",
            "--seed",
            "9",
        ]);
    }
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
