use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[corpus]
num_docs = 40
doc_len = 24
common_pool_size = 10
common_fraction = 0.5
topic_count = 4
topic_pool_size = 20
query_len = 3
heldout_queries = 10

[model]
hidden = 16
layers = 1
heads = 2
max_len = 32

[train]
steps = 12
batch_texts = 4

[finetune]
negatives = 3

[pipeline]
mining_depth = 10
mining_rounds = 0
probe_docs = 0
";

fn cpdae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpdae")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cpdae(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Desk {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: PathBuf,
    corpus: PathBuf,
}

fn desk() -> Desk {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let corpus = root.join("corpus");
    ok(&["gen-corpus", "--config", s(&cfg), "--out", s(&corpus)]);
    Desk {
        _dir: dir,
        root,
        cfg,
        corpus,
    }
}

/// Every file in `a` other than the run manifest, which records output paths.
fn assert_same_outputs(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n != "run_manifest.json")
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
}

fn csv_column(path: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let col = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_documents_every_key() {
    for sub in ["pretrain", "gen-corpus", "finetune"] {
        let help = ok(&[sub, "--help"]);
        assert!(help.contains("train.lambda = 0.1"), "{sub}");
        assert!(help.contains("finetune.negatives = 7"), "{sub}");
        assert!(help.contains("pipeline.eval_k = 10"), "{sub}");
    }
    assert!(ok(&["--help"]).contains("model.hidden = 32"));
}

#[test]
fn usage_errors_exit_1() {
    for args in [
        vec!["pretrain", "--bogus"],
        vec!["no-such-command"],
        vec!["pretrain", "--corpus", "x", "--out", "y", "--set", "train.lambda=abc"],
        vec!["pretrain", "--corpus", "x", "--out", "y", "--lambda", "abc"],
        vec!["pretrain", "--corpus", "x", "--out", "y", "--set", "train.lamda=0.2"],
        vec!["eval", "--run", "r", "--qrels", "q", "--metric", "map"],
    ] {
        let out = cpdae(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
    let err = String::from_utf8(cpdae(&["pretrain", "--corpus", "x", "--out", "y", "--lambda", "abc"]).stderr).unwrap();
    assert!(err.contains("train.lambda"), "{err}");
    let err = String::from_utf8(cpdae(&["pretrain", "--corpus", "x", "--out", "y", "--set", "train.lamda=1"]).stderr).unwrap();
    assert!(err.contains("did you mean `train.lambda`"), "{err}");
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = cpdae(&["pretrain", "--corpus", s(&dir.path().join("missing")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = cpdae(&["inspect", "--checkpoint", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_corpus_is_byte_identical_on_rerun() {
    let d = desk();
    let again = d.root.join("again");
    ok(&["gen-corpus", "--config", s(&d.cfg), "--out", s(&again)]);
    assert_same_outputs(&d.corpus, &again);
    // the spec written beside a corpus regenerates it
    let from_spec = d.root.join("from_spec");
    ok(&["gen-corpus", "--spec", s(&d.corpus.join("spec.json")), "--out", s(&from_spec)]);
    assert_same_outputs(&d.corpus, &from_spec);
    let other = d.root.join("other");
    ok(&["gen-corpus", "--config", s(&d.cfg), "--seed", "18", "--out", s(&other)]);
    assert_ne!(fs::read(d.corpus.join("corpus.jsonl")).unwrap(), fs::read(other.join("corpus.jsonl")).unwrap());
}

#[test]
fn flags_override_the_file_and_land_in_the_manifest() {
    let d = desk();
    let out = d.root.join("ck");
    fs::write(&d.cfg, format!("{TINY}\n[train]\nlambda = 0.1\n")).unwrap();
    ok(&["pretrain", "--config", s(&d.cfg), "--corpus", s(&d.corpus), "--out", s(&out), "--lambda", "0.2"]);
    let m = manifest(&out.join("run_manifest.json"));
    assert_eq!(m["config"]["train.lambda"], 0.2);
    assert_eq!(m["provenance"]["train.lambda"]["kind"], "flag");
    assert_eq!(m["provenance"]["train.steps"]["kind"], "file");
    assert_eq!(m["provenance"]["train.lr"]["kind"], "default");
    assert_eq!(m["subcommand"], "pretrain");
}

#[test]
fn no_cl_logs_a_zero_contrastive_column() {
    let d = desk();
    let out = d.root.join("ck");
    ok(&["pretrain", "--config", s(&d.cfg), "--corpus", s(&d.corpus), "--out", s(&out), "--loss-mode", "no_cl"]);
    let cl = csv_column(&out.join("metrics.csv"), "cl");
    assert_eq!(cl.len(), 12);
    assert!(cl.iter().all(|&v| v == 0.0));
    assert!(csv_column(&out.join("metrics.csv"), "rec").iter().all(|&v| v > 0.0));
}

#[test]
fn pipeline_stages_are_byte_reproducible() {
    let d = desk();
    let c = s(&d.cfg);
    let corpus = s(&d.corpus);
    let p = |name: &str| d.root.join(name);

    ok(&["pretrain", "--config", c, "--corpus", corpus, "--out", s(&p("a"))]);
    ok(&["pretrain", "--config", c, "--corpus", corpus, "--out", s(&p("b"))]);
    assert_same_outputs(&p("a"), &p("b"));
    // replaying the recorded manifest reproduces the run as well
    ok(&["pretrain", "--config", s(&p("a").join("run_manifest.json")), "--corpus", corpus, "--out", s(&p("replay"))]);
    assert_same_outputs(&p("a"), &p("replay"));

    ok(&["mine", "--config", c, "--corpus", corpus, "--miner", "bm25", "--out", s(&p("groups.jsonl"))]);
    assert!(p("groups.jsonl.run_manifest.json").exists());
    for ft in ["fa", "fb"] {
        ok(&[
            "finetune", "--config", c, "--checkpoint", s(&p("a")), "--corpus", corpus,
            "--groups", s(&p("groups.jsonl")), "--out", s(&p(ft)),
        ]);
    }
    assert_same_outputs(&p("fa"), &p("fb"));

    ok(&["mine", "--config", c, "--corpus", corpus, "--checkpoint", s(&p("fa")), "--out", s(&p("g2.jsonl"))]);
    assert!(fs::read_to_string(p("g2.jsonl")).unwrap().lines().count() > 0);

    for run in ["run1.trec", "run2.trec"] {
        ok(&["search", "--config", c, "--corpus", corpus, "--checkpoint", s(&p("fa")), "--out", s(&p(run))]);
    }
    assert_eq!(fs::read(p("run1.trec")).unwrap(), fs::read(p("run2.trec")).unwrap());
    let mrr: f64 = ok(&["eval", "--run", s(&p("run1.trec")), "--qrels", s(&d.corpus.join("qrels.txt"))])
        .trim()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&mrr));

    ok(&["search", "--config", c, "--corpus", corpus, "--bm25", "--out", s(&p("bm25.trec"))]);
    let bm25: f64 = ok(&["eval", "--run", s(&p("bm25.trec")), "--qrels", s(&d.corpus.join("qrels.txt")), "--metric", "recall"])
        .trim()
        .parse()
        .unwrap();
    assert!(bm25 > 0.5, "bm25 recall@10 {bm25}");

    let inspect = ok(&["inspect", "--checkpoint", s(&p("fa"))]);
    assert!(inspect.contains("decoder      false"), "{inspect}");
    let report = p("probe.json");
    let text = ok(&[
        "probe", "--config", c, "--checkpoint", s(&p("a")), "--against", s(&p("replay")),
        "--corpus", corpus, "--out", s(&report),
    ]);
    assert!(text.contains("delta +0.000000"), "{text}");
    assert!(manifest(&report)["delta_common"].as_f64().unwrap() == 0.0);
}

#[test]
fn model_mining_needs_a_checkpoint() {
    let d = desk();
    let out = cpdae(&["mine", "--config", s(&d.cfg), "--corpus", s(&d.corpus), "--out", s(&d.root.join("g"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn probe_renders_a_heatmap() {
    let d = desk();
    let ck = d.root.join("ck");
    ok(&["pretrain", "--config", s(&d.cfg), "--corpus", s(&d.corpus), "--out", s(&ck)]);
    let (html, csv) = (d.root.join("h.html"), d.root.join("h.csv"));
    let text = ok(&[
        "probe", "--checkpoint", s(&ck), "--text", "zzzunknownword", "--html", s(&html), "--csv", s(&csv),
    ]);
    assert!(text.contains("[UNK]"), "{text}");
    assert!(fs::read_to_string(html).unwrap().contains("<html"));
    assert!(fs::read_to_string(csv).unwrap().lines().count() >= 2);
}

#[test]
fn eval_scores_a_rank_two_hit() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run.trec");
    let qrels = dir.path().join("qrels.txt");
    fs::write(&run, "q1 Q0 d9 1 2.0 toy\nq1 Q0 d1 2 1.0 toy\n").unwrap();
    fs::write(&qrels, "q1 0 d1 1\n").unwrap();
    assert_eq!(ok(&["eval", "--run", s(&run), "--qrels", s(&qrels)]).trim(), "0.5000");
    assert_eq!(ok(&["eval", "--run", s(&run), "--qrels", s(&qrels), "--metric", "ndcg"]).trim(), "0.6309");
    fs::write(&qrels, "q2 0 d1 1\n").unwrap();
    assert_eq!(cpdae(&["eval", "--run", s(&run), "--qrels", s(&qrels)]).status.code(), Some(2));
}
