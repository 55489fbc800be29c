//! Ranking metrics, exact search and BM25 against hand-computed tables.

use std::collections::BTreeMap;

use cpdae_core::eval::{
    bm25_search, brute_force_search, compute_metric, read_run, write_run, Bm25Index, Metric, Ranked, RetrievalRun,
};
use cpdae_core::text::{Qrels, TokenSeq, CLS, PAD, SEP};
use cpdae_core::{rng, Error};
use cpdae_tensor::Tensor;
use rand::Rng as _;

// Robertson BM25 (k1 0.9, b 0.4) evaluated by hand over `toy_corpus`.
const BM25_Q1: [f64; 5] = [0.5454558462807486, 0.7117938150422976, 0.8358746738554821, 0.0, 1.5593741152375855];
const BM25_Q2: [f64; 5] = [0.8859603733541462, 0.0, 0.0, 1.0065903788032737, 1.2527749280037062];
const INV_LOG2_3: f64 = 0.630929753571457;

fn seq(id: &str, content: &[u32], max_len: usize) -> TokenSeq {
    let mut ids = vec![CLS];
    ids.extend_from_slice(content);
    ids.push(SEP);
    let true_len = ids.len();
    ids.resize(max_len.max(true_len), PAD);
    TokenSeq {
        doc_id: id.into(),
        ids,
        true_len,
    }
}

fn toy_corpus() -> Vec<TokenSeq> {
    let docs: [&[u32]; 5] = [&[5, 6, 7], &[5, 5, 8], &[6, 8, 9, 10], &[7], &[5, 9, 9, 10, 11]];
    docs.iter().enumerate().map(|(i, d)| seq(&format!("d{i}"), d, 8)).collect()
}

fn run_of(qid: &str, docids: &[&str]) -> RetrievalRun {
    let ranked = docids
        .iter()
        .enumerate()
        .map(|(i, d)| Ranked {
            docid: d.to_string(),
            score: (docids.len() - i) as f64,
        })
        .collect();
    RetrievalRun {
        results: BTreeMap::from([(qid.to_string(), ranked)]),
    }
}

fn qrels_of(qid: &str, rel: &[(&str, u32)]) -> Qrels {
    BTreeMap::from([(qid.to_string(), rel.iter().map(|(d, g)| (d.to_string(), *g)).collect())])
}

#[test]
fn metric_toy_cases() {
    let run = run_of("q", &["a", "b", "c"]);
    let qrels = qrels_of("q", &[("b", 1)]);
    assert!((compute_metric(Metric::Mrr, 10, &run, &qrels).unwrap().mean - 0.5).abs() < 1e-12);
    assert!((compute_metric(Metric::Ndcg, 10, &run, &qrels).unwrap().mean - INV_LOG2_3).abs() < 1e-9);
    assert_eq!(compute_metric(Metric::Recall, 10, &run, &qrels).unwrap().mean, 1.0);
    assert_eq!(compute_metric(Metric::Mrr, 1, &run, &qrels).unwrap().mean, 0.0);

    let qrels = qrels_of("q", &[("a", 1), ("z", 1), ("c", 0)]);
    assert_eq!(compute_metric(Metric::Recall, 10, &run, &qrels).unwrap().mean, 0.5);
}

#[test]
fn graded_ndcg() {
    let run = run_of("q", &["a", "b"]);
    let qrels = qrels_of("q", &[("a", 1), ("b", 2)]);
    let dcg = 1.0 + 3.0 / 3f64.log2();
    let idcg = 3.0 + 1.0 / 3f64.log2();
    assert!((compute_metric(Metric::Ndcg, 10, &run, &qrels).unwrap().mean - dcg / idcg).abs() < 1e-12);
}

#[test]
fn missing_query_in_qrels_is_an_error() {
    let run = run_of("q", &["a"]);
    let qrels = qrels_of("other", &[("a", 1)]);
    assert!(matches!(compute_metric(Metric::Mrr, 10, &run, &qrels), Err(Error::Eval(_))));
}

#[test]
fn metrics_are_monotone_in_k() {
    let docs: Vec<String> = (0..30).map(|i| format!("d{i}")).collect();
    let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
    let run = run_of("q", &refs);
    let qrels = qrels_of("q", &[("d4", 1), ("d12", 2), ("d25", 1)]);
    for metric in [Metric::Mrr, Metric::Recall] {
        let mut prev = 0.0;
        for k in 1..=30 {
            let v = compute_metric(metric, k, &run, &qrels).unwrap().mean;
            assert!((0.0..=1.0).contains(&v) && v >= prev);
            prev = v;
        }
    }
}

#[test]
fn brute_force_argmax_and_self_match() {
    let q = Tensor::new(vec![1, 2], vec![1.0f32, 0.0]).unwrap();
    let d = Tensor::new(vec![2, 2], vec![3.0f32, 0.0, 5.0, 1.0]).unwrap();
    let ids = vec!["x".to_string(), "y".to_string()];
    let out = brute_force_search(&["q".into()], &q, &ids, &d, 1).unwrap();
    assert_eq!(out.run.results["q"][0].docid, "y");
    assert!(!out.k_exceeds_corpus);

    let out = brute_force_search(&["q".into()], &q, &ids, &d, 5).unwrap();
    assert!(out.k_exceeds_corpus);
    assert_eq!(out.run.results["q"].len(), 2);

    let s = std::f32::consts::FRAC_1_SQRT_2;
    let docs = Tensor::new(vec![3, 2], vec![1.0, 0.0, s, s, 0.0, 1.0]).unwrap();
    let query = Tensor::new(vec![1, 2], vec![s, s]).unwrap();
    let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let out = brute_force_search(&["q".into()], &query, &ids, &docs, 3).unwrap();
    assert_eq!(out.run.results["q"][0].docid, "b");
}

#[test]
fn brute_force_matches_full_sort_oracle() {
    let mut r = rng::stream(3, "eval-test");
    for instance in 0..50 {
        let (nq, nd, h, k) = (20, 200, 8, 1 + instance % 15);
        // coarse values create exact ties that exercise the docid tie-break
        let qv = Tensor::from_fn(vec![nq, h], |_| r.random_range(-2i32..=2) as f32);
        let dv = Tensor::from_fn(vec![nd, h], |_| r.random_range(-2i32..=2) as f32);
        let qids: Vec<String> = (0..nq).map(|i| format!("q{i}")).collect();
        let dids: Vec<String> = (0..nd).map(|i| format!("doc{i:03}")).collect();
        let out = brute_force_search(&qids, &qv, &dids, &dv, k).unwrap();
        for qi in 0..nq {
            let mut all: Vec<(f64, &String)> = (0..nd)
                .map(|di| {
                    let s: f64 = (0..h).map(|j| qv.row(qi)[j] as f64 * dv.row(di)[j] as f64).sum();
                    (s, &dids[di])
                })
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
            let want: Vec<&String> = all.iter().take(k).map(|x| x.1).collect();
            let got: Vec<&String> = out.run.results[&qids[qi]].iter().map(|r| &r.docid).collect();
            assert_eq!(got, want, "instance {instance} query {qi}");
        }
    }
}

#[test]
fn bm25_matches_hand_table() {
    let docs = toy_corpus();
    let index = Bm25Index::build(&docs, 0.9, 0.4).unwrap();
    for (query, table) in [(&[5u32, 9][..], BM25_Q1), (&[7, 11][..], BM25_Q2)] {
        let scores = index.scores(query);
        for (got, want) in scores.iter().zip(table) {
            assert!((got - want).abs() < 1e-6, "{scores:?}");
        }
    }
}

#[test]
fn bm25_unique_term_and_length_independence() {
    let docs = toy_corpus();
    let index = Bm25Index::build(&docs, 0.9, 0.4).unwrap();
    let top = index.search(&[11], 5).unwrap();
    assert_eq!(top[0].docid, "d4");
    assert!(top[1..].iter().all(|r| r.score == 0.0));

    let docs = vec![seq("short", &[20, 21], 8), seq("long", &[20, 22, 23, 24, 25], 8)];
    let flat = Bm25Index::build(&docs, 0.9, 0.0).unwrap().scores(&[20]);
    assert_eq!(flat[0], flat[1]);
    let normed = Bm25Index::build(&docs, 0.9, 0.4).unwrap().scores(&[20]);
    assert!(normed[0] > normed[1]);
}

#[test]
fn bm25_empty_query_is_flagged() {
    let docs = toy_corpus();
    let index = Bm25Index::build(&docs, 0.9, 0.4).unwrap();
    let queries = vec![seq("empty", &[1, 1], 8), seq("ok", &[5], 8)];
    let out = bm25_search(&index, &queries, 3).unwrap();
    assert_eq!(out.empty_queries, vec!["empty".to_string()]);
    assert!(out.run.results["empty"].is_empty());
    assert_eq!(out.run.results["ok"].len(), 3);
}

#[test]
fn run_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.trec");
    let mut run = run_of("q1", &["b", "a", "c"]);
    run.results.insert(
        "q2".into(),
        vec![
            Ranked { docid: "x".into(), score: 0.25 },
            Ranked { docid: "w".into(), score: 0.25 },
        ],
    );
    run.results.get_mut("q2").unwrap().sort_by(|a, b| a.docid.cmp(&b.docid));
    write_run(&path, &run, "test").unwrap();
    let back = read_run(&path).unwrap();
    assert_eq!(back, run);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().all(|l| l.split_whitespace().count() == 6));

    std::fs::write(&path, "q1 Q0 a 1 nope t\n").unwrap();
    assert!(matches!(read_run(&path), Err(Error::Parse { .. })));
}
