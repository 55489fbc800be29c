//! Bi-encoder fine-tuning and hard-negative mining.

use std::collections::BTreeMap;

use cpdae_core::checkpoint::{Checkpoint, CheckpointKind};
use cpdae_core::eval::{Ranked, RetrievalRun};
use cpdae_core::finetune::{
    embed_texts, finetune, groups_loss, mine_hard_negatives, read_groups, write_groups, FinetuneConfig, FtLoss,
    TextTable, TrainingGroup,
};
use cpdae_core::model::{Model, ModelConfig};
use cpdae_core::text::{build_vocab, encode_text, Qrels, TokenSeq, Vocab};
use cpdae_core::{rng, Error};
use cpdae_tensor::Tape;

const TEXTS: [(&str, &str); 6] = [
    ("d0", "red apples grow on tall trees"),
    ("d1", "the river floods every spring"),
    ("d2", "quiet libraries hold old maps"),
    ("d3", "fast trains cross the valley"),
    ("d4", "bees make honey from clover"),
    ("d5", "snow covers the mountain pass"),
];

struct Fixture {
    vocab: Vocab,
    docs: Vec<TokenSeq>,
    texts: TextTable,
    config: ModelConfig,
}

fn fixture() -> Fixture {
    let queries = [("q0", "apples trees"), ("q1", "river spring")];
    let vocab = build_vocab(TEXTS.iter().map(|t| t.1).chain(queries.iter().map(|q| q.1)), 100).unwrap();
    let enc = |(id, text): &(&str, &str)| encode_text(&vocab, id, text, 12).unwrap();
    let docs: Vec<TokenSeq> = TEXTS.iter().map(enc).collect();
    let qs: Vec<TokenSeq> = queries.iter().map(enc).collect();
    let config = ModelConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        vocab_size: vocab.len(),
        max_len: 12,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    Fixture {
        texts: TextTable::new(&qs, &docs),
        vocab,
        docs,
        config,
    }
}

fn group(qid: &str, pos: &str, negs: &[&str]) -> TrainingGroup {
    TrainingGroup {
        qid: qid.into(),
        pos_docid: pos.into(),
        neg_docids: negs.iter().map(|s| s.to_string()).collect(),
    }
}

fn base_checkpoint(f: &Fixture) -> Checkpoint {
    Checkpoint::init(f.config.clone(), f.vocab.clone(), &mut rng::stream(4, rng::INIT)).unwrap()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

#[test]
fn groups_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("groups.jsonl");
    let groups = vec![group("q0", "d0", &["d1", "d2"]), group("q1", "d1", &["d5"])];
    write_groups(&path, &groups).unwrap();
    assert_eq!(read_groups(&path).unwrap(), groups);
}

#[test]
fn embeddings_are_deterministic_and_shaped() {
    let f = fixture();
    let model = Model::init(f.config.clone(), &mut rng::stream(1, rng::INIT)).unwrap();
    let twice = vec![f.docs[2].clone(), f.docs[2].clone(), f.docs[0].clone()];
    let e = embed_texts(&model, &twice).unwrap();
    assert_eq!(e.shape(), &[3, 16]);
    assert_eq!(e.row(0), e.row(1));
    // query and document share one tower
    let as_query = encode_text(&f.vocab, "q", TEXTS[2].1, 12).unwrap();
    assert_eq!(embed_texts(&model, &[as_query]).unwrap().row(0), e.row(0));
}

#[test]
fn softmax_loss_is_ln_n_plus_one_for_equal_scores() {
    let f = fixture();
    let model = Model::init(f.config.clone(), &mut rng::stream(1, rng::INIT)).unwrap();
    // every document identical to the positive
    let same: Vec<TokenSeq> = ["a", "b", "c", "d"]
        .iter()
        .map(|id| encode_text(&f.vocab, id, TEXTS[0].1, 12).unwrap())
        .collect();
    let texts = TextTable::new(&[f.texts.queries["q0"].clone()], &same);
    let g = group("q0", "a", &["b", "c", "d"]);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let cfg = FinetuneConfig::default();
    let l = groups_loss(&mut tape, &model, &p, &[&g], &texts, &cfg, &mut rng::stream(0, rng::DROPOUT)).unwrap();
    assert!((tape.value(l).item() as f64 - 4f64.ln()).abs() < 1e-5);
}

#[test]
fn single_negative_hinge_matches_formula() {
    let f = fixture();
    let model = Model::init(f.config.clone(), &mut rng::stream(2, rng::INIT)).unwrap();
    let g = group("q0", "d0", &["d3"]);
    let cfg = FinetuneConfig {
        loss: FtLoss::Hinge,
        margin: 1.0,
        ..FinetuneConfig::default()
    };
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let l = groups_loss(&mut tape, &model, &p, &[&g], &f.texts, &cfg, &mut rng::stream(0, rng::DROPOUT)).unwrap();
    let e = embed_texts(&model, &[f.texts.queries["q0"].clone(), f.docs[0].clone(), f.docs[3].clone()]).unwrap();
    let (s_pos, s_neg) = (dot(e.row(0), e.row(1)), dot(e.row(0), e.row(2)));
    let want = (1.0 - s_pos + s_neg).max(0.0);
    assert!((tape.value(l).item() as f64 - want).abs() < 1e-4, "{} vs {want}", tape.value(l).item());
}

#[test]
fn group_without_negatives_is_rejected() {
    let f = fixture();
    let err = finetune(&base_checkpoint(&f), &[group("q0", "d0", &[])], &f.texts, &FinetuneConfig::default());
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn one_group_overfits() {
    let f = fixture();
    let cfg = FinetuneConfig {
        negatives: 3,
        batch_groups: 1,
        steps: 200,
        lr: 1e-3,
        ..FinetuneConfig::default()
    };
    let out = finetune(&base_checkpoint(&f), &[group("q0", "d0", &["d1", "d2", "d3"])], &f.texts, &cfg).unwrap();
    let last = out.log.last().unwrap().loss;
    assert!(last < 0.01, "final loss {last}");
}

#[test]
fn finetuned_checkpoint_is_decoder_free_and_moves_embeddings() {
    let f = fixture();
    let base = base_checkpoint(&f);
    let cfg = FinetuneConfig {
        negatives: 2,
        steps: 1,
        warmup_fraction: 0.0,
        ..FinetuneConfig::default()
    };
    let out = finetune(&base, &[group("q0", "d0", &["d1", "d2"])], &f.texts, &cfg).unwrap();
    let ckpt = &out.checkpoint;
    assert_eq!(ckpt.kind, CheckpointKind::Finetuned);
    assert!(!ckpt.model.has_decoder());
    let names = ckpt.manifest().tensors.into_iter().map(|t| t.name).collect::<Vec<_>>();
    assert!(names.iter().all(|n| !n.starts_with("decoder.") && !n.starts_with("mlm.")));

    let before = embed_texts(&base.model, &f.docs[..1]).unwrap();
    let after = embed_texts(&ckpt.model, &f.docs[..1]).unwrap();
    assert_ne!(before.data(), after.data());

    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.model.params, ckpt.model.params);
}

#[test]
fn finetuning_is_deterministic() {
    let f = fixture();
    let groups = vec![group("q0", "d0", &["d1", "d2"]), group("q1", "d1", &["d4", "d5"])];
    let cfg = FinetuneConfig {
        negatives: 2,
        batch_groups: 1,
        steps: 6,
        ..FinetuneConfig::default()
    };
    let a = finetune(&base_checkpoint(&f), &groups, &f.texts, &cfg).unwrap();
    let b = finetune(&base_checkpoint(&f), &groups, &f.texts, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.model.params, b.checkpoint.model.params);
}

fn ranked_run(qid: &str, docids: &[&str]) -> RetrievalRun {
    let ranked = docids
        .iter()
        .enumerate()
        .map(|(i, d)| Ranked {
            docid: d.to_string(),
            score: -(i as f64),
        })
        .collect();
    RetrievalRun {
        results: BTreeMap::from([(qid.to_string(), ranked)]),
    }
}

fn all_ids() -> Vec<String> {
    TEXTS.iter().map(|t| t.0.to_string()).collect()
}

fn qrels(rel: &[&str]) -> Qrels {
    BTreeMap::from([("q".to_string(), rel.iter().map(|d| (d.to_string(), 1)).collect())])
}

#[test]
fn mining_filters_relevant_documents() {
    let run = ranked_run("q", &["d3", "d0", "d4", "d1", "d2", "d5"]);
    let out = mine_hard_negatives(&run, &qrels(&["d3"]), &all_ids(), 2, 6, &mut rng::stream(0, rng::NEGATIVES)).unwrap();
    assert_eq!(out.groups, vec![group("q", "d3", &["d0", "d4"])]);
    assert!(out.random_fill.is_empty());

    // depth equal to the corpus: top non-relevant documents by score
    let out = mine_hard_negatives(&run, &qrels(&["d3", "d4"]), &all_ids(), 3, 6, &mut rng::stream(0, rng::NEGATIVES)).unwrap();
    assert_eq!(out.groups.len(), 2);
    for g in &out.groups {
        assert_eq!(g.neg_docids, vec!["d0", "d1", "d2"]);
    }
}

#[test]
fn short_candidate_lists_fall_back_to_random_negatives() {
    let run = ranked_run("q", &["d3", "d0"]);
    let out = mine_hard_negatives(&run, &qrels(&["d3"]), &all_ids(), 3, 3, &mut rng::stream(0, rng::NEGATIVES)).unwrap();
    assert_eq!(out.random_fill, vec!["q".to_string()]);
    let negs = &out.groups[0].neg_docids;
    assert_eq!(negs.len(), 3);
    assert_eq!(negs[0], "d0");
    assert!(!negs.contains(&"d3".to_string()));
    let mut distinct = negs.clone();
    distinct.sort();
    distinct.dedup();
    assert_eq!(distinct.len(), 3);
}

#[test]
fn mining_contract_errors() {
    let run = ranked_run("q", &["d0"]);
    let ids = all_ids();
    let mut r = rng::stream(0, rng::NEGATIVES);
    assert!(mine_hard_negatives(&run, &qrels(&["d0"]), &ids, 3, 2, &mut r).is_err());
    assert!(mine_hard_negatives(&run, &qrels(&["d0"]), &ids, 0, 2, &mut r).is_err());
    assert!(mine_hard_negatives(&run, &qrels(&["d0"]), &ids, 6, 6, &mut r).is_err());
}
