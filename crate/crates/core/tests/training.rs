//! Optimizer, schedule, checkpoint and pre-training loop behavior.

use cpdae_core::checkpoint::{read_manifest, Checkpoint, CheckpointKind, MANIFEST_FILE, PARAMS_FILE};
use cpdae_core::experiment::{prepare, ExperimentConfig};
use cpdae_core::model::{ModelConfig, ParamSet};
use cpdae_core::optim::{adam_step, clip_grad_norm, lr_at, AdamConfig, AdamState};
use cpdae_core::pretrain::{pretrain, write_metrics_csv, LossMode, StepLog, TrainConfig, METRICS_HEADER};
use cpdae_core::text::{build_vocab, encode_text, gen_synthetic_corpus, SyntheticSpec, TokenSeq, Vocab};
use cpdae_core::{rng, Error};
use cpdae_tensor::Tensor;

fn tiny_setup() -> (ModelConfig, Vocab, Vec<TokenSeq>) {
    let spec = SyntheticSpec {
        num_docs: 40,
        doc_len: 24,
        common_pool_size: 10,
        topic_count: 5,
        topic_pool_size: 12,
        common_fraction: 0.5,
        heldout_queries: 5,
        ..SyntheticSpec::default()
    };
    let corpus = gen_synthetic_corpus(&spec).unwrap();
    let vocab = build_vocab(corpus.docs.iter().map(|d| d.text.as_str()), spec.vocab_cap).unwrap();
    let docs = corpus
        .docs
        .iter()
        .map(|d| encode_text(&vocab, &d.id, &d.text, 32).unwrap())
        .collect();
    let cfg = ModelConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        vocab_size: vocab.len(),
        max_len: 32,
        ..ModelConfig::default()
    };
    (cfg, vocab, docs)
}

fn tiny_train(mode: LossMode) -> TrainConfig {
    TrainConfig {
        batch_texts: 4,
        steps: 12,
        lr: 5e-3,
        loss_mode: mode,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn run(cfg: &TrainConfig, idf: Option<&[f32]>) -> Vec<StepLog> {
    let (model_cfg, vocab, docs) = tiny_setup();
    pretrain(&model_cfg, &vocab, &docs, cfg, idf, |_| {}).unwrap().log
}

#[test]
fn schedule_shape() {
    let (total, peak) = (100, 1e-3);
    assert_eq!(lr_at(0, total, peak, 0.1).unwrap(), 0.0);
    assert!((lr_at(10, total, peak, 0.1).unwrap() - peak).abs() < 1e-15);
    assert_eq!(lr_at(total, total, peak, 0.1).unwrap(), 0.0);
    let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, peak, 0.1).unwrap()).collect();
    assert!(lrs[..=10].windows(2).all(|w| w[1] >= w[0]));
    assert!(lrs[10..].windows(2).all(|w| w[1] <= w[0]));
    assert!(matches!(lr_at(0, 0, peak, 0.1), Err(Error::Contract(_))));
}

fn scalar_param(v: f32) -> ParamSet<f32> {
    let mut p = ParamSet::default();
    p.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
    p
}

#[test]
fn adam_first_step_and_zero_lr() {
    let mut p = scalar_param(0.5);
    let g = scalar_param(1.0);
    let mut state = AdamState::new(&p);
    adam_step(&mut p, &g, &mut state, 0.01, &AdamConfig::default()).unwrap();
    // m̂ = 1, v̂ = 1, so the update is lr / (1 + eps)
    let moved = p.get("w").unwrap().data()[0] as f64 - 0.5;
    assert!((moved + 0.01).abs() < 1e-6, "{moved}");

    let mut state = AdamState::new(&p);
    let before = p.clone();
    adam_step(&mut p, &g, &mut state, 0.0, &AdamConfig::default()).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_rejects_non_finite_gradient_by_name() {
    let mut p = scalar_param(0.5);
    let g = scalar_param(f32::NAN);
    let mut state = AdamState::new(&p);
    let err = adam_step(&mut p, &g, &mut state, 0.01, &AdamConfig::default()).unwrap_err();
    assert!(err.is_numerical());
    assert!(err.to_string().contains("`w`"));
    assert_eq!(p.get("w").unwrap().data()[0], 0.5);
}

#[test]
fn clipping_bounds_global_norm() {
    let mut g = ParamSet::default();
    g.insert("a", Tensor::new(vec![2], vec![3.0f32, 0.0]).unwrap());
    g.insert("b", Tensor::new(vec![1], vec![4.0f32]).unwrap());
    let pre = clip_grad_norm(&mut g, 1.0);
    assert!((pre - 5.0).abs() < 1e-12);
    assert!((g.get("a").unwrap().data()[0] - 0.6).abs() < 1e-6);
    assert!((g.get("b").unwrap().data()[0] - 0.8).abs() < 1e-6);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let (cfg, vocab, docs) = tiny_setup();
    let out = pretrain(&cfg, &vocab, &docs, &tiny_train(LossMode::Cpdae), None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.checkpoint.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.kind, CheckpointKind::Pretrained);
    assert_eq!(back.model.params, out.checkpoint.model.params);
    assert_eq!(back.optimizer.as_ref().unwrap().t, 12);
    assert_eq!(back.loss_history, out.checkpoint.loss_history);
    let a = out.checkpoint.model.embed(&docs[..6]).unwrap();
    let b = back.model.embed(&docs[..6]).unwrap();
    assert_eq!(a.data(), b.data());

    let manifest = read_manifest(dir.path()).unwrap();
    let names: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    for name in out.checkpoint.model.params.names() {
        assert!(names.contains(&name), "{name} missing from manifest");
    }
}

#[test]
fn truncated_blob_fails_to_load() {
    let (cfg, vocab, _) = tiny_setup();
    let ckpt = Checkpoint::init(cfg, vocab, &mut rng::stream(1, rng::INIT)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let path = dir.path().join(PARAMS_FILE);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn foreign_version_is_rejected() {
    let (cfg, vocab, _) = tiny_setup();
    let ckpt = Checkpoint::init(cfg, vocab, &mut rng::stream(1, rng::INIT)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).unwrap().replace("cpdae-checkpoint/1", "someone-else/7");
    std::fs::write(&path, text).unwrap();
    match Checkpoint::load(dir.path()) {
        Err(Error::Version { found, .. }) => assert_eq!(found, "someone-else/7"),
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn pretraining_is_deterministic() {
    let cfg = tiny_train(LossMode::Cpdae);
    let (model_cfg, vocab, docs) = tiny_setup();
    let a = pretrain(&model_cfg, &vocab, &docs, &cfg, None, |_| {}).unwrap();
    let b = pretrain(&model_cfg, &vocab, &docs, &cfg, None, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.model.params, b.checkpoint.model.params);

    let other = TrainConfig { seed: 10, ..cfg };
    let c = pretrain(&model_cfg, &vocab, &docs, &other, None, |_| {}).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn logged_total_decomposes() {
    for mode in LossMode::ALL {
        for s in run(&tiny_train(mode), None) {
            let l = s.loss;
            assert!((l.total - (l.rec + l.mlm + l.lambda * l.cl)).abs() < 1e-6);
            assert!(l.is_finite());
        }
    }
}

#[test]
fn no_cl_logs_zero_contrastive_term() {
    for mode in [LossMode::NoCl, LossMode::IdfRec] {
        assert!(run(&tiny_train(mode), None).iter().all(|s| s.loss.cl == 0.0));
    }
    assert!(run(&tiny_train(LossMode::Cpdae), None).iter().all(|s| s.loss.cl > 0.0));
}

#[test]
fn zero_lambda_matches_no_cl() {
    let zero = TrainConfig {
        lambda: 0.0,
        ..tiny_train(LossMode::Cpdae)
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("zero.csv"), dir.path().join("no_cl.csv"));
    write_metrics_csv(&a, &run(&zero, None)).unwrap();
    write_metrics_csv(&b, &run(&tiny_train(LossMode::NoCl), None)).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn uniform_idf_matches_plain_reconstruction() {
    let (model_cfg, _, _) = tiny_setup();
    let uniform = vec![1.7f32; model_cfg.vocab_size];
    let idf = run(&tiny_train(LossMode::IdfRec), Some(&uniform));
    let plain = run(&tiny_train(LossMode::NoCl), None);
    for (a, b) in idf.iter().zip(&plain) {
        assert!((a.loss.rec - b.loss.rec).abs() < 1e-6);
    }
}

#[test]
fn tiny_batches_are_rejected_for_contrastive_modes() {
    let cfg = TrainConfig {
        batch_texts: 1,
        ..tiny_train(LossMode::Cpdae)
    };
    assert!(cfg.validate().is_err());
    let cfg = TrainConfig {
        batch_texts: 1,
        ..tiny_train(LossMode::NoCl)
    };
    assert!(cfg.validate().is_ok());
}

#[test]
fn metrics_csv_layout() {
    let log = run(&tiny_train(LossMode::Cpdae), None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_metrics_csv(&path, &log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), log.len());
}

#[test]
fn desk_config_loss_falls_within_fifty_steps() {
    let exp = ExperimentConfig::default();
    let prep = prepare(&exp).unwrap();
    let cfg = TrainConfig {
        steps: 50,
        ..exp.train.clone()
    };
    let log = pretrain(&prep.model, &prep.vocab, &prep.docs, &cfg, None, |_| {}).unwrap().log;
    let head: f64 = log[..5].iter().map(|s| s.loss.total).sum::<f64>() / 5.0;
    let tail: f64 = log[45..].iter().map(|s| s.loss.total).sum::<f64>() / 5.0;
    assert!(tail < head, "trailing mean {tail} not below leading mean {head}");
}
