//! Finite-difference checks of every training objective, in f64.

use cpdae_core::losses::{
    combine, contrastive_loss_dist, contrastive_loss_repr, idf_reconstruction_loss, mlm_loss, reconstruction_loss,
    ClAnchors,
};
use cpdae_core::model::{self, Bound, ModelConfig, Normalization};
use cpdae_core::pretrain::{batch_loss, LossMode, PretrainBatch, TrainConfig};
use cpdae_core::rng;
use cpdae_core::text::{encode_text, Vocab, RESERVED_TOKENS};
use cpdae_tensor::{grad_check, Tape, Tensor, Var};
use rand::Rng as _;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "gradients-test");
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

fn dist_rows(rows: usize, v: usize, seed: u64) -> Tensor<f64> {
    let raw = random(&[rows, v], 0.05, 1.0, seed);
    let data = (0..rows)
        .flat_map(|r| {
            let row = raw.row(r);
            let s: f64 = row.iter().sum();
            row.iter().map(move |x| x / s).collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(vec![rows, v], data).unwrap()
}

fn targets(rows: usize, v: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![rows, v], |i| if (i * 7) % 5 < 2 { 1.0 } else { 0.0 })
}

fn check(name: &str, point: Vec<(String, Tensor<f64>)>, f: impl FnMut(&mut Tape<f64>, &[Var]) -> cpdae_core::Result<Var>) {
    let report = grad_check(f, &point, STEP).unwrap();
    assert!(report.passes(TOL), "{name}: {report:?}");
}

#[test]
fn reconstruction_gradient() {
    let y = targets(4, 64);
    check("rec", vec![("z".into(), random(&[4, 64], -3.0, 3.0, 1))], |t, v| {
        let p = t.sigmoid(v[0])?;
        reconstruction_loss(t, p, &y)
    });
}

#[test]
fn idf_reconstruction_gradient() {
    let y = targets(4, 64);
    let idf: Vec<f64> = (0..64).map(|i| 1.0 + (i % 9) as f64 * 0.3).collect();
    check("idf_rec", vec![("z".into(), random(&[4, 64], -3.0, 3.0, 2))], |t, v| {
        let p = t.sigmoid(v[0])?;
        idf_reconstruction_loss(t, p, &y, &idf)
    });
}

#[test]
fn contrastive_dist_gradient_both_anchor_modes() {
    for anchors in [ClAnchors::Symmetric, ClAnchors::FirstView] {
        check("cl_dist", vec![("p".into(), dist_rows(4, 64, 3))], |t, v| {
            contrastive_loss_dist(t, v[0], 1.0, anchors)
        });
    }
}

#[test]
fn contrastive_dist_gradient_through_normalization() {
    check("cl_dist_norm", vec![("z".into(), random(&[4, 64], -2.0, 2.0, 4))], |t, v| {
        let p = t.sigmoid(v[0])?;
        let d = model::normalize_dist(t, Normalization::Sum, v[0], p)?;
        contrastive_loss_dist(t, d, 0.5, ClAnchors::Symmetric)
    });
}

#[test]
fn contrastive_repr_gradient() {
    check("cl_repr", vec![("h".into(), random(&[4, 32], -1.0, 1.0, 5))], |t, v| {
        contrastive_loss_repr(t, v[0], 0.05, ClAnchors::Symmetric)
    });
}

#[test]
fn mlm_gradient() {
    let labels = [3usize, 17, 63];
    check("mlm", vec![("logits".into(), random(&[3, 64], -2.0, 2.0, 6))], |t, v| {
        Ok(mlm_loss(t, Some(v[0]), &labels)?.loss)
    });
}

#[test]
fn total_gradient_is_sum_of_parts() {
    let y = targets(4, 64);
    let labels = [1usize, 5, 9, 60];
    check(
        "total",
        vec![
            ("z".into(), random(&[4, 64], -2.0, 2.0, 7)),
            ("logits".into(), random(&[4, 64], -2.0, 2.0, 8)),
        ],
        |t, v| {
            let p = t.sigmoid(v[0])?;
            let rec = reconstruction_loss(t, p, &y)?;
            let d = t.normalize_rows(p, 1e-12)?;
            let cl = contrastive_loss_dist(t, d, 1.0, ClAnchors::Symmetric)?;
            let mlm = mlm_loss(t, Some(v[1]), &labels)?.loss;
            combine(t, rec, mlm, Some(cl), 0.1)
        },
    );
}

fn tiny_vocab(size: usize) -> Vocab {
    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..size - tokens.len()).map(|i| format!("w{i}")));
    Vocab::from_tokens(tokens).unwrap()
}

fn composite_check(mode: LossMode) {
    let vocab = tiny_vocab(64);
    let cfg = ModelConfig {
        hidden: 32,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        vocab_size: 64,
        max_len: 8,
        dropout: 0.0,
        normalize: Normalization::Sum,
    };
    let params = model::init_params(&cfg, &mut rng::stream(11, rng::INIT)).unwrap();
    // larger weights than the default init so every path carries signal
    let mut r = rng::stream(12, "perturb");
    let point: Vec<(String, Tensor<f64>)> = params
        .cast::<f64>()
        .iter()
        .map(|(n, t)| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.3..0.3));
            (n.to_string(), t)
        })
        .collect();
    let docs = [
        encode_text(&vocab, "a", "w1 w2 w3 w4 w9", 8).unwrap(),
        encode_text(&vocab, "b", "w5 w6 w2 w7", 8).unwrap(),
    ];
    let train = TrainConfig {
        batch_texts: 2,
        mask_rate: 0.3,
        loss_mode: mode,
        ..TrainConfig::default()
    };
    let refs: Vec<_> = docs.iter().collect();
    let batch = PretrainBatch::build(&refs, &train, 64, &mut rng::stream(13, rng::MASKING)).unwrap();
    assert_eq!(batch.rows.len(), 4);
    let idf: Vec<f64> = (0..64).map(|i| if i < 5 { 0.0 } else { 1.0 + (i % 4) as f64 }).collect();
    let names: Vec<String> = point.iter().map(|(n, _)| n.clone()).collect();
    let report = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v.iter().copied()).collect());
            Ok::<_, cpdae_core::Error>(batch_loss(t, &cfg, &bound, &batch, &train, Some(&idf), None)?.total)
        },
        &point,
        STEP,
    )
    .unwrap();
    let worst = report.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    assert!(report.passes(TOL), "{mode}: worst {worst:?}");
}

#[test]
fn full_objective_gradient_cpdae() {
    composite_check(LossMode::Cpdae);
}

#[test]
fn full_objective_gradient_other_modes() {
    composite_check(LossMode::CpdaeR);
    composite_check(LossMode::IdfRec);
}
