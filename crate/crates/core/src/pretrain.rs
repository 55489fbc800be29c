//! The pre-training loop: dual-view batches, reconstruction + contrastive +
//! MLM objectives, Adam with warmup, and a per-step loss log.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use cpdae_tensor::{Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::losses::{
    self, combine, contrastive_loss_dist, contrastive_loss_repr, idf_reconstruction_loss, mlm_loss,
    reconstruction_loss, ClAnchors, LossBreakdown,
};
use crate::model::{self, Bound, ModelConfig, ParamSet};
use crate::optim::{adam_step, clip_grad_norm, lr_at, AdamConfig, AdamState};
use crate::rng::{self, Rng};
use crate::text::{compute_idf, is_reserved, mask_twice, TokenSeq, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Reconstruction + JS contrastive over word distributions + MLM.
    #[default]
    Cpdae,
    /// Contrastive term on `[CLS]` vectors instead of word distributions.
    CpdaeR,
    /// Reconstruction + MLM only.
    NoCl,
    /// IDF-weighted reconstruction + MLM.
    IdfRec,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::Cpdae, LossMode::CpdaeR, LossMode::NoCl, LossMode::IdfRec];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Cpdae => "cpdae",
            LossMode::CpdaeR => "cpdae_r",
            LossMode::NoCl => "no_cl",
            LossMode::IdfRec => "idf_rec",
        }
    }

    pub fn has_contrastive(self) -> bool {
        matches!(self, LossMode::Cpdae | LossMode::CpdaeR)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown loss mode `{s}` (expected cpdae, cpdae_r, no_cl or idf_rec)"))
    }
}

/// Which masked views contribute masked-token predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlmViews {
    One,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Texts per batch (`m`); each contributes two views.
    pub batch_texts: usize,
    pub epochs: usize,
    /// Overrides `epochs` when positive.
    pub steps: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub lambda: f64,
    pub mask_rate: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub cl_anchors: ClAnchors,
    pub tau_dist: f64,
    pub tau_repr: f64,
    pub mlm_views: MlmViews,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_texts: 16,
            epochs: 1,
            steps: 0,
            lr: 1e-3,
            warmup_fraction: 0.1,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            lambda: losses::DEFAULT_LAMBDA,
            mask_rate: 0.15,
            seed: 42,
            loss_mode: LossMode::Cpdae,
            cl_anchors: ClAnchors::Symmetric,
            tau_dist: losses::DEFAULT_TAU_DIST,
            tau_repr: losses::DEFAULT_TAU_REPR,
            mlm_views: MlmViews::Both,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters of the original large-scale recipe (64 texts per
    /// batch, 3 epochs, peak lr 5e-5).
    pub fn large_scale_preset() -> Self {
        TrainConfig {
            batch_texts: 64,
            epochs: 3,
            lr: 5e-5,
            ..TrainConfig::default()
        }
    }

    /// True when the contrastive term is actually evaluated.
    pub fn uses_contrastive(&self) -> bool {
        self.loss_mode.has_contrastive() && self.lambda != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_texts == 0 {
            return Err(Error::contract("train.batch_texts must be positive"));
        }
        if self.uses_contrastive() && self.batch_texts < 2 {
            return Err(Error::contract(
                "contrastive loss needs in-batch negatives: train.batch_texts must be at least 2",
            ));
        }
        if self.steps == 0 && self.epochs == 0 {
            return Err(Error::contract("either train.steps or train.epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::contract("train.warmup_fraction must lie in [0,1)"));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::contract("train.mask_rate must lie in (0,1)"));
        }
        if !(self.lr >= 0.0) || !(self.lambda >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::contract("train.lr, train.lambda and train.clip_norm must be non-negative"));
        }
        if !(self.tau_dist > 0.0 && self.tau_repr > 0.0) {
            return Err(Error::contract("temperatures must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self, num_docs: usize) -> Result<usize> {
        if self.steps > 0 {
            return Ok(self.steps);
        }
        let per_epoch = num_docs / self.batch_texts;
        if per_epoch == 0 {
            return Err(Error::contract(format!(
                "corpus of {num_docs} documents is smaller than one batch of {}",
                self.batch_texts
            )));
        }
        Ok(per_epoch * self.epochs)
    }
}

/// One step's worth of masked inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch {
    /// `2m` rows, views `2i` and `2i+1` from text `i`, trimmed to a common length.
    pub rows: Vec<Vec<u32>>,
    /// Content ids of each original text (reconstruction targets).
    pub targets: Vec<Vec<u32>>,
    /// `(view, position)` of every masked token used for MLM.
    pub mlm_positions: Vec<(usize, usize)>,
    pub mlm_labels: Vec<usize>,
}

impl PretrainBatch {
    /// Masks each text twice.
    pub fn build(docs: &[&TokenSeq], cfg: &TrainConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        let len = docs.iter().map(|d| d.true_len).max().unwrap_or(0);
        let mut batch = PretrainBatch {
            rows: Vec::with_capacity(2 * docs.len()),
            targets: Vec::with_capacity(docs.len()),
            mlm_positions: Vec::new(),
            mlm_labels: Vec::new(),
        };
        for doc in docs {
            let (a, b) = mask_twice(doc, cfg.mask_rate, vocab_size, rng)?;
            for (k, view) in [a, b].into_iter().enumerate() {
                let row = batch.rows.len();
                if k == 0 || cfg.mlm_views == MlmViews::Both {
                    for (&p, &l) in view.mask_positions.iter().zip(&view.mlm_labels) {
                        batch.mlm_positions.push((row, p));
                        batch.mlm_labels.push(l as usize);
                    }
                }
                batch.rows.push(view.ids[..len].to_vec());
            }
            batch.targets.push(doc.content().to_vec());
        }
        Ok(batch)
    }

    /// `y[2m × |V|]`: 1 where the word occurs in the unmasked text.
    pub fn target_tensor<T: Real>(&self, vocab_size: usize) -> Result<Tensor<T>> {
        let mut y = vec![T::zero(); self.rows.len() * vocab_size];
        for (i, ids) in self.targets.iter().enumerate() {
            for &id in ids {
                if id as usize >= vocab_size {
                    return Err(Error::contract(format!("target id {id} outside vocabulary of {vocab_size}")));
                }
                if !is_reserved(id) {
                    y[2 * i * vocab_size + id as usize] = T::one();
                    y[(2 * i + 1) * vocab_size + id as usize] = T::one();
                }
            }
        }
        Ok(Tensor::new(vec![self.rows.len(), vocab_size], y)?)
    }
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    pub cl: Option<Var>,
    pub mlm: Var,
    pub mlm_empty: bool,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>, lambda: f64) -> LossBreakdown {
        let get = |v: Var| tape.value(v).item().as_f64();
        LossBreakdown {
            rec: get(self.rec),
            cl: self.cl.map(get).unwrap_or(0.0),
            mlm: get(self.mlm),
            total: get(self.total),
            lambda,
        }
    }
}

/// The full pre-training objective for one batch.
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    model_cfg: &ModelConfig,
    p: &Bound,
    batch: &PretrainBatch,
    cfg: &TrainConfig,
    idf: Option<&[T]>,
    dropout: Option<&mut Rng>,
) -> Result<LossVars> {
    let rows: Vec<&[u32]> = batch.rows.iter().map(|r| r.as_slice()).collect();
    let enc = model::encode(tape, model_cfg, p, &rows, dropout)?;
    let z = model::decode(tape, p, enc.cls)?;
    let z_hat = model::vocab_probs(tape, z)?;
    let y = batch.target_tensor::<T>(model_cfg.vocab_size)?;
    let rec = match cfg.loss_mode {
        LossMode::IdfRec => {
            let idf = idf.ok_or_else(|| Error::contract("idf_rec mode needs an idf table"))?;
            idf_reconstruction_loss(tape, z_hat, &y, idf)?
        }
        _ => reconstruction_loss(tape, z_hat, &y)?,
    };
    let cl = if cfg.uses_contrastive() {
        Some(match cfg.loss_mode {
            LossMode::CpdaeR => contrastive_loss_repr(tape, enc.cls, cfg.tau_repr, cfg.cl_anchors)?,
            _ => {
                let z_tilde = model::normalize_dist(tape, model_cfg.normalize, z, z_hat)?;
                contrastive_loss_dist(tape, z_tilde, cfg.tau_dist, cfg.cl_anchors)?
            }
        })
    } else {
        None
    };
    let logits = if batch.mlm_positions.is_empty() {
        None
    } else {
        Some(model::mlm_logits(tape, p, &enc, &batch.mlm_positions)?)
    };
    let mlm = mlm_loss(tape, logits, &batch.mlm_labels)?;
    let total = combine(tape, rec, mlm.loss, cl, cfg.lambda)?;
    Ok(LossVars {
        total,
        rec,
        cl,
        mlm: mlm.loss,
        mlm_empty: mlm.empty,
    })
}

/// Gradients of every bound parameter, keyed by name.
pub fn collect_grads(tape: &Tape<f32>, p: &Bound, loss: Var) -> Result<ParamSet<f32>> {
    let mut grads = tape.backward(loss)?;
    let mut out = ParamSet::default();
    for (name, var) in p.iter() {
        let g = grads
            .take(var)
            .ok_or_else(|| Error::contract(format!("no gradient recorded for `{name}`")))?;
        out.insert(name, g);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    /// 1-based update index.
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub mlm_empty: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

/// Pre-trains a freshly initialized model on `docs`.
///
/// Initialization, batch sampling, masking and dropout each draw from their
/// own stream of `cfg.seed`, so the result is a function of the inputs.
/// `idf` overrides the corpus IDF table in `idf_rec` mode.
pub fn pretrain(
    model_cfg: &ModelConfig,
    vocab: &Vocab,
    docs: &[TokenSeq],
    cfg: &TrainConfig,
    idf: Option<&[f32]>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<PretrainOutput> {
    cfg.validate()?;
    model_cfg.validate()?;
    if docs.is_empty() {
        return Err(Error::Ingest("pre-training corpus is empty".into()));
    }
    if docs.len() < cfg.batch_texts {
        return Err(Error::contract(format!(
            "corpus of {} documents is smaller than one batch of {}",
            docs.len(),
            cfg.batch_texts
        )));
    }
    let total_steps = cfg.total_steps(docs.len())?;
    let idf_table: Option<Vec<f32>> = match (cfg.loss_mode, idf) {
        (LossMode::IdfRec, Some(t)) => Some(t.to_vec()),
        (LossMode::IdfRec, None) => Some(compute_idf(docs, model_cfg.vocab_size)),
        _ => None,
    };

    let mut init_rng = rng::stream(cfg.seed, rng::INIT);
    let mut ckpt = Checkpoint::init(model_cfg.clone(), vocab.clone(), &mut init_rng)?;
    let mut sampling = rng::stream(cfg.seed, rng::SAMPLING);
    let mut masking = rng::stream(cfg.seed, rng::MASKING);
    let mut dropout = rng::stream(cfg.seed, rng::DROPOUT);
    let mut adam = AdamState::new(&ckpt.model.params);

    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut cursor = docs.len();
    let mut log = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        if cursor + cfg.batch_texts > docs.len() {
            order.shuffle(&mut sampling);
            cursor = 0;
        }
        let picked: Vec<&TokenSeq> = order[cursor..cursor + cfg.batch_texts].iter().map(|&i| &docs[i]).collect();
        cursor += cfg.batch_texts;
        let batch = PretrainBatch::build(&picked, cfg, model_cfg.vocab_size, &mut masking)?;

        let mut tape = Tape::new();
        let p = ckpt.model.params.bind(&mut tape, true);
        let vars = batch_loss(&mut tape, model_cfg, &p, &batch, cfg, idf_table.as_deref(), Some(&mut dropout))?;
        let loss = vars.breakdown(&tape, cfg.lambda);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "step {}: non-finite loss (rec={}, cl={}, mlm={}, total={})",
                step + 1,
                loss.rec,
                loss.cl,
                loss.mlm,
                loss.total
            )));
        }
        let mut grads = collect_grads(&tape, &p, vars.total)?;
        let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        let lr = lr_at(step, total_steps, cfg.lr, cfg.warmup_fraction)?;
        adam_step(&mut ckpt.model.params, &grads, &mut adam, lr, &cfg.adam)
            .map_err(|e| Error::Numerical(format!("step {}: {e}", step + 1)))?;
        let entry = StepLog {
            step: step + 1,
            lr,
            loss,
            grad_norm,
            mlm_empty: vars.mlm_empty,
        };
        on_step(&entry);
        log.push(entry);
    }

    ckpt.kind = CheckpointKind::Pretrained;
    ckpt.optimizer = Some(adam);
    ckpt.train_config = serde_json::to_value(cfg).expect("config serializes");
    ckpt.step = total_steps as u64;
    ckpt.loss_history = log.iter().map(|s| s.loss).collect();
    Ok(PretrainOutput { checkpoint: ckpt, log })
}

pub const METRICS_HEADER: &str = "step,lr,rec,cl,mlm,total";

/// Writes the per-step log as CSV with header `step,lr,rec,cl,mlm,total`.
pub fn write_metrics_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{METRICS_HEADER}").expect("write to Vec");
    for s in log {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.step, s.lr, s.loss.rec, s.loss.cl, s.loss.mlm, s.loss.total
        )
        .expect("write to Vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
