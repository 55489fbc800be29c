//! Bi-encoder fine-tuning with sampled negatives and static hard-negative
//! mining.
//!
//! Queries and documents share one encoder; similarity is the dot product of
//! `[CLS]` vectors. The decoder and MLM head are dropped before training.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use cpdae_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::eval::RetrievalRun;
use crate::model::{self, Bound, Model};
use crate::optim::{adam_step, clip_grad_norm, lr_at, AdamConfig, AdamState};
use crate::pretrain::collect_grads;
use crate::rng::{self, Rng};
use crate::text::{Qrels, TokenSeq};
use crate::{Error, Result};

/// One training example: a query, a relevant document and sampled
/// non-relevant documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingGroup {
    pub qid: String,
    pub pos_docid: String,
    pub neg_docids: Vec<String>,
}

pub fn write_groups(path: &Path, groups: &[TrainingGroup]) -> Result<()> {
    let mut out = Vec::new();
    for g in groups {
        serde_json::to_writer(&mut out, g).expect("group serializes");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_groups(path: &Path) -> Result<Vec<TrainingGroup>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse("groups file", format!("line {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtLoss {
    /// `-ln softmax(s⁺)` over the positive and all negatives.
    #[default]
    Softmax,
    /// Mean over negatives of `max(0, margin - s⁺ + s⁻)`.
    Hinge,
}

impl fmt::Display for FtLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FtLoss::Softmax => "softmax",
            FtLoss::Hinge => "hinge",
        })
    }
}

impl FromStr for FtLoss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "softmax" => Ok(FtLoss::Softmax),
            "hinge" => Ok(FtLoss::Hinge),
            other => Err(format!("unknown fine-tune loss `{other}` (expected softmax or hinge)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Negatives per group.
    pub negatives: usize,
    /// Groups per optimizer step.
    pub batch_groups: usize,
    pub epochs: usize,
    /// Overrides `epochs` when positive.
    pub steps: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub loss: FtLoss,
    pub margin: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            negatives: 7,
            batch_groups: 4,
            epochs: 1,
            steps: 0,
            lr: 1e-3,
            warmup_fraction: 0.1,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            loss: FtLoss::Softmax,
            margin: 1.0,
            seed: 42,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.negatives == 0 {
            return Err(Error::contract("finetune.negatives must be at least 1"));
        }
        if self.batch_groups == 0 {
            return Err(Error::contract("finetune.batch_groups must be positive"));
        }
        if self.steps == 0 && self.epochs == 0 {
            return Err(Error::contract("either finetune.steps or finetune.epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::contract("finetune.warmup_fraction must lie in [0,1)"));
        }
        if !(self.lr >= 0.0) || !(self.clip_norm >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::contract("finetune.lr, finetune.clip_norm and finetune.margin must be non-negative"));
        }
        Ok(())
    }
}

/// Encoded queries and documents addressed by id.
#[derive(Debug, Clone, Default)]
pub struct TextTable {
    pub queries: BTreeMap<String, TokenSeq>,
    pub docs: BTreeMap<String, TokenSeq>,
}

impl TextTable {
    pub fn new(queries: &[TokenSeq], docs: &[TokenSeq]) -> Self {
        TextTable {
            queries: queries.iter().map(|q| (q.doc_id.clone(), q.clone())).collect(),
            docs: docs.iter().map(|d| (d.doc_id.clone(), d.clone())).collect(),
        }
    }

    fn query(&self, id: &str) -> Result<&TokenSeq> {
        self.queries
            .get(id)
            .ok_or_else(|| Error::contract(format!("unknown query id `{id}`")))
    }

    fn doc(&self, id: &str) -> Result<&TokenSeq> {
        self.docs
            .get(id)
            .ok_or_else(|| Error::contract(format!("unknown document id `{id}`")))
    }
}

/// `[CLS]` embeddings of `texts`, dropout off. Queries and documents go
/// through the same tower.
pub fn embed_texts(model: &Model, texts: &[TokenSeq]) -> Result<Tensor<f32>> {
    model.embed(texts)
}

fn encode_rows(
    tape: &mut Tape<f32>,
    model: &Model,
    p: &Bound,
    seqs: &[&TokenSeq],
    dropout: &mut Rng,
) -> Result<Var> {
    let len = model::batch_len(seqs);
    let rows: Vec<&[u32]> = seqs.iter().map(|s| &s.ids[..len]).collect();
    Ok(model::encode(tape, &model.config, p, &rows, Some(dropout))?.cls)
}

/// Scores `[1 × (1+n)]` of one group: positive first.
fn group_loss(tape: &mut Tape<f32>, scores: Var, n: usize, cfg: &FinetuneConfig) -> Result<Var> {
    match cfg.loss {
        FtLoss::Softmax => Ok(tape.cross_entropy(scores, &[0])?),
        FtLoss::Hinge => {
            // diff_k = s_{k+1} - s_0
            let select = Tensor::from_fn(vec![n + 1, n], |i| {
                let (r, c) = (i / n, i % n);
                if r == 0 {
                    -1.0
                } else if r == c + 1 {
                    1.0
                } else {
                    0.0
                }
            });
            let select = tape.constant(select);
            let diff = tape.matmul(scores, select)?;
            let margin = tape.constant(Tensor::full([n], cfg.margin as f32));
            let shifted = tape.add_row(diff, margin)?;
            let hinge = tape.relu(shifted)?;
            Ok(tape.mean(hinge)?)
        }
    }
}

/// Mean loss over `groups` and the graph node to differentiate.
pub fn groups_loss(
    tape: &mut Tape<f32>,
    model: &Model,
    p: &Bound,
    groups: &[&TrainingGroup],
    texts: &TextTable,
    cfg: &FinetuneConfig,
    dropout: &mut Rng,
) -> Result<Var> {
    let mut queries = Vec::with_capacity(groups.len());
    let mut docs = Vec::new();
    for g in groups {
        if g.neg_docids.is_empty() {
            return Err(Error::contract(format!("group for query `{}` has no negatives", g.qid)));
        }
        queries.push(texts.query(&g.qid)?);
        docs.push(texts.doc(&g.pos_docid)?);
        for n in &g.neg_docids {
            docs.push(texts.doc(n)?);
        }
    }
    let q = encode_rows(tape, model, p, &queries, dropout)?;
    let d = encode_rows(tape, model, p, &docs, dropout)?;
    let mut total: Option<Var> = None;
    let mut offset = 0;
    for (i, g) in groups.iter().enumerate() {
        let n = g.neg_docids.len();
        let qi = tape.select_rows(q, &[i])?;
        let rows: Vec<usize> = (offset..offset + n + 1).collect();
        offset += n + 1;
        let di = tape.select_rows(d, &rows)?;
        let scores = tape.matmul_nt(qi, di)?;
        let l = group_loss(tape, scores, n, cfg)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::contract("no groups to train on"))?;
    Ok(tape.scale(total, 1.0 / groups.len() as f32)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtStepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<FtStepLog>,
}

/// Fine-tunes the encoder of `ckpt` on `groups`.
///
/// Groups are visited in a seeded shuffled order each epoch. Optimizer
/// state is carried over when `ckpt` is itself a fine-tuned checkpoint.
pub fn finetune(ckpt: &Checkpoint, groups: &[TrainingGroup], texts: &TextTable, cfg: &FinetuneConfig) -> Result<FinetuneOutput> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(Error::contract("fine-tuning needs at least one training group"));
    }
    if let Some(g) = groups.iter().find(|g| g.neg_docids.is_empty()) {
        return Err(Error::contract(format!("group for query `{}` has no negatives", g.qid)));
    }
    let mut model = ckpt.model.clone().into_encoder();
    let mut adam = match (&ckpt.optimizer, ckpt.kind) {
        (Some(opt), CheckpointKind::Finetuned) => opt.clone(),
        _ => AdamState::new(&model.params),
    };
    let total_steps = if cfg.steps > 0 {
        cfg.steps
    } else {
        cfg.epochs * groups.len().div_ceil(cfg.batch_groups)
    };
    let mut sampling = rng::stream(cfg.seed, rng::SAMPLING);
    let mut dropout = rng::stream(cfg.seed, rng::DROPOUT);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut cursor = groups.len();
    let mut log = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        if cursor >= groups.len() {
            order.shuffle(&mut sampling);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_groups).min(groups.len());
        let batch: Vec<&TrainingGroup> = order[cursor..end].iter().map(|&i| &groups[i]).collect();
        cursor = end;

        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let loss = groups_loss(&mut tape, &model, &p, &batch, texts, cfg, &mut dropout)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("fine-tune step {}: non-finite loss", step + 1)));
        }
        let mut grads = collect_grads(&tape, &p, loss)?;
        clip_grad_norm(&mut grads, cfg.clip_norm);
        let lr = lr_at(step, total_steps, cfg.lr, cfg.warmup_fraction)?;
        adam_step(&mut model.params, &grads, &mut adam, lr, &cfg.adam)
            .map_err(|e| Error::Numerical(format!("fine-tune step {}: {e}", step + 1)))?;
        log.push(FtStepLog {
            step: step + 1,
            lr,
            loss: value,
        });
    }
    let checkpoint = Checkpoint {
        kind: CheckpointKind::Finetuned,
        model,
        vocab: ckpt.vocab.clone(),
        optimizer: Some(adam),
        train_config: serde_json::json!({ "finetune": cfg, "base": ckpt.train_config }),
        step: ckpt.step + total_steps as u64,
        loss_history: ckpt.loss_history.clone(),
    };
    Ok(FinetuneOutput { checkpoint, log })
}

pub fn write_ft_log(path: &Path, log: &[FtStepLog]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,lr,loss").expect("write to Vec");
    for s in log {
        writeln!(out, "{},{},{}", s.step, s.lr, s.loss).expect("write to Vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Miner {
    #[default]
    Model,
    Bm25,
}

impl FromStr for Miner {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "model" => Ok(Miner::Model),
            "bm25" => Ok(Miner::Bm25),
            other => Err(format!("unknown miner `{other}` (expected model or bm25)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutput {
    pub groups: Vec<TrainingGroup>,
    /// Queries whose negatives were topped up at random.
    pub random_fill: Vec<String>,
}

/// Builds one group per (query, relevant document) from a retrieval run:
/// the top-`depth` documents minus every relevant one, truncated to
/// `negatives`. Short lists are completed with random non-relevant
/// documents.
pub fn mine_hard_negatives(
    run: &RetrievalRun,
    qrels: &Qrels,
    doc_ids: &[String],
    negatives: usize,
    depth: usize,
    rng: &mut Rng,
) -> Result<MiningOutput> {
    if negatives == 0 {
        return Err(Error::contract("negatives must be at least 1"));
    }
    if depth < negatives {
        return Err(Error::contract(format!("mining depth {depth} is below the {negatives} negatives requested")));
    }
    let mut out = MiningOutput {
        groups: Vec::new(),
        random_fill: Vec::new(),
    };
    for (qid, ranked) in &run.results {
        let Some(judged) = qrels.get(qid) else { continue };
        let relevant: BTreeSet<&str> = judged.iter().filter(|(_, &g)| g > 0).map(|(d, _)| d.as_str()).collect();
        if relevant.is_empty() {
            continue;
        }
        let mut negs: Vec<String> = ranked
            .iter()
            .take(depth)
            .filter(|r| !relevant.contains(r.docid.as_str()))
            .take(negatives)
            .map(|r| r.docid.clone())
            .collect();
        if negs.len() < negatives {
            let taken: BTreeSet<String> = negs.iter().cloned().collect();
            let mut pool: Vec<&String> = doc_ids
                .iter()
                .filter(|d| !relevant.contains(d.as_str()) && !taken.contains(*d))
                .collect();
            if pool.len() + negs.len() < negatives {
                return Err(Error::contract(format!(
                    "query `{qid}` has only {} non-relevant documents, {negatives} negatives requested",
                    pool.len() + negs.len()
                )));
            }
            pool.shuffle(rng);
            negs.extend(pool.into_iter().take(negatives - negs.len()).cloned());
            out.random_fill.push(qid.clone());
        }
        for pos in &relevant {
            out.groups.push(TrainingGroup {
                qid: qid.clone(),
                pos_docid: pos.to_string(),
                neg_docids: negs.clone(),
            });
        }
    }
    Ok(out)
}
