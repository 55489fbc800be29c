//! The desk-scale ablation: pre-train under several loss modes, fine-tune
//! each encoder with mined negatives, evaluate on held-out queries and
//! probe the decoders.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::eval::{
    bm25_search, brute_force_search, compute_metric, theory_probe, Bm25Index, Metric, RetrievalRun, TheoryProbeReport,
    DEFAULT_B, DEFAULT_K1,
};
use crate::finetune::{finetune, mine_hard_negatives, FinetuneConfig, TextTable, TrainingGroup};
use crate::model::{init_params, Bound, Model, ModelConfig, Normalization};
use crate::pretrain::{batch_loss, pretrain, LossMode, PretrainBatch, TrainConfig};
use crate::rng;
use crate::text::{
    build_vocab, encode_text, gen_synthetic_corpus, Document, Qrels, SyntheticCorpus, SyntheticSpec, TokenSeq, Vocab,
    RESERVED_TOKENS,
};
use cpdae_tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Model-mined rounds after the BM25 round.
    pub mining_rounds: usize,
    pub mining_depth: usize,
    pub eval_k: usize,
    /// Documents decoded by the probe (0 = all).
    pub probe_docs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mining_rounds: 1,
            mining_depth: 50,
            eval_k: 10,
            probe_docs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "corpus")]
    pub spec: SyntheticSpec,
    /// `vocab_size` is replaced by the size of the built vocabulary.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub pipeline: PipelineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            spec: SyntheticSpec::default(),
            model: ModelConfig {
                hidden: 32,
                layers: 2,
                heads: 2,
                dropout: 0.1,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_texts: 8,
                steps: 2000,
                lr: 5e-3,
                ..TrainConfig::default()
            },
            finetune: FinetuneConfig {
                lr: 3e-4,
                ..FinetuneConfig::default()
            },
            pipeline: PipelineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        let p = &self.pipeline;
        if p.eval_k == 0 {
            return Err(crate::Error::contract("pipeline.eval_k must be at least 1"));
        }
        if p.mining_depth < self.finetune.negatives {
            return Err(crate::Error::contract(format!(
                "pipeline.mining_depth {} is below finetune.negatives {}",
                p.mining_depth, self.finetune.negatives
            )));
        }
        Ok(())
    }
}

/// Corpus, vocabulary and encoded texts shared by every run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: SyntheticCorpus,
    pub vocab: Vocab,
    pub docs: Vec<TokenSeq>,
    pub train_queries: Vec<TokenSeq>,
    pub heldout_queries: Vec<TokenSeq>,
    pub texts: TextTable,
    pub model: ModelConfig,
}

fn encode_all(vocab: &Vocab, docs: &[Document], max_len: usize) -> Result<Vec<TokenSeq>> {
    docs.iter().map(|d| encode_text(vocab, &d.id, &d.text, max_len)).collect()
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let corpus = gen_synthetic_corpus(&cfg.spec)?;
    let vocab = build_vocab(corpus.docs.iter().map(|d| d.text.as_str()), cfg.spec.vocab_cap)?;
    let max_len = cfg.model.max_len;
    let docs = encode_all(&vocab, &corpus.docs, max_len)?;
    let train_queries = encode_all(&vocab, &corpus.train_queries(), max_len)?;
    let heldout_queries = encode_all(&vocab, &corpus.heldout_queries(), max_len)?;
    let all_queries: Vec<TokenSeq> = train_queries.iter().chain(&heldout_queries).cloned().collect();
    let texts = TextTable::new(&all_queries, &docs);
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    Ok(Prepared {
        corpus,
        vocab,
        docs,
        train_queries,
        heldout_queries,
        texts,
        model,
    })
}

impl Prepared {
    pub fn doc_ids(&self) -> Vec<String> {
        self.docs.iter().map(|d| d.doc_id.clone()).collect()
    }

    pub fn qrels(&self) -> &Qrels {
        &self.corpus.qrels
    }

    /// Dense retrieval of `queries` over the whole corpus.
    pub fn dense_run(&self, model: &Model, queries: &[TokenSeq], k: usize) -> Result<RetrievalRun> {
        let qv = model.embed(queries)?;
        let dv = model.embed(&self.docs)?;
        let qids: Vec<String> = queries.iter().map(|q| q.doc_id.clone()).collect();
        Ok(brute_force_search(&qids, &qv, &self.doc_ids(), &dv, k)?.run)
    }

    pub fn bm25_run(&self, queries: &[TokenSeq], k: usize) -> Result<RetrievalRun> {
        let index = Bm25Index::build(&self.docs, DEFAULT_K1, DEFAULT_B)?;
        Ok(bm25_search(&index, queries, k)?.run)
    }

    fn probe_set(&self, n: usize) -> &[TokenSeq] {
        if n == 0 {
            &self.docs
        } else {
            &self.docs[..n.min(self.docs.len())]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub mrr: f64,
    pub recall: f64,
    pub ndcg: f64,
}

pub fn score_run(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<RetrievalScores> {
    Ok(RetrievalScores {
        mrr: compute_metric(Metric::Mrr, k, run, qrels)?.mean,
        recall: compute_metric(Metric::Recall, k, run, qrels)?.mean,
        ndcg: compute_metric(Metric::Ndcg, k, run, qrels)?.mean,
    })
}

#[derive(Debug, Clone)]
pub struct RetrievalOutcome {
    pub checkpoint: Checkpoint,
    pub scores: RetrievalScores,
    /// Groups used in each round (BM25 first).
    pub rounds: Vec<Vec<TrainingGroup>>,
}

/// BM25-mined round, then `mining_rounds` model-mined rounds, each followed
/// by fine-tuning; scored on the held-out queries.
pub fn retrieval_pipeline(base: &Checkpoint, prep: &Prepared, cfg: &ExperimentConfig) -> Result<RetrievalOutcome> {
    let ft = &cfg.finetune;
    let doc_ids = prep.doc_ids();
    let mut neg_rng = rng::stream(ft.seed, rng::NEGATIVES);
    let run = prep.bm25_run(&prep.train_queries, cfg.pipeline.mining_depth)?;
    let mined = mine_hard_negatives(&run, prep.qrels(), &doc_ids, ft.negatives, cfg.pipeline.mining_depth, &mut neg_rng)?;
    let mut rounds = vec![mined.groups];
    let mut ckpt = finetune(base, &rounds[0], &prep.texts, ft)?.checkpoint;
    for round in 1..=cfg.pipeline.mining_rounds {
        let run = prep.dense_run(&ckpt.model, &prep.train_queries, cfg.pipeline.mining_depth)?;
        let mined = mine_hard_negatives(&run, prep.qrels(), &doc_ids, ft.negatives, cfg.pipeline.mining_depth, &mut neg_rng)?;
        let round_cfg = FinetuneConfig {
            seed: ft.seed.wrapping_add(round as u64),
            ..ft.clone()
        };
        ckpt = finetune(&ckpt, &mined.groups, &prep.texts, &round_cfg)?.checkpoint;
        rounds.push(mined.groups);
    }
    let run = prep.dense_run(&ckpt.model, &prep.heldout_queries, cfg.pipeline.eval_k)?;
    Ok(RetrievalOutcome {
        scores: score_run(&run, prep.qrels(), cfg.pipeline.eval_k)?,
        checkpoint: ckpt,
        rounds,
    })
}

/// A model that was never pre-trained, initialized from `seed`.
pub fn random_init(prep: &Prepared, seed: u64) -> Result<Checkpoint> {
    Checkpoint::init(prep.model.clone(), prep.vocab.clone(), &mut rng::stream(seed, rng::INIT))
}

pub fn pretrain_mode(prep: &Prepared, cfg: &ExperimentConfig, mode: LossMode, seed: u64) -> Result<Checkpoint> {
    let train = TrainConfig {
        loss_mode: mode,
        seed,
        ..cfg.train.clone()
    };
    Ok(pretrain(&prep.model, &prep.vocab, &prep.docs, &train, None, |_| {})?.checkpoint)
}

pub fn probe(prep: &Prepared, cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<TheoryProbeReport> {
    theory_probe(&ckpt.model, &prep.vocab, prep.probe_set(cfg.pipeline.probe_docs), &cfg.spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Loss mode, or `random_init` / `bm25`.
    pub system: String,
    pub seed: Option<u64>,
    pub scores: RetrievalScores,
    pub probe: Option<TheoryProbeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean MRR of `system` over seeds.
    pub fn mean_mrr(&self, system: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.system == system).map(|r| r.scores.mrr).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Plain-text comparison table.
    pub fn table(&self, k: usize) -> String {
        let mut out = format!(
            "{:<12} {:>5} {:>8} {:>9} {:>8} {:>12} {:>12}\n",
            "system",
            "seed",
            format!("MRR@{k}"),
            format!("R@{k}"),
            format!("NDCG@{k}"),
            "common_mass",
            "rep_prob"
        );
        for r in &self.rows {
            let seed = r.seed.map_or("-".to_string(), |s| s.to_string());
            let (cm, rp) = r
                .probe
                .as_ref()
                .map_or(("-".to_string(), "-".to_string()), |p| {
                    (format!("{:.4}", p.common_mass), format!("{:.6}", p.representative_prob))
                });
            out += &format!(
                "{:<12} {:>5} {:>8.4} {:>9.4} {:>8.4} {:>12} {:>12}\n",
                r.system, seed, r.scores.mrr, r.scores.recall, r.scores.ndcg, cm, rp
            );
        }
        out
    }
}

/// Runs every `(mode, seed)` pair plus the random-init and BM25 baselines.
/// `progress` receives each finished row.
pub fn reproduce_ablation(
    cfg: &ExperimentConfig,
    modes: &[LossMode],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let prep = prepare(cfg)?;
    let mut rows = Vec::new();
    let mut push = |row: AblationRow, rows: &mut Vec<AblationRow>| {
        progress(&row);
        rows.push(row);
    };
    let bm25 = prep.bm25_run(&prep.heldout_queries, cfg.pipeline.eval_k)?;
    push(
        AblationRow {
            system: "bm25".into(),
            seed: None,
            scores: score_run(&bm25, prep.qrels(), cfg.pipeline.eval_k)?,
            probe: None,
        },
        &mut rows,
    );
    for &seed in seeds {
        let ft_cfg = ExperimentConfig {
            finetune: FinetuneConfig {
                seed,
                ..cfg.finetune.clone()
            },
            ..cfg.clone()
        };
        for &mode in modes {
            let ckpt = pretrain_mode(&prep, cfg, mode, seed)?;
            let probe = probe(&prep, cfg, &ckpt)?;
            let outcome = retrieval_pipeline(&ckpt, &prep, &ft_cfg)?;
            push(
                AblationRow {
                    system: mode.to_string(),
                    seed: Some(seed),
                    scores: outcome.scores,
                    probe: Some(probe),
                },
                &mut rows,
            );
        }
        let outcome = retrieval_pipeline(&random_init(&prep, seed)?, &prep, &ft_cfg)?;
        push(
            AblationRow {
                system: "random_init".into(),
                seed: Some(seed),
                scores: outcome.scores,
                probe: None,
            },
            &mut rows,
        );
    }
    Ok(AblationReport { rows })
}

/// Finite-difference check of the full pre-training objective of `mode`
/// on a one-layer model (|V| = 64, H = 32) and a batch of four views, in
/// `f64`. Parameters are perturbed away from the init so every path
/// carries signal.
pub fn objective_grad_check(mode: LossMode, seed: u64) -> Result<GradCheckReport> {
    use rand::Rng as _;

    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..64 - tokens.len()).map(|i| format!("w{i}")));
    let vocab = Vocab::from_tokens(tokens)?;
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
    let params = init_params(&cfg, &mut rng::stream(seed, rng::INIT))?;
    let mut r = rng::stream(seed, "gradcheck");
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
        encode_text(&vocab, "a", "w1 w2 w3 w4 w9", 8)?,
        encode_text(&vocab, "b", "w5 w6 w2 w7", 8)?,
    ];
    let train = TrainConfig {
        batch_texts: 2,
        mask_rate: 0.3,
        loss_mode: mode,
        ..TrainConfig::default()
    };
    let refs: Vec<&TokenSeq> = docs.iter().collect();
    let batch = PretrainBatch::build(&refs, &train, 64, &mut rng::stream(seed, rng::MASKING))?;
    let idf: Vec<f64> = (0..64).map(|i| if i < 5 { 0.0 } else { 1.0 + (i % 4) as f64 }).collect();
    let names: Vec<String> = point.iter().map(|(n, _)| n.clone()).collect();
    grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v.iter().copied()).collect());
            Ok::<_, crate::Error>(batch_loss(t, &cfg, &bound, &batch, &train, Some(&idf), None)?.total)
        },
        &point,
        GRAD_CHECK_STEP,
    )
}

/// Central-difference step of [`objective_grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
