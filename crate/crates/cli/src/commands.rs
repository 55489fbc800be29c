use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use cpdae_core::checkpoint::{read_manifest, Checkpoint};
use cpdae_core::eval::{
    bm25_search, brute_force_search, compute_metric, read_run, render_word_distribution, suppression_probe,
    theory_probe, write_run, Bm25Index, Metric, DEFAULT_B, DEFAULT_K1,
};
use cpdae_core::experiment::{objective_grad_check, reproduce_ablation, ExperimentConfig};
use cpdae_core::finetune::{
    finetune, mine_hard_negatives, read_groups, write_ft_log, write_groups, Miner, TextTable,
};
use cpdae_core::model::ModelConfig;
use cpdae_core::pretrain::{pretrain, write_metrics_csv, LossMode};
use cpdae_core::rng;
use cpdae_core::text::io::read_qrels;
use cpdae_core::text::{gen_synthetic_corpus, TokenSeq, Vocab};

use crate::config::{keys_help, resolve_from, Resolved};
use crate::corpus::{encode_all, CorpusDir, QuerySet};
use crate::manifest::{beside, in_dir, RunManifest};
use crate::UsageError;

const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "cpdae", version, about = "Contrastive autoencoder pre-training for dense retrieval", after_long_help = keys_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines, or a run manifest to replay.
    #[arg(long, visible_alias = "spec", value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    pub set: Vec<(String, String)>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the seeded synthetic benchmark.
    #[command(after_long_help = keys_help())]
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for corpus.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build the word vocabulary of a corpus.
    #[command(after_long_help = keys_help())]
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for corpus.vocab_cap.
        #[arg(long)]
        cap: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pre-train an encoder and decoder; writes a checkpoint directory.
    #[command(after_long_help = keys_help())]
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Vocabulary file; built from the corpus when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for train.loss_mode.
        #[arg(long)]
        loss_mode: Option<String>,
        /// Shorthand for train.lambda.
        #[arg(long)]
        lambda: Option<String>,
        /// Shorthand for train.steps.
        #[arg(long)]
        steps: Option<String>,
        /// Shorthand for train.lr.
        #[arg(long)]
        lr: Option<String>,
        /// Shorthand for train.seed.
        #[arg(long)]
        seed: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fine-tune a checkpoint's encoder on training groups.
    #[command(after_long_help = keys_help())]
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        groups: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for finetune.steps.
        #[arg(long)]
        steps: Option<String>,
        /// Shorthand for finetune.lr.
        #[arg(long)]
        lr: Option<String>,
        /// Shorthand for finetune.loss.
        #[arg(long)]
        loss: Option<String>,
        /// Shorthand for finetune.seed.
        #[arg(long)]
        seed: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Mine hard negatives into a training-groups file.
    #[command(after_long_help = keys_help())]
    Mine {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model used for mining (required unless --miner bm25).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// model or bm25.
        #[arg(long, default_value = "model")]
        miner: String,
        #[arg(long, value_enum, default_value = "train")]
        queries: QuerySet,
        /// Shorthand for pipeline.mining_depth.
        #[arg(long)]
        depth: Option<String>,
        /// Shorthand for finetune.negatives.
        #[arg(long)]
        negatives: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Retrieve the top-k documents per query into a TREC run file.
    #[command(after_long_help = keys_help())]
    Search {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "bm25")]
        checkpoint: Option<PathBuf>,
        /// Rank with BM25 instead of a model.
        #[arg(long)]
        bm25: bool,
        #[arg(long, value_enum, default_value = "heldout")]
        queries: QuerySet,
        /// Shorthand for pipeline.eval_k.
        #[arg(long)]
        k: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a run file against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// mrr, recall or ndcg.
        #[arg(long, default_value = "mrr")]
        metric: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Also print one line per query.
        #[arg(long)]
        per_query: bool,
    },
    /// Decode documents and report common- versus topic-word mass, or
    /// render one text's word distribution.
    #[command(after_long_help = keys_help())]
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint to compare against.
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long, required_unless_present = "text")]
        corpus: Option<PathBuf>,
        /// Render this text instead of probing the corpus.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, requires = "text")]
        html: Option<PathBuf>,
        #[arg(long, requires = "text")]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Summarize a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of the full objective for every loss mode.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Pre-train every loss mode, fine-tune, evaluate and probe; prints a
    /// comparison table.
    #[command(after_long_help = keys_help())]
    ReproduceAblation {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "cpdae,no_cl,idf_rec,cpdae_r")]
        modes: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn resolve(cfg: &ConfigArgs, shorthands: &[(&str, Option<&String>)]) -> anyhow::Result<Resolved> {
    let mut flags = cfg.set.clone();
    for (key, v) in shorthands {
        if let Some(v) = v {
            flags.push((key.to_string(), v.to_string()));
        }
    }
    Ok(resolve_from(cfg.config.as_ref(), &flags)?)
}

fn load_checkpoint(dir: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn model_config(exp: &ExperimentConfig, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..exp.model.clone()
    }
}

fn text_table(corpus: &CorpusDir, vocab: &Vocab, max_len: usize) -> anyhow::Result<(Vec<TokenSeq>, TextTable)> {
    let docs = encode_all(vocab, &corpus.docs, max_len)?;
    let queries = encode_all(vocab, &corpus.queries(QuerySet::All), max_len)?;
    let table = TextTable::new(&queries, &docs);
    Ok((docs, table))
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenCorpus { out, seed, cfg } => {
            let seed = seed.map(|s| s.to_string());
            let r = resolve(&cfg, &[("corpus.seed", seed.as_ref())])?;
            let spec = &r.config.spec;
            RunManifest::new("gen-corpus", &r, spec.seed).artifact("corpus", &out).write(&in_dir(&out))?;
            let corpus = gen_synthetic_corpus(spec)?;
            corpus.write(&out)?;
            eprintln!("wrote {} documents and {} queries to {}", corpus.docs.len(), corpus.queries.len(), out.display());
        }
        Command::BuildVocab { corpus, out, cap, cfg } => {
            let cap = cap.map(|c| c.to_string());
            let r = resolve(&cfg, &[("corpus.vocab_cap", cap.as_ref())])?;
            RunManifest::new("build-vocab", &r, 0)
                .arg("corpus", corpus.display())
                .artifact("vocab", &out)
                .write(&beside(&out))?;
            let vocab = CorpusDir::load(&corpus)?.build_vocab(r.config.spec.vocab_cap)?;
            vocab.save(&out)?;
            eprintln!("vocabulary of {} entries written to {}", vocab.len(), out.display());
        }
        Command::Pretrain {
            corpus,
            vocab,
            out,
            loss_mode,
            lambda,
            steps,
            lr,
            seed,
            cfg,
        } => {
            let r = resolve(
                &cfg,
                &[
                    ("train.loss_mode", loss_mode.as_ref()),
                    ("train.lambda", lambda.as_ref()),
                    ("train.steps", steps.as_ref()),
                    ("train.lr", lr.as_ref()),
                    ("train.seed", seed.as_ref()),
                ],
            )?;
            let exp = &r.config;
            let mut manifest = RunManifest::new("pretrain", &r, exp.train.seed)
                .arg("corpus", corpus.display())
                .artifact("checkpoint", &out)
                .artifact("metrics", &out.join("metrics.csv"));
            if let Some(v) = &vocab {
                manifest = manifest.arg("vocab", v.display());
            }
            manifest.write(&in_dir(&out))?;
            let data = CorpusDir::load(&corpus)?;
            let vocab = match &vocab {
                Some(p) => Vocab::load(p)?,
                None => data.build_vocab(exp.spec.vocab_cap)?,
            };
            let model = model_config(exp, &vocab);
            let docs = encode_all(&vocab, &data.docs, model.max_len)?;
            let every = (exp.train.total_steps(docs.len())? / 20).max(1);
            let output = pretrain(&model, &vocab, &docs, &exp.train, None, |s| {
                if s.step % every == 0 || s.step == 1 {
                    eprintln!(
                        "step {:>6}  lr {:.2e}  rec {:.5}  cl {:.5}  mlm {:.4}  total {:.5}",
                        s.step, s.lr, s.loss.rec, s.loss.cl, s.loss.mlm, s.loss.total
                    );
                }
            })?;
            if output.log.iter().any(|s| s.mlm_empty) {
                eprintln!("warning: some batches had no masked positions; their MLM loss is 0");
            }
            output.checkpoint.save(&out)?;
            write_metrics_csv(&out.join("metrics.csv"), &output.log)?;
            eprintln!("checkpoint written to {}", out.display());
        }
        Command::Finetune {
            checkpoint,
            corpus,
            groups,
            out,
            steps,
            lr,
            loss,
            seed,
            cfg,
        } => {
            let r = resolve(
                &cfg,
                &[
                    ("finetune.steps", steps.as_ref()),
                    ("finetune.lr", lr.as_ref()),
                    ("finetune.loss", loss.as_ref()),
                    ("finetune.seed", seed.as_ref()),
                ],
            )?;
            let ft = &r.config.finetune;
            RunManifest::new("finetune", &r, ft.seed)
                .arg("checkpoint", checkpoint.display())
                .arg("corpus", corpus.display())
                .arg("groups", groups.display())
                .artifact("checkpoint", &out)
                .artifact("log", &out.join("finetune_log.csv"))
                .write(&in_dir(&out))?;
            let base = load_checkpoint(&checkpoint)?;
            let data = CorpusDir::load(&corpus)?;
            let (_, table) = text_table(&data, &base.vocab, base.model.config.max_len)?;
            let groups = read_groups(&groups)?;
            let output = finetune(&base, &groups, &table, ft)?;
            output.checkpoint.save(&out)?;
            write_ft_log(&out.join("finetune_log.csv"), &output.log)?;
            if let Some(last) = output.log.last() {
                eprintln!("{} fine-tuning steps, final loss {:.5}", last.step, last.loss);
            }
        }
        Command::Mine {
            corpus,
            out,
            checkpoint,
            miner,
            queries,
            depth,
            negatives,
            cfg,
        } => {
            let miner: Miner = miner.parse().map_err(UsageError)?;
            let r = resolve(
                &cfg,
                &[("pipeline.mining_depth", depth.as_ref()), ("finetune.negatives", negatives.as_ref())],
            )?;
            let exp = &r.config;
            let mut manifest = RunManifest::new("mine", &r, exp.finetune.seed)
                .arg("corpus", corpus.display())
                .arg("miner", format!("{miner:?}").to_lowercase())
                .arg("queries", format!("{queries:?}").to_lowercase())
                .artifact("groups", &out);
            if let Some(c) = &checkpoint {
                manifest = manifest.arg("checkpoint", c.display());
            }
            manifest.write(&beside(&out))?;
            let data = CorpusDir::load(&corpus)?;
            let depth = exp.pipeline.mining_depth;
            let run = match (miner, &checkpoint) {
                (Miner::Bm25, _) => {
                    let vocab = data.build_vocab(exp.spec.vocab_cap)?;
                    let docs = encode_all(&vocab, &data.docs, exp.model.max_len)?;
                    let qs = encode_all(&vocab, &data.queries(queries), exp.model.max_len)?;
                    bm25_search(&Bm25Index::build(&docs, DEFAULT_K1, DEFAULT_B)?, &qs, depth)?.run
                }
                (Miner::Model, Some(path)) => {
                    let ckpt = load_checkpoint(path)?;
                    dense_run(&ckpt, &data, queries, depth)?
                }
                (Miner::Model, None) => {
                    return Err(UsageError("model mining needs --checkpoint (or use --miner bm25)".into()).into())
                }
            };
            let ids: Vec<String> = data.docs.iter().map(|d| d.id.clone()).collect();
            let mut neg_rng = rng::stream(exp.finetune.seed, rng::NEGATIVES);
            let mined = mine_hard_negatives(&run, &data.qrels, &ids, exp.finetune.negatives, depth, &mut neg_rng)?;
            if !mined.random_fill.is_empty() {
                eprintln!(
                    "warning: {} queries had fewer than {} mined candidates; topped up with random negatives",
                    mined.random_fill.len(),
                    exp.finetune.negatives
                );
            }
            write_groups(&out, &mined.groups)?;
            eprintln!("{} training groups written to {}", mined.groups.len(), out.display());
        }
        Command::Search {
            corpus,
            out,
            checkpoint,
            bm25,
            queries,
            k,
            cfg,
        } => {
            let r = resolve(&cfg, &[("pipeline.eval_k", k.as_ref())])?;
            let exp = &r.config;
            let k = exp.pipeline.eval_k;
            let mut manifest = RunManifest::new("search", &r, 0)
                .arg("corpus", corpus.display())
                .arg("queries", format!("{queries:?}").to_lowercase())
                .arg("ranker", if bm25 { "bm25" } else { "model" })
                .artifact("run", &out);
            if let Some(c) = &checkpoint {
                manifest = manifest.arg("checkpoint", c.display());
            }
            manifest.write(&beside(&out))?;
            let data = CorpusDir::load(&corpus)?;
            let (run, tag) = match (&checkpoint, bm25) {
                (_, true) => {
                    let vocab = data.build_vocab(exp.spec.vocab_cap)?;
                    let docs = encode_all(&vocab, &data.docs, exp.model.max_len)?;
                    let qs = encode_all(&vocab, &data.queries(queries), exp.model.max_len)?;
                    let output = bm25_search(&Bm25Index::build(&docs, DEFAULT_K1, DEFAULT_B)?, &qs, k)?;
                    if !output.empty_queries.is_empty() {
                        eprintln!("warning: {} queries had no indexable terms", output.empty_queries.len());
                    }
                    (output.run, "bm25")
                }
                (Some(path), false) => (dense_run(&load_checkpoint(path)?, &data, queries, k)?, "cpdae"),
                (None, false) => return Err(UsageError("search needs --checkpoint or --bm25".into()).into()),
            };
            if k > data.docs.len() {
                eprintln!("warning: k = {k} exceeds the corpus; full rankings returned");
            }
            write_run(&out, &run, tag)?;
            eprintln!("{} rankings written to {}", run.len(), out.display());
        }
        Command::Eval {
            run,
            qrels,
            metric,
            k,
            per_query,
        } => {
            let metric: Metric = metric.parse().map_err(UsageError)?;
            if k == 0 {
                return Err(UsageError("--k must be at least 1".into()).into());
            }
            let result = compute_metric(metric, k, &read_run(&run)?, &read_qrels(&qrels)?)?;
            if per_query {
                for (q, v) in &result.per_query {
                    println!("{q}\t{v:.4}");
                }
            }
            println!("{:.4}", result.mean);
        }
        Command::Probe {
            checkpoint,
            against,
            corpus,
            text,
            html,
            csv,
            top,
            out,
            cfg,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            if let Some(text) = text {
                let dist = render_word_distribution(&ckpt.model, &ckpt.vocab, &text, top)?;
                for c in &dist.cells {
                    println!("{:<16} {:<16} {:.6} {}", c.word, c.token, c.prob, c.bucket);
                }
                if let Some(p) = html {
                    std::fs::write(&p, dist.to_html()).with_context(|| format!("writing {}", p.display()))?;
                }
                if let Some(p) = csv {
                    std::fs::write(&p, dist.to_csv()).with_context(|| format!("writing {}", p.display()))?;
                }
                return Ok(());
            }
            let corpus = corpus.expect("clap requires --corpus without --text");
            let r = resolve(&cfg, &[])?;
            if let Some(o) = &out {
                let mut m = RunManifest::new("probe", &r, 0)
                    .arg("checkpoint", checkpoint.display())
                    .arg("corpus", corpus.display())
                    .artifact("report", o);
                if let Some(a) = &against {
                    m = m.arg("against", a.display());
                }
                m.write(&beside(o))?;
            }
            let data = CorpusDir::load(&corpus)?;
            let docs = encode_all(&ckpt.vocab, &data.docs, ckpt.model.config.max_len)?;
            let n = match r.config.pipeline.probe_docs {
                0 => docs.len(),
                n => n.min(docs.len()),
            };
            let spec = data.spec()?;
            let report = match &against {
                Some(other) => {
                    let b = load_checkpoint(other)?;
                    let cmp = suppression_probe((&ckpt.model, &ckpt.vocab), (&b.model, &b.vocab), &docs[..n], spec)?;
                    println!(
                        "common mass      {:.6} vs {:.6}  (delta {:+.6})",
                        cmp.a.common_mass, cmp.b.common_mass, cmp.delta_common
                    );
                    println!(
                        "representative   {:.6} vs {:.6}  (delta {:+.6})",
                        cmp.a.representative_prob, cmp.b.representative_prob, cmp.delta_representative
                    );
                    serde_json::to_string_pretty(&cmp)?
                }
                None => {
                    let rep = theory_probe(&ckpt.model, &ckpt.vocab, &docs[..n], spec)?;
                    println!("common mass      {:.6}", rep.common_mass);
                    println!("representative   {:.6}", rep.representative_prob);
                    println!("common word p    {:.6}", rep.common_word_prob);
                    serde_json::to_string_pretty(&rep)?
                }
            };
            if let Some(o) = out {
                std::fs::write(&o, report + "\n").with_context(|| format!("writing {}", o.display()))?;
            }
        }
        Command::Inspect { checkpoint } => {
            let m = read_manifest(&checkpoint)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            println!("format       {}", m.format_version);
            println!("kind         {:?}", m.kind);
            println!("step         {}", m.step);
            println!("vocabulary   {}", ckpt.vocab.len());
            println!("parameters   {}", ckpt.model.params.numel());
            println!("decoder      {}", ckpt.model.has_decoder());
            println!("model        {}", serde_json::to_string(&m.model)?);
            if let Some(last) = m.loss_history.last() {
                println!("final loss   {:.6}", last.total);
            }
            println!("tensors:");
            for t in &m.tensors {
                println!("  {:<32} {:?} {:?} @{}", t.name, t.group, t.shape, t.offset);
            }
        }
        Command::Gradcheck { seed } => {
            let mut failed = Vec::new();
            for mode in LossMode::ALL {
                let report = objective_grad_check(mode, seed)?;
                let worst = report.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
                let ok = report.passes(GRAD_TOL);
                println!("{:<8} max relative error {worst:.3e}  {}", mode.as_str(), if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(mode.as_str());
                }
            }
            if !failed.is_empty() {
                return Err(cpdae_core::Error::Numerical(format!(
                    "gradient check failed for {} (tolerance {GRAD_TOL:e})",
                    failed.join(", ")
                ))
                .into());
            }
        }
        Command::ReproduceAblation { out, seeds, modes, cfg } => {
            let modes: Vec<LossMode> = modes
                .iter()
                .map(|m| m.parse::<LossMode>().map_err(UsageError))
                .collect::<Result<_, _>>()?;
            let r = resolve(&cfg, &[])?;
            RunManifest::new("reproduce-ablation", &r, seeds.first().copied().unwrap_or(0))
                .arg("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
                .arg("modes", modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","))
                .artifact("report", &out.join("ablation.json"))
                .artifact("table", &out.join("ablation.txt"))
                .write(&in_dir(&out))?;
            let report = reproduce_ablation(&r.config, &modes, &seeds, |row| {
                eprintln!(
                    "{:<12} seed {:>4}  MRR@{} {:.4}",
                    row.system,
                    row.seed.map_or("-".into(), |s| s.to_string()),
                    r.config.pipeline.eval_k,
                    row.scores.mrr
                );
            })?;
            let table = report.table(r.config.pipeline.eval_k);
            print!("{table}");
            std::fs::write(out.join("ablation.txt"), &table)?;
            std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        }
    }
    Ok(())
}

fn dense_run(
    ckpt: &Checkpoint,
    data: &CorpusDir,
    which: QuerySet,
    k: usize,
) -> anyhow::Result<cpdae_core::eval::RetrievalRun> {
    let max_len = ckpt.model.config.max_len;
    let docs = encode_all(&ckpt.vocab, &data.docs, max_len)?;
    let qs = encode_all(&ckpt.vocab, &data.queries(which), max_len)?;
    let dv = ckpt.model.embed(&docs)?;
    let qv = ckpt.model.embed(&qs)?;
    let qids: Vec<String> = qs.iter().map(|q| q.doc_id.clone()).collect();
    let dids: Vec<String> = docs.iter().map(|d| d.doc_id.clone()).collect();
    Ok(brute_force_search(&qids, &qv, &dids, &dv, k)?.run)
}
