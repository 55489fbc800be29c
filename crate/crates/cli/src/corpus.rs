//! The on-disk corpus directory written by `gen-corpus`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use cpdae_core::text::io::{read_jsonl, read_qrels};
use cpdae_core::text::synthetic::read_spec;
use cpdae_core::text::{build_vocab, encode_text, Document, Qrels, SyntheticSpec, TokenSeq, Vocab};

pub const DOCS_FILE: &str = "corpus.jsonl";
pub const TRAIN_QUERIES_FILE: &str = "queries.train.jsonl";
pub const HELDOUT_QUERIES_FILE: &str = "queries.heldout.jsonl";
pub const QRELS_FILE: &str = "qrels.txt";
pub const SPEC_FILE: &str = "spec.json";

#[derive(Debug, Clone)]
pub struct CorpusDir {
    pub path: PathBuf,
    pub docs: Vec<Document>,
    pub train_queries: Vec<Document>,
    pub heldout_queries: Vec<Document>,
    pub qrels: Qrels,
    /// Present for generated corpora; needed by the probe.
    pub spec: Option<SyntheticSpec>,
}

fn optional<T>(path: &Path, read: impl FnOnce(&Path) -> cpdae_core::Result<T>) -> anyhow::Result<Option<T>> {
    if path.exists() {
        Ok(Some(read(path)?))
    } else {
        Ok(None)
    }
}

impl CorpusDir {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let docs: Vec<Document> =
            read_jsonl(&dir.join(DOCS_FILE)).with_context(|| format!("reading corpus directory {}", dir.display()))?;
        Ok(CorpusDir {
            path: dir.to_path_buf(),
            docs,
            train_queries: optional(&dir.join(TRAIN_QUERIES_FILE), read_jsonl)?.unwrap_or_default(),
            heldout_queries: optional(&dir.join(HELDOUT_QUERIES_FILE), read_jsonl)?.unwrap_or_default(),
            qrels: optional(&dir.join(QRELS_FILE), read_qrels)?.unwrap_or_default(),
            spec: optional(&dir.join(SPEC_FILE), read_spec)?,
        })
    }

    pub fn build_vocab(&self, cap: usize) -> cpdae_core::Result<Vocab> {
        build_vocab(self.docs.iter().map(|d| d.text.as_str()), cap)
    }

    pub fn spec(&self) -> anyhow::Result<&SyntheticSpec> {
        self.spec.as_ref().ok_or_else(|| {
            anyhow::Error::new(cpdae_core::Error::contract(format!(
                "{} has no {SPEC_FILE}; the probe needs a generated corpus",
                self.path.display()
            )))
        })
    }

    pub fn queries(&self, which: QuerySet) -> Vec<Document> {
        match which {
            QuerySet::Train => self.train_queries.clone(),
            QuerySet::Heldout => self.heldout_queries.clone(),
            QuerySet::All => self.train_queries.iter().chain(&self.heldout_queries).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum QuerySet {
    Train,
    Heldout,
    All,
}

pub fn encode_all(vocab: &Vocab, docs: &[Document], max_len: usize) -> cpdae_core::Result<Vec<TokenSeq>> {
    docs.iter().map(|d| encode_text(vocab, &d.id, &d.text, max_len)).collect()
}
