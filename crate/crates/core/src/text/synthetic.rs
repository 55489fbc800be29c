//! Seeded synthetic retrieval benchmark with a planted common-word set.
//!
//! Every document contains every common-pool word at least once; remaining
//! common slots repeat common words with Zipf weights. The other positions
//! are drawn uniformly from the pool of exactly one topic, so topic words
//! partition the collection by topic. Queries sample topic words of their
//! source document, which is the single relevant document.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::io::{write_jsonl, write_qrels, Document, Qrels};
use super::RESERVED_TOKENS;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_docs: usize,
    pub doc_len: usize,
    pub common_pool_size: usize,
    pub topic_count: usize,
    pub topic_pool_size: usize,
    /// Fraction of each document's positions filled from the common pool.
    pub common_fraction: f64,
    pub queries_per_doc: usize,
    pub query_len: usize,
    pub zipf_exponent: f64,
    pub vocab_cap: usize,
    /// Queries withheld from fine-tuning for evaluation.
    pub heldout_queries: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_docs: 1000,
            doc_len: 80,
            common_pool_size: 50,
            topic_count: 100,
            topic_pool_size: 39,
            common_fraction: 0.65,
            queries_per_doc: 1,
            query_len: 4,
            zipf_exponent: 1.0,
            vocab_cap: 8192,
            heldout_queries: 200,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    pub fn common_slots(&self) -> usize {
        (self.common_fraction * self.doc_len as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_docs", self.num_docs),
            ("doc_len", self.doc_len),
            ("common_pool_size", self.common_pool_size),
            ("topic_count", self.topic_count),
            ("topic_pool_size", self.topic_pool_size),
            ("queries_per_doc", self.queries_per_doc),
            ("query_len", self.query_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Spec(format!("{name} must be at least 1")));
        }
        if !(self.common_fraction > 0.0 && self.common_fraction < 1.0) {
            return Err(Error::Spec(format!("common_fraction {} must lie in (0,1)", self.common_fraction)));
        }
        let slots = self.common_slots();
        if slots < self.common_pool_size {
            return Err(Error::Spec(format!(
                "{slots} common positions per document cannot cover a common pool of {}",
                self.common_pool_size
            )));
        }
        if slots >= self.doc_len {
            return Err(Error::Spec("no positions left for topic words".into()));
        }
        let needed = RESERVED_TOKENS.len() + self.common_pool_size + self.topic_count * self.topic_pool_size;
        if needed > self.vocab_cap {
            return Err(Error::Spec(format!(
                "{} topics x {} words need a vocabulary of {needed}, above the cap of {}",
                self.topic_count, self.topic_pool_size, self.vocab_cap
            )));
        }
        if self.zipf_exponent < 0.0 {
            return Err(Error::Spec("zipf_exponent must be non-negative".into()));
        }
        Ok(())
    }

    pub fn common_word(i: usize) -> String {
        format!("c{i}")
    }

    pub fn topic_word(topic: usize, j: usize) -> String {
        format!("t{topic}w{j}")
    }

    /// The planted common set.
    pub fn common_words(&self) -> Vec<String> {
        (0..self.common_pool_size).map(Self::common_word).collect()
    }

    pub fn is_common(&self, token: &str) -> bool {
        token
            .strip_prefix('c')
            .and_then(|n| n.parse::<usize>().ok())
            .is_some_and(|i| i < self.common_pool_size)
    }

    /// Topic of a topic word, if `token` is one.
    pub fn topic_of(&self, token: &str) -> Option<usize> {
        let rest = token.strip_prefix('t')?;
        let (t, j) = rest.split_once('w')?;
        let (t, j) = (t.parse::<usize>().ok()?, j.parse::<usize>().ok()?);
        (t < self.topic_count && j < self.topic_pool_size).then_some(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub docs: Vec<Document>,
    pub doc_topics: Vec<usize>,
    pub queries: Vec<Document>,
    pub qrels: Qrels,
    /// Ids of the queries withheld from training.
    pub heldout: Vec<String>,
}

impl SyntheticCorpus {
    pub fn train_queries(&self) -> Vec<Document> {
        self.queries.iter().filter(|q| !self.heldout.contains(&q.id)).cloned().collect()
    }

    pub fn heldout_queries(&self) -> Vec<Document> {
        self.queries.iter().filter(|q| self.heldout.contains(&q.id)).cloned().collect()
    }

    /// Writes `corpus.jsonl`, `queries*.jsonl`, `qrels.txt` and `spec.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("corpus.jsonl"), &self.docs)?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        write_jsonl(&dir.join("queries.train.jsonl"), &self.train_queries())?;
        write_jsonl(&dir.join("queries.heldout.jsonl"), &self.heldout_queries())?;
        write_qrels(&dir.join("qrels.txt"), &self.qrels)?;
        let spec = serde_json::to_string_pretty(&self.spec).expect("spec serializes") + "\n";
        let path = dir.join("spec.json");
        std::fs::write(&path, spec).map_err(|e| Error::io(path, e))
    }
}

pub fn read_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse("synthetic spec", e.to_string()))
}

/// Generates the benchmark; a pure function of `spec`.
pub fn gen_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::CORPUS);
    let common = spec.common_words();
    let zipf: Vec<f64> = (1..=spec.common_pool_size)
        .map(|r| 1.0 / (r as f64).powf(spec.zipf_exponent))
        .collect();
    let zipf = WeightedIndex::new(&zipf).map_err(|e| Error::Spec(e.to_string()))?;
    let common_slots = spec.common_slots();

    let mut docs = Vec::with_capacity(spec.num_docs);
    let mut doc_topics = Vec::with_capacity(spec.num_docs);
    let mut queries = Vec::new();
    let mut qrels = Qrels::new();
    for d in 0..spec.num_docs {
        let topic = d % spec.topic_count;
        let mut words: Vec<String> = common.clone();
        for _ in spec.common_pool_size..common_slots {
            words.push(common[zipf.sample(&mut rng)].clone());
        }
        let mut topic_words = Vec::new();
        for _ in common_slots..spec.doc_len {
            let w = SyntheticSpec::topic_word(topic, rng.random_range(0..spec.topic_pool_size));
            topic_words.push(w.clone());
            words.push(w);
        }
        words.shuffle(&mut rng);
        let doc_id = format!("d{d}");

        let mut distinct: Vec<String> = Vec::new();
        for w in &topic_words {
            if !distinct.contains(w) {
                distinct.push(w.clone());
            }
        }
        for k in 0..spec.queries_per_doc {
            let take = spec.query_len.min(distinct.len());
            let picked: Vec<&str> = sample(&mut rng, distinct.len(), take)
                .into_iter()
                .map(|i| distinct[i].as_str())
                .collect();
            let qid = format!("q{d}_{k}");
            qrels.insert(qid.clone(), BTreeMap::from([(doc_id.clone(), 1)]));
            queries.push(Document {
                id: qid,
                text: picked.join(" "),
            });
        }
        docs.push(Document {
            id: doc_id,
            text: words.join(" "),
        });
        doc_topics.push(topic);
    }

    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(&mut rng);
    let held = spec.heldout_queries.min(queries.len());
    let mut heldout: Vec<usize> = order[..held].to_vec();
    heldout.sort_unstable();
    let heldout = heldout.into_iter().map(|i| queries[i].id.clone()).collect();

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        docs,
        doc_topics,
        queries,
        qrels,
        heldout,
    })
}
