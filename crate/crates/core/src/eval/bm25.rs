use std::collections::BTreeMap;

use super::search::rank;
use super::{Ranked, RetrievalRun};
use crate::text::{is_reserved, TokenSeq};
use crate::{Error, Result};

pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;

/// Inverted index over token ids.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    pub k1: f64,
    pub b: f64,
    doc_ids: Vec<String>,
    doc_len: Vec<f64>,
    avgdl: f64,
    postings: BTreeMap<u32, Vec<(usize, u32)>>,
}

impl Bm25Index {
    /// Indexes the content ids of `docs`; reserved ids (including `[UNK]`)
    /// are not terms.
    pub fn build(docs: &[TokenSeq], k1: f64, b: f64) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::Eval("cannot index an empty corpus".into()));
        }
        if !(k1 >= 0.0) || !(0.0..=1.0).contains(&b) {
            return Err(Error::contract(format!("invalid BM25 parameters k1={k1}, b={b}")));
        }
        let mut postings: BTreeMap<u32, Vec<(usize, u32)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        for (d, doc) in docs.iter().enumerate() {
            let mut tf: BTreeMap<u32, u32> = BTreeMap::new();
            for &id in doc.content().iter().filter(|&&id| !is_reserved(id)) {
                *tf.entry(id).or_default() += 1;
            }
            doc_len.push(tf.values().sum::<u32>() as f64);
            for (id, c) in tf {
                postings.entry(id).or_default().push((d, c));
            }
        }
        let avgdl = doc_len.iter().sum::<f64>() / docs.len() as f64;
        Ok(Bm25Index {
            k1,
            b,
            doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
            doc_len,
            avgdl,
            postings,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`
    pub fn idf(&self, term: u32) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.postings.get(&term).map_or(0, |p| p.len()) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores every document; each distinct query term counts once.
    pub fn scores(&self, query: &[u32]) -> Vec<f64> {
        let mut terms: Vec<u32> = query.iter().copied().filter(|&id| !is_reserved(id)).collect();
        terms.sort_unstable();
        terms.dedup();
        let mut scores = vec![0.0; self.num_docs()];
        let avgdl = if self.avgdl > 0.0 { self.avgdl } else { 1.0 };
        for t in terms {
            let Some(list) = self.postings.get(&t) else { continue };
            let idf = self.idf(t);
            for &(d, tf) in list {
                let tf = tf as f64;
                let norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[d] / avgdl);
                scores[d] += idf * tf * (self.k1 + 1.0) / (tf + norm);
            }
        }
        scores
    }

    /// Top-`k` documents; `None` when no query term survives filtering.
    pub fn search(&self, query: &[u32], k: usize) -> Option<Vec<Ranked>> {
        if !query.iter().any(|&id| !is_reserved(id)) {
            return None;
        }
        let scored = self
            .scores(query)
            .into_iter()
            .zip(&self.doc_ids)
            .map(|(score, docid)| Ranked {
                docid: docid.clone(),
                score,
            })
            .collect();
        let mut ranked = rank(scored);
        ranked.truncate(k);
        Some(ranked)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Output {
    pub run: RetrievalRun,
    /// Queries with no indexable term; they get an empty ranking.
    pub empty_queries: Vec<String>,
}

pub fn bm25_search(index: &Bm25Index, queries: &[TokenSeq], k: usize) -> Result<Bm25Output> {
    if k == 0 {
        return Err(Error::contract("search depth k must be at least 1"));
    }
    let mut out = Bm25Output {
        run: RetrievalRun::default(),
        empty_queries: Vec::new(),
    };
    for q in queries {
        let ranked = index.search(q.content(), k).unwrap_or_else(|| {
            out.empty_queries.push(q.doc_id.clone());
            Vec::new()
        });
        out.run.results.insert(q.doc_id.clone(), ranked);
    }
    Ok(out)
}
