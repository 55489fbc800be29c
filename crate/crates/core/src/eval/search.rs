use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use cpdae_tensor::Tensor;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub docid: String,
    pub score: f64,
}

/// Ranked lists per query: descending score, ties by ascending docid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalRun {
    pub results: BTreeMap<String, Vec<Ranked>>,
}

impl RetrievalRun {
    pub fn get(&self, qid: &str) -> Option<&[Ranked]> {
        self.results.get(qid).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    /// TREC six-column text: `qid Q0 docid rank score tag`.
    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for (qid, ranked) in &self.results {
            for (i, r) in ranked.iter().enumerate() {
                writeln!(out, "{qid} Q0 {} {} {} {tag}", r.docid, i + 1, r.score).expect("write to String");
            }
        }
        out
    }
}

/// Sorts by descending score, then ascending docid.
pub(crate) fn rank(mut scored: Vec<Ranked>) -> Vec<Ranked> {
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.docid.cmp(&b.docid)));
    scored
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutput {
    pub run: RetrievalRun,
    /// Set when `k` exceeded the corpus and the full ranking was returned.
    pub k_exceeds_corpus: bool,
}

/// Exact top-`k` by dot product.
pub fn brute_force_search(
    query_ids: &[String],
    query_vecs: &Tensor<f32>,
    doc_ids: &[String],
    doc_vecs: &Tensor<f32>,
    k: usize,
) -> Result<SearchOutput> {
    if k == 0 {
        return Err(Error::contract("search depth k must be at least 1"));
    }
    if query_vecs.rank() != 2 || doc_vecs.rank() != 2 || query_vecs.last_dim() != doc_vecs.last_dim() {
        return Err(Error::contract(format!(
            "query vectors {:?} and document vectors {:?} have different widths",
            query_vecs.shape(),
            doc_vecs.shape()
        )));
    }
    if query_ids.len() != query_vecs.rows() || doc_ids.len() != doc_vecs.rows() {
        return Err(Error::contract("id lists do not match the number of vectors"));
    }
    let mut run = RetrievalRun::default();
    for (qi, qid) in query_ids.iter().enumerate() {
        let q = query_vecs.row(qi);
        let scored = doc_ids
            .iter()
            .enumerate()
            .map(|(di, docid)| {
                let d = doc_vecs.row(di);
                let score: f64 = q.iter().zip(d).map(|(&a, &b)| a as f64 * b as f64).sum();
                Ranked {
                    docid: docid.clone(),
                    score,
                }
            })
            .collect();
        let mut ranked = rank(scored);
        ranked.truncate(k);
        if run.results.insert(qid.clone(), ranked).is_some() {
            return Err(Error::contract(format!("duplicate query id `{qid}`")));
        }
    }
    Ok(SearchOutput {
        run,
        k_exceeds_corpus: k > doc_ids.len(),
    })
}

pub fn write_run(path: &Path, run: &RetrievalRun, tag: &str) -> Result<()> {
    std::fs::write(path, run.to_trec(tag)).map_err(|e| Error::io(path, e))
}

/// Parses a TREC run file; lines are re-sorted by score with docid ties.
pub fn read_run(path: &Path) -> Result<RetrievalRun> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw: BTreeMap<String, Vec<Ranked>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(Error::parse("run file", format!("line {}: expected 6 columns, found {}", n + 1, cols.len())));
        }
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| Error::parse("run file", format!("line {}: bad score `{}`", n + 1, cols[4])))?;
        if !score.is_finite() {
            return Err(Error::parse("run file", format!("line {}: non-finite score", n + 1)));
        }
        let list = raw.entry(cols[0].to_string()).or_default();
        if list.iter().any(|r| r.docid == cols[2]) {
            return Err(Error::parse("run file", format!("line {}: duplicate docid {}", n + 1, cols[2])));
        }
        list.push(Ranked {
            docid: cols[2].to_string(),
            score,
        });
    }
    Ok(RetrievalRun {
        results: raw.into_iter().map(|(q, l)| (q, rank(l))).collect(),
    })
}
