//! JSON-lines corpora, TREC qrels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One corpus or query record: `{"id": .., "text": ..}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

/// Relevance judgments: query id → document id → grade.
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::parse(path.display().to_string(), format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses `qid 0 docid grade` lines.
pub fn parse_qrels(text: &str) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [qid, _, docid, grade] = fields[..] else {
            return Err(Error::parse("qrels", format!("line {}: expected 4 columns", i + 1)));
        };
        let grade: u32 = grade
            .parse()
            .map_err(|_| Error::parse("qrels", format!("line {}: grade `{grade}` is not an integer", i + 1)))?;
        qrels.entry(qid.to_string()).or_default().insert(docid.to_string(), grade);
    }
    Ok(qrels)
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qrels(&text)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (qid, docs) in qrels {
        for (docid, grade) in docs {
            writeln!(out, "{qid} 0 {docid} {grade}").unwrap();
        }
    }
    out
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    std::fs::write(path, format_qrels(qrels)).map_err(|e| Error::io(path, e))
}
