//! Decoding probes: how much normalized decoder mass lands on corpus-wide
//! common words versus a document's own topic words.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::losses::surrogate_term;
use crate::model::Model;
use crate::text::{encode_text, is_reserved, tokenize, SyntheticSpec, TokenSeq, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryProbeReport {
    pub docs: usize,
    /// Mean over documents of `Σ_{x∈S} z̃_x`.
    pub common_mass: f64,
    /// Mean over documents of `1 - common_mass`, computed independently.
    pub noncommon_mass: f64,
    /// Mean `z̃` of a document's own topic words, averaged over documents.
    pub representative_prob: f64,
    /// Estimate of the shared common-word probability `a`: mean `z̃_x` over
    /// `x ∈ S` and all documents.
    pub common_word_prob: f64,
    /// Mean over adjacent document pairs of `Σ_{x∈S} g(p_x, q_x)`.
    pub surrogate_common: f64,
    /// Same sum over words outside `S`.
    pub surrogate_noncommon: f64,
    /// Largest `|common + noncommon - 1|` over documents.
    pub max_conservation_error: f64,
    pub common_set_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeComparison {
    pub a: TheoryProbeReport,
    pub b: TheoryProbeReport,
    /// `common_mass(a) - common_mass(b)`
    pub delta_common: f64,
    /// `representative_prob(a) - representative_prob(b)`
    pub delta_representative: f64,
}

fn common_ids(spec: &SyntheticSpec, vocab: &Vocab) -> Result<Vec<u32>> {
    spec.common_words()
        .iter()
        .map(|w| {
            vocab
                .get(w)
                .ok_or_else(|| Error::contract(format!("common word `{w}` is not in the vocabulary")))
        })
        .collect()
}

/// Decodes every document (unmasked) and measures where the normalized
/// word distribution puts its mass.
pub fn theory_probe(model: &Model, vocab: &Vocab, docs: &[TokenSeq], spec: &SyntheticSpec) -> Result<TheoryProbeReport> {
    if docs.is_empty() {
        return Err(Error::contract("probe needs at least one document"));
    }
    if !model.has_decoder() {
        return Err(Error::contract("checkpoint has no decoder to probe"));
    }
    if model.config.vocab_size != vocab.len() {
        return Err(Error::contract("checkpoint and vocabulary sizes differ"));
    }
    let common = common_ids(spec, vocab)?;
    let is_common: BTreeSet<u32> = common.iter().copied().collect();
    let dists = model.word_distributions(docs)?;
    let v = model.config.vocab_size;

    let (mut common_mass, mut noncommon_mass, mut rep, mut common_prob) = (0.0, 0.0, 0.0, 0.0);
    let mut rep_docs = 0usize;
    let mut max_err: f64 = 0.0;
    for (i, doc) in docs.iter().enumerate() {
        let row = dists.row(i);
        let c: f64 = common.iter().map(|&id| row[id as usize] as f64).sum();
        let nc: f64 = (0..v as u32).filter(|id| !is_common.contains(id)).map(|id| row[id as usize] as f64).sum();
        max_err = max_err.max((c + nc - 1.0).abs());
        common_mass += c;
        noncommon_mass += nc;
        common_prob += c / common.len() as f64;
        let topic: BTreeSet<u32> = doc
            .content()
            .iter()
            .copied()
            .filter(|&id| !is_reserved(id) && !is_common.contains(&id))
            .collect();
        if !topic.is_empty() {
            rep += topic.iter().map(|&id| row[id as usize] as f64).sum::<f64>() / topic.len() as f64;
            rep_docs += 1;
        }
    }
    let (mut sur_c, mut sur_nc) = (0.0, 0.0);
    let pairs = docs.len().saturating_sub(1);
    for i in 0..pairs {
        let (p, q) = (dists.row(i), dists.row(i + 1));
        for x in 0..v {
            let g = surrogate_term(p[x] as f64, q[x] as f64);
            if is_common.contains(&(x as u32)) {
                sur_c += g;
            } else {
                sur_nc += g;
            }
        }
    }
    let n = docs.len() as f64;
    let pairs = pairs.max(1) as f64;
    Ok(TheoryProbeReport {
        docs: docs.len(),
        common_mass: common_mass / n,
        noncommon_mass: noncommon_mass / n,
        representative_prob: if rep_docs > 0 { rep / rep_docs as f64 } else { 0.0 },
        common_word_prob: common_prob / n,
        surrogate_common: sur_c / pairs,
        surrogate_noncommon: sur_nc / pairs,
        max_conservation_error: max_err,
        common_set_size: common.len(),
    })
}

/// Runs [`theory_probe`] on two checkpoints over the same documents.
pub fn suppression_probe(
    a: (&Model, &Vocab),
    b: (&Model, &Vocab),
    docs: &[TokenSeq],
    spec: &SyntheticSpec,
) -> Result<ProbeComparison> {
    if a.1 != b.1 {
        return Err(Error::contract("checkpoints were trained with different vocabularies"));
    }
    let ra = theory_probe(a.0, a.1, docs, spec)?;
    let rb = theory_probe(b.0, b.1, docs, spec)?;
    Ok(ProbeComparison {
        delta_common: ra.common_mass - rb.common_mass,
        delta_representative: ra.representative_prob - rb.representative_prob,
        a: ra,
        b: rb,
    })
}

/// Legend of the heatmap buckets.
pub const BUCKETS: [&str; 6] = ["0", ".1", ".2", ".3", ".4", ">.5"];

fn bucket(p: f64) -> usize {
    ((p * 10.0).floor().max(0.0) as usize).min(5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordCell {
    pub word: String,
    /// Vocabulary entry the word maps to (`[UNK]` when absent).
    pub token: String,
    pub id: u32,
    pub prob: f64,
    pub bucket: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordDistribution {
    pub cells: Vec<WordCell>,
    /// Highest-probability vocabulary entries overall.
    pub top: Vec<(String, f64)>,
}

/// Decodes `text` and attaches its `z̃` probability to each input word.
pub fn render_word_distribution(model: &Model, vocab: &Vocab, text: &str, top_n: usize) -> Result<WordDistribution> {
    if !model.has_decoder() {
        return Err(Error::contract("checkpoint has no decoder to render"));
    }
    let seq = encode_text(vocab, "text", text, model.config.max_len)?;
    let dist = model.word_distributions(std::slice::from_ref(&seq))?;
    let row = dist.row(0);
    let cells = tokenize(text)
        .into_iter()
        .map(|word| {
            let id = vocab.id(&word);
            let prob = row[id as usize] as f64;
            WordCell {
                token: vocab.token(id).to_string(),
                word,
                id,
                prob,
                bucket: BUCKETS[bucket(prob)],
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let top = order
        .into_iter()
        .take(top_n)
        .map(|i| (vocab.token(i as u32).to_string(), row[i] as f64))
        .collect();
    Ok(WordDistribution { cells, top })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl WordDistribution {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,word,token,id,prob,bucket\n");
        for (i, c) in self.cells.iter().enumerate() {
            writeln!(out, "{i},{},{},{},{},{}", c.word, c.token, c.id, c.prob, c.bucket).expect("write to String");
        }
        out
    }

    /// Standalone page; darker cells mean higher probability.
    pub fn to_html(&self) -> String {
        const SHADES: [&str; 6] = ["#ffffff", "#dbe9f6", "#a6cbe3", "#6aaed6", "#3282be", "#08519c"];
        let mut out = String::from(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Word distribution</title>\n\
             <style>body{font-family:sans-serif} span.w{padding:2px 3px;margin:1px;display:inline-block}</style>\n\
             </head><body>\n<p>",
        );
        for c in &self.cells {
            let shade = SHADES[BUCKETS.iter().position(|b| *b == c.bucket).unwrap_or(0)];
            let fg = if c.prob >= 0.3 { "#fff" } else { "#000" };
            write!(
                out,
                "<span class=\"w\" style=\"background:{shade};color:{fg}\" title=\"{} p={:.6}\">{}</span> ",
                escape(&c.token),
                c.prob,
                escape(&c.word)
            )
            .expect("write to String");
        }
        out.push_str("</p>\n<p>Legend: ");
        for (b, shade) in BUCKETS.iter().zip(SHADES) {
            write!(out, "<span class=\"w\" style=\"background:{shade};border:1px solid #ccc\">{b}</span>")
                .expect("write to String");
        }
        out.push_str("</p>\n<table><tr><th>token</th><th>probability</th></tr>\n");
        for (t, p) in &self.top {
            writeln!(out, "<tr><td>{}</td><td>{p:.6}</td></tr>", escape(t)).expect("write to String");
        }
        out.push_str("</table>\n</body></html>\n");
        out
    }
}
