use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::RetrievalRun;
use crate::text::Qrels;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mrr,
    Recall,
    Ndcg,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Mrr => "mrr",
            Metric::Recall => "recall",
            Metric::Ndcg => "ndcg",
        })
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mrr" => Ok(Metric::Mrr),
            "recall" => Ok(Metric::Recall),
            "ndcg" => Ok(Metric::Ndcg),
            other => Err(format!("unknown metric `{other}` (expected mrr, recall or ndcg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub metric: Metric,
    pub k: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
}

/// MRR@k, Recall@k or NDCG@k (gain `2^grade - 1`, `log2(rank + 1)`
/// discount) for every query of `run`. Documents with grade 0 are not
/// relevant.
pub fn compute_metric(metric: Metric, k: usize, run: &RetrievalRun, qrels: &Qrels) -> Result<MetricResult> {
    if k == 0 {
        return Err(Error::Eval("metric cutoff k must be at least 1".into()));
    }
    let mut per_query = BTreeMap::new();
    for (qid, ranked) in &run.results {
        let judged = qrels
            .get(qid)
            .ok_or_else(|| Error::Eval(format!("query `{qid}` has no relevance judgments")))?;
        let grade = |docid: &str| judged.get(docid).copied().unwrap_or(0);
        let top = &ranked[..ranked.len().min(k)];
        let value = match metric {
            Metric::Mrr => top
                .iter()
                .position(|r| grade(&r.docid) > 0)
                .map_or(0.0, |i| 1.0 / (i + 1) as f64),
            Metric::Recall => {
                let relevant = judged.values().filter(|&&g| g > 0).count();
                if relevant == 0 {
                    0.0
                } else {
                    top.iter().filter(|r| grade(&r.docid) > 0).count() as f64 / relevant as f64
                }
            }
            Metric::Ndcg => {
                let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
                let discount = |i: usize| ((i + 2) as f64).log2();
                let dcg: f64 = top.iter().enumerate().map(|(i, r)| gain(grade(&r.docid)) / discount(i)).sum();
                let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
                ideal.sort_unstable_by(|a, b| b.cmp(a));
                let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| gain(g) / discount(i)).sum();
                if idcg > 0.0 {
                    dcg / idcg
                } else {
                    0.0
                }
            }
        };
        per_query.insert(qid.clone(), value);
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.values().sum::<f64>() / per_query.len() as f64
    };
    Ok(MetricResult {
        metric,
        k,
        per_query,
        mean,
    })
}
