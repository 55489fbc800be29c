//! Exact search, ranking metrics, the BM25 baseline and decoding probes.

mod bm25;
mod metrics;
mod probe;
mod search;

pub use bm25::{bm25_search, Bm25Index, Bm25Output, DEFAULT_B, DEFAULT_K1};
pub use metrics::{compute_metric, Metric, MetricResult};
pub use probe::{
    render_word_distribution, suppression_probe, theory_probe, ProbeComparison, TheoryProbeReport, WordCell,
    WordDistribution, BUCKETS,
};
pub use search::{brute_force_search, read_run, write_run, Ranked, RetrievalRun, SearchOutput};
