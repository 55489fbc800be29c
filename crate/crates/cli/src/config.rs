//! Layered `key = value` configuration.
//!
//! Every key is a dotted path into [`ExperimentConfig`]; its type and
//! default come from the serialized defaults, so the schema cannot drift
//! from the structs. Values resolve as flags > file > defaults and each
//! key remembers where its value came from.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use cpdae_core::experiment::ExperimentConfig;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

/// Derived from the vocabulary, never configured.
const DERIVED_KEYS: [&str; 1] = ["model.vocab_size"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    Syntax { path: String, line: usize, msg: String },
    #[error("unknown config key `{key}`{}", hint(.suggestion))]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error("config key `{key}` expects {expected}, got `{value}`")]
    Type { key: String, expected: Kind, value: String },
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Semantic(String),
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn hint(s: &Option<String>) -> String {
    s.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Bool,
    Integer,
    Float,
    Text,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Bool => "a boolean (true/false)",
            Kind::Integer => "a non-negative integer",
            Kind::Float => "a number",
            Kind::Text => "a string",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeySpec {
    pub key: String,
    pub kind: Kind,
    pub default: Value,
}

/// One line of help per key.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("corpus.num_docs", "documents in the synthetic corpus"),
    ("corpus.doc_len", "words per document"),
    ("corpus.common_pool_size", "size of the planted common-word set"),
    ("corpus.topic_count", "number of topics"),
    ("corpus.topic_pool_size", "distinct words per topic"),
    ("corpus.common_fraction", "fraction of each document drawn from the common pool"),
    ("corpus.queries_per_doc", "queries generated from each document"),
    ("corpus.query_len", "words per query"),
    ("corpus.zipf_exponent", "Zipf exponent of the common-word distribution"),
    ("corpus.vocab_cap", "maximum vocabulary size, special tokens included"),
    ("corpus.heldout_queries", "queries withheld from fine-tuning for evaluation"),
    ("corpus.seed", "corpus generation seed"),
    ("model.hidden", "hidden width H"),
    ("model.layers", "encoder layers"),
    ("model.heads", "attention heads (must divide hidden)"),
    ("model.ffn_mult", "feed-forward width as a multiple of hidden"),
    ("model.max_len", "maximum sequence length including [CLS] and [SEP]"),
    ("model.dropout", "dropout rate during training"),
    ("model.normalize", "decoder output normalization: sum or softmax"),
    ("train.batch_texts", "texts per pre-training batch (two views each)"),
    ("train.epochs", "pre-training epochs when train.steps is 0"),
    ("train.steps", "pre-training updates; overrides epochs when positive"),
    ("train.lr", "peak learning rate"),
    ("train.warmup_fraction", "fraction of steps spent in linear warmup"),
    ("train.adam.beta1", "Adam first-moment decay"),
    ("train.adam.beta2", "Adam second-moment decay"),
    ("train.adam.eps", "Adam denominator epsilon"),
    ("train.clip_norm", "global gradient-norm clip (0 disables)"),
    ("train.lambda", "weight of the contrastive term"),
    ("train.mask_rate", "fraction of content tokens masked per view"),
    ("train.seed", "pre-training seed"),
    ("train.loss_mode", "cpdae, cpdae_r, no_cl or idf_rec"),
    ("train.cl_anchors", "contrastive anchors: symmetric or first_view"),
    ("train.tau_dist", "temperature of the word-distribution contrastive loss"),
    ("train.tau_repr", "temperature of the representation contrastive loss"),
    ("train.mlm_views", "views carrying the MLM loss: one or both"),
    ("finetune.negatives", "negatives per training group"),
    ("finetune.batch_groups", "groups per fine-tuning update"),
    ("finetune.epochs", "fine-tuning epochs when finetune.steps is 0"),
    ("finetune.steps", "fine-tuning updates; overrides epochs when positive"),
    ("finetune.lr", "peak fine-tuning learning rate"),
    ("finetune.warmup_fraction", "fraction of fine-tuning steps spent in warmup"),
    ("finetune.adam.beta1", "Adam first-moment decay"),
    ("finetune.adam.beta2", "Adam second-moment decay"),
    ("finetune.adam.eps", "Adam denominator epsilon"),
    ("finetune.clip_norm", "global gradient-norm clip (0 disables)"),
    ("finetune.loss", "softmax or hinge"),
    ("finetune.margin", "hinge margin"),
    ("finetune.seed", "fine-tuning and negative-sampling seed"),
    ("pipeline.mining_rounds", "model-mined rounds after the BM25 round"),
    ("pipeline.mining_depth", "ranking depth searched for hard negatives"),
    ("pipeline.eval_k", "metric cutoff k"),
    ("pipeline.probe_docs", "documents decoded by the probe (0 = all)"),
];

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.clone())),
    }
}

fn kind_of(v: &Value) -> Kind {
    match v {
        Value::Bool(_) => Kind::Bool,
        Value::Number(n) if n.is_u64() => Kind::Integer,
        Value::Number(_) => Kind::Float,
        _ => Kind::Text,
    }
}

/// Every configurable key, in a stable order.
pub fn schema() -> Vec<KeySpec> {
    let defaults = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
    let mut flat = Vec::new();
    flatten("", &defaults, &mut flat);
    let order = |k: &str| KEY_DOCS.iter().position(|(d, _)| *d == k).unwrap_or(usize::MAX);
    let mut keys: Vec<KeySpec> = flat
        .into_iter()
        .filter(|(k, _)| !DERIVED_KEYS.contains(&k.as_str()))
        .map(|(key, default)| KeySpec {
            kind: kind_of(&default),
            key,
            default,
        })
        .collect();
    keys.sort_by_key(|k| order(&k.key));
    keys
}

pub fn doc_for(key: &str) -> Option<&'static str> {
    KEY_DOCS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d)
}

fn display_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// The `--help` appendix: every key with its default.
pub fn keys_help() -> String {
    let keys = schema();
    let width = keys.iter().map(|k| k.key.len() + display_value(&k.default).len() + 3).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (set in a --config file or with --set KEY=VALUE):\n");
    for k in &keys {
        let lhs = format!("{} = {}", k.key, display_value(&k.default));
        out.push_str(&format!("  {lhs:<width$}  {}\n", doc_for(&k.key).unwrap_or("")));
    }
    out
}

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1];
        for (j, cb) in b.iter().enumerate() {
            cur.push((prev[j] + (ca != *cb) as usize).min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Closest known key, matching on the full path or on the last segment.
pub fn nearest_key(key: &str) -> Option<String> {
    let leaf = key.rsplit('.').next().unwrap_or(key);
    schema()
        .into_iter()
        .map(|k| {
            let k_leaf = k.key.rsplit('.').next().unwrap_or(&k.key).to_string();
            let d = levenshtein(key, &k.key).min(levenshtein(leaf, &k_leaf) + 1);
            (d, k.key)
        })
        .min()
        .filter(|(d, _)| *d <= 3)
        .map(|(_, k)| k)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "from")]
pub enum Source {
    Default,
    File(String),
    Flag,
}

/// Raw `key = value` assignments of one layer, with their line numbers.
#[derive(Debug, Clone, Default)]
pub struct Layer {
    pub entries: Vec<(String, String, usize)>,
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2 && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('\'') && v.ends_with('\''))) {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

/// Parses `key = value` lines with `#` comments and optional `[section]`
/// headers that prefix the following keys.
pub fn parse_layer(text: &str, origin: &str) -> Result<Layer, ConfigError> {
    let mut layer = Layer::default();
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| ConfigError::Syntax {
            path: origin.to_string(),
            line: n + 1,
            msg: msg.to_string(),
        };
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| err("unterminated section header"))?.trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(err("invalid section name"));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
        let k = k.trim();
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(err("invalid key"));
        }
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        layer.entries.push((key, unquote(v).to_string(), n + 1));
    }
    Ok(layer)
}

/// A file layer. Run manifests (`.json`) are accepted too: their resolved
/// values become the file layer, which is how a run is replayed.
pub fn read_layer(path: &Path) -> Result<Layer, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "json") {
        let v: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Syntax {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let not_recognized = || ConfigError::Syntax {
            path: path.display().to_string(),
            line: 1,
            msg: "neither a run manifest (no `config` object) nor a corpus spec".into(),
        };
        if let Some(config) = v.get("config").and_then(Value::as_object) {
            let entries = config.iter().map(|(k, v)| (k.clone(), display_value(v), 0)).collect();
            return Ok(Layer { entries });
        }
        // the `spec.json` written next to a generated corpus
        let spec = v.as_object().ok_or_else(not_recognized)?;
        let entries: Vec<_> = spec
            .iter()
            .map(|(k, v)| (format!("corpus.{k}"), display_value(v), 0))
            .collect();
        let known = schema();
        if entries.is_empty() || !entries.iter().all(|(k, _, _)| known.iter().any(|s| &s.key == k)) {
            return Err(not_recognized());
        }
        return Ok(Layer { entries });
    }
    parse_layer(&text, &path.display().to_string())
}

fn parse_value(spec: &KeySpec, raw: &str) -> Result<Value, ConfigError> {
    let type_err = || ConfigError::Type {
        key: spec.key.clone(),
        expected: spec.kind,
        value: raw.to_string(),
    };
    Ok(match spec.kind {
        Kind::Bool => Value::Bool(raw.parse().map_err(|_| type_err())?),
        Kind::Integer => Value::from(raw.parse::<u64>().map_err(|_| type_err())?),
        Kind::Float => {
            let x: f64 = raw.parse().map_err(|_| type_err())?;
            if !x.is_finite() {
                return Err(type_err());
            }
            Value::from(x)
        }
        Kind::Text => Value::String(raw.to_string()),
    })
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub values: BTreeMap<String, Value>,
    pub provenance: BTreeMap<String, Source>,
}

fn set_path(root: &mut Value, key: &str, v: Value) {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .expect("schema paths address objects")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut()
        .expect("schema paths address objects")
        .insert(parts[parts.len() - 1].to_string(), v);
}

fn build(values: &BTreeMap<String, Value>) -> Result<ExperimentConfig, serde_json::Error> {
    let mut root = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
    for (k, v) in values {
        set_path(&mut root, k, v.clone());
    }
    serde_json::from_value(root)
}

/// Applies `file` then `flags` over the defaults.
pub fn resolve(file: Option<(&Layer, &str)>, flags: &[(String, String)]) -> Result<Resolved, ConfigError> {
    let schema = schema();
    let mut values: BTreeMap<String, Value> = schema.iter().map(|k| (k.key.clone(), k.default.clone())).collect();
    let mut provenance: BTreeMap<String, Source> = schema.iter().map(|k| (k.key.clone(), Source::Default)).collect();
    let lookup = |key: &str| {
        schema.iter().find(|k| k.key == key).ok_or_else(|| ConfigError::UnknownKey {
            key: key.to_string(),
            suggestion: nearest_key(key),
        })
    };
    if let Some((layer, origin)) = file {
        for (k, raw, _) in &layer.entries {
            let spec = lookup(k)?;
            values.insert(k.clone(), parse_value(spec, raw)?);
            provenance.insert(k.clone(), Source::File(origin.to_string()));
        }
    }
    for (k, raw) in flags {
        let spec = lookup(k)?;
        values.insert(k.clone(), parse_value(spec, raw)?);
        provenance.insert(k.clone(), Source::Flag);
    }
    let config = match build(&values) {
        Ok(c) => c,
        Err(e) => {
            // name the offending key: the first non-default that fails alone
            let culprit = provenance
                .iter()
                .filter(|(_, s)| **s != Source::Default)
                .map(|(k, _)| k)
                .find(|k| build(&BTreeMap::from([((*k).clone(), values[*k].clone())])).is_err());
            return Err(match culprit {
                Some(k) => ConfigError::Invalid {
                    key: k.clone(),
                    msg: e.to_string(),
                },
                None => ConfigError::Semantic(e.to_string()),
            });
        }
    };
    config.validate().map_err(|e| ConfigError::Semantic(e.to_string()))?;
    Ok(Resolved {
        config,
        values,
        provenance,
    })
}

/// Resolves from an optional file path and `key=value` flag strings.
pub fn resolve_from(path: Option<&PathBuf>, flags: &[(String, String)]) -> Result<Resolved, ConfigError> {
    match path {
        Some(p) => {
            let layer = read_layer(p)?;
            resolve(Some((&layer, &p.display().to_string())), flags)
        }
        None => resolve(None, flags),
    }
}
