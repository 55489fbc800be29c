use std::collections::HashMap;
use std::path::Path;

use super::{CLS, NUM_RESERVED, PAD, RESERVED_TOKENS, SEP, UNK};
use crate::{Error, Result};

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word-level vocabulary. Ids `0..5` are `[PAD] [UNK] [CLS] [SEP] [MASK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list whose first five
    /// entries are the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens.iter().zip(RESERVED_TOKENS).any(|(t, r)| t != r)
        {
            return Err(Error::parse("vocabulary", "reserved tokens missing from ids 0..5"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::parse("vocabulary", format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a token, `[UNK]` when absent.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Keeps the `cap - 5` most frequent tokens, ties broken lexicographically.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, cap: usize) -> Result<Vocab> {
    if cap < RESERVED_TOKENS.len() {
        return Err(Error::contract(format!("vocabulary cap {cap} is smaller than the 5 reserved tokens")));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut docs = 0usize;
    for text in corpus {
        docs += 1;
        for t in tokenize(text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    if docs == 0 {
        return Err(Error::Ingest("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, _)| !RESERVED_TOKENS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cap - RESERVED_TOKENS.len());
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

/// An encoded text: `[CLS] w1 .. wn [SEP] [PAD]..` padded to `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub doc_id: String,
    pub ids: Vec<u32>,
    /// Length before padding, including `[CLS]` and `[SEP]`.
    pub true_len: usize,
}

impl TokenSeq {
    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.true_len - 1]
    }

    pub fn content_len(&self) -> usize {
        self.true_len - 2
    }

    pub fn decode(&self, vocab: &Vocab) -> Vec<String> {
        self.content().iter().map(|&id| vocab.token(id).to_string()).collect()
    }
}

pub fn encode_text(vocab: &Vocab, doc_id: &str, text: &str, max_len: usize) -> Result<TokenSeq> {
    if max_len < 3 {
        return Err(Error::contract(format!("max_len must be at least 3, got {max_len}")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(tokenize(text).iter().take(max_len - 2).map(|t| vocab.id(t)));
    ids.push(SEP);
    let true_len = ids.len();
    ids.resize(max_len, PAD);
    debug_assert!(NUM_RESERVED as usize == RESERVED_TOKENS.len());
    Ok(TokenSeq {
        doc_id: doc_id.to_string(),
        ids,
        true_len,
    })
}
