//! Transformer encoder with `[CLS]` pooling, the MLP vocabulary decoder and
//! the tied masked-language-model head.
//!
//! Forward functions are generic over the element type so the same graph
//! runs in `f32` for training and in `f64` for gradient probes.

use cpdae_tensor::{Real, Tape, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::text::{TokenSeq, PAD};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive floor used when normalizing sigmoid probabilities.
pub const NORMALIZE_EPS: f64 = 1e-12;
const EMBEDDING_STD: f64 = 0.02;
const INFERENCE_BATCH: usize = 32;

/// How decoded probabilities become a distribution over the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `(ẑ + ε) / Σ(ẑ + ε)`
    Sum,
    /// softmax of the raw logits
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub normalize: Normalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            vocab_size: 8192,
            max_len: 128,
            dropout: 0.1,
            normalize: Normalization::Sum,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("model.{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::contract(format!(
                "model.hidden {} is not divisible by model.heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("model.dropout {} must lie in [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { entries: Vec::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, t)) => *t = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|(n, _)| keep(n));
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }
}

/// Parameter names bound to tape leaves.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    /// Wraps leaves that were created elsewhere, e.g. by a gradient probe.
    pub fn from_vars(vars: Vec<(String, Var)>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not present")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

pub mod names {
    pub const TOKEN_EMB: &str = "embeddings.token";
    pub const POS_EMB: &str = "embeddings.position";
    pub const EMB_LN_GAIN: &str = "embeddings.ln.gain";
    pub const EMB_LN_BIAS: &str = "embeddings.ln.bias";
    pub const DEC_FFN1_W: &str = "decoder.ffn1.weight";
    pub const DEC_FFN1_B: &str = "decoder.ffn1.bias";
    pub const DEC_LN_GAIN: &str = "decoder.ln.gain";
    pub const DEC_LN_BIAS: &str = "decoder.ln.bias";
    pub const DEC_FFN2_W: &str = "decoder.ffn2.weight";
    pub const DEC_FFN2_B: &str = "decoder.ffn2.bias";
    pub const MLM_BIAS: &str = "mlm.bias";
    pub const DECODER_PREFIX: &str = "decoder.";
    pub const MLM_PREFIX: &str = "mlm.";

    pub fn layer(l: usize, rest: &str) -> String {
        format!("encoder.{l}.{rest}")
    }
}

/// Random initialization: embeddings ~ N(0, 0.02²), projection weights
/// ~ N(0, 1/fan_in), biases 0, layer-norm gains 1.
pub fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let normal = Normal::new(0.0f64, 1.0).expect("valid std");
    let mut randn = |shape: Vec<usize>, std: f64| Tensor::from_fn(shape, |_| (normal.sample(rng) * std) as f32);
    // LeCun normal: keeps pre-activations at unit scale for any width
    let fan_in = |n: usize| 1.0 / (n as f64).sqrt();
    let (h, v, f) = (cfg.hidden, cfg.vocab_size, cfg.hidden * cfg.ffn_mult);
    let mut p = ParamSet::default();
    p.insert(names::TOKEN_EMB, randn(vec![v, h], EMBEDDING_STD));
    p.insert(names::POS_EMB, randn(vec![cfg.max_len, h], EMBEDDING_STD));
    p.insert(names::EMB_LN_GAIN, Tensor::ones([h]));
    p.insert(names::EMB_LN_BIAS, Tensor::zeros([h]));
    for l in 0..cfg.layers {
        for proj in ["q", "k", "v", "o"] {
            p.insert(names::layer(l, &format!("attn.{proj}.weight")), randn(vec![h, h], fan_in(h)));
            p.insert(names::layer(l, &format!("attn.{proj}.bias")), Tensor::zeros([h]));
        }
        p.insert(names::layer(l, "attn.ln.gain"), Tensor::ones([h]));
        p.insert(names::layer(l, "attn.ln.bias"), Tensor::zeros([h]));
        p.insert(names::layer(l, "ffn.in.weight"), randn(vec![h, f], fan_in(h)));
        p.insert(names::layer(l, "ffn.in.bias"), Tensor::zeros([f]));
        p.insert(names::layer(l, "ffn.out.weight"), randn(vec![f, h], fan_in(f)));
        p.insert(names::layer(l, "ffn.out.bias"), Tensor::zeros([h]));
        p.insert(names::layer(l, "ffn.ln.gain"), Tensor::ones([h]));
        p.insert(names::layer(l, "ffn.ln.bias"), Tensor::zeros([h]));
    }
    p.insert(names::DEC_FFN1_W, randn(vec![h, h], fan_in(h)));
    p.insert(names::DEC_FFN1_B, Tensor::zeros([h]));
    p.insert(names::DEC_LN_GAIN, Tensor::ones([h]));
    p.insert(names::DEC_LN_BIAS, Tensor::zeros([h]));
    p.insert(names::DEC_FFN2_W, randn(vec![h, v], fan_in(h)));
    p.insert(names::DEC_FFN2_B, Tensor::zeros([v]));
    p.insert(names::MLM_BIAS, Tensor::zeros([v]));
    Ok(p)
}

/// Output of [`encode`].
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[batch × H]` last-layer state at position 0.
    pub cls: Var,
    /// `[(batch · seq_len) × H]` all last-layer states.
    pub hidden: Var,
    pub batch: usize,
    pub seq_len: usize,
}

fn linear<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, weight: &str, bias: &str) -> Result<Var> {
    let y = tape.matmul(x, p.var(weight)?)?;
    Ok(tape.add_row(y, p.var(bias)?)?)
}

fn dropout<T: Real>(tape: &mut Tape<T>, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let scale = T::lit(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(tape.shape(x).to_vec(), |_| {
        if rng.random::<f32>() < rate as f32 {
            T::zero()
        } else {
            scale
        }
    });
    Ok(tape.mul_const(x, mask)?)
}

/// Runs the transformer over equally long id rows.
///
/// Attention never reads `[PAD]` keys. `dropout_rng` enables dropout.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &Bound,
    batch: &[&[u32]],
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Encoded> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::contract("encode needs at least one sequence"));
    }
    let len = batch[0].len();
    if len == 0 || len > cfg.max_len {
        return Err(Error::contract(format!("sequence length {len} outside 1..={}", cfg.max_len)));
    }
    let mut ids = Vec::with_capacity(b * len);
    let mut keep = Vec::with_capacity(b * len);
    for (s, row) in batch.iter().enumerate() {
        if row.len() != len {
            return Err(Error::contract(format!(
                "sequence {s} has length {} but the batch is padded to {len}",
                row.len()
            )));
        }
        for (pos, &id) in row.iter().enumerate() {
            if id as usize >= cfg.vocab_size {
                return Err(Error::Encoding {
                    sequence: s,
                    position: pos,
                    id,
                    vocab: cfg.vocab_size,
                });
            }
            ids.push(id as usize);
            keep.push(id != PAD);
        }
    }
    let (h, heads, d) = (cfg.hidden, cfg.heads, cfg.head_dim());

    let tok = tape.gather(p.var(names::TOKEN_EMB)?, &ids)?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..len).collect();
    let pos = tape.gather(p.var(names::POS_EMB)?, &positions)?;
    let x = tape.add(tok, pos)?;
    let x = tape.layer_norm(x, p.var(names::EMB_LN_GAIN)?, p.var(names::EMB_LN_BIAS)?, T::lit(LAYER_NORM_EPS))?;
    let mut x = dropout(tape, x, cfg.dropout, dropout_rng.as_deref_mut())?;

    let split_heads = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let v = tape.reshape(v, &[b, len, heads, d])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        Ok(tape.reshape(v, &[b * heads, len, d])?)
    };
    let scale = T::lit(1.0 / (d as f64).sqrt());
    for l in 0..cfg.layers {
        let w = |s: &str| names::layer(l, s);
        let q = linear(tape, p, x, &w("attn.q.weight"), &w("attn.q.bias"))?;
        let k = linear(tape, p, x, &w("attn.k.weight"), &w("attn.k.bias"))?;
        let v = linear(tape, p, x, &w("attn.v.weight"), &w("attn.v.bias"))?;
        let (q, k, v) = (split_heads(tape, q)?, split_heads(tape, k)?, split_heads(tape, v)?);
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.softmax_masked(scores, Some((&keep, heads * len)))?;
        let ctx = tape.batch_matmul(probs, v, false)?;
        let ctx = tape.reshape(ctx, &[b, heads, len, d])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * len, h])?;
        let attn = linear(tape, p, ctx, &w("attn.o.weight"), &w("attn.o.bias"))?;
        let attn = dropout(tape, attn, cfg.dropout, dropout_rng.as_deref_mut())?;
        let res = tape.add(x, attn)?;
        x = tape.layer_norm(res, p.var(&w("attn.ln.gain"))?, p.var(&w("attn.ln.bias"))?, T::lit(LAYER_NORM_EPS))?;

        let f = linear(tape, p, x, &w("ffn.in.weight"), &w("ffn.in.bias"))?;
        let f = tape.gelu(f)?;
        let f = linear(tape, p, f, &w("ffn.out.weight"), &w("ffn.out.bias"))?;
        let f = dropout(tape, f, cfg.dropout, dropout_rng.as_deref_mut())?;
        let res = tape.add(x, f)?;
        x = tape.layer_norm(res, p.var(&w("ffn.ln.gain"))?, p.var(&w("ffn.ln.bias"))?, T::lit(LAYER_NORM_EPS))?;
    }
    let cls_rows: Vec<usize> = (0..b).map(|i| i * len).collect();
    let cls = tape.select_rows(x, &cls_rows)?;
    Ok(Encoded {
        cls,
        hidden: x,
        batch: b,
        seq_len: len,
    })
}

/// `z = FFN₂(LayerNorm(gelu(FFN₁(h_cls))))`, a function of `h_cls` alone.
pub fn decode<T: Real>(tape: &mut Tape<T>, p: &Bound, h_cls: Var) -> Result<Var> {
    let w1 = p.var(names::DEC_FFN1_W)?;
    let width = tape.shape(w1)[0];
    if tape.shape(h_cls).last() != Some(&width) {
        return Err(cpdae_tensor::TensorError::shape("decode", tape.shape(h_cls), tape.shape(w1)).into());
    }
    let y = linear(tape, p, h_cls, names::DEC_FFN1_W, names::DEC_FFN1_B)?;
    let y = tape.gelu(y)?;
    let y = tape.layer_norm(y, p.var(names::DEC_LN_GAIN)?, p.var(names::DEC_LN_BIAS)?, T::lit(LAYER_NORM_EPS))?;
    linear(tape, p, y, names::DEC_FFN2_W, names::DEC_FFN2_B)
}

/// Per-word appearance probabilities `ẑ = sigmoid(z)`.
pub fn vocab_probs<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    Ok(tape.sigmoid(z)?)
}

/// The normalized word distribution `z̃`.
pub fn normalize_dist<T: Real>(tape: &mut Tape<T>, mode: Normalization, z: Var, z_hat: Var) -> Result<Var> {
    Ok(match mode {
        Normalization::Sum => tape.normalize_rows(z_hat, T::lit(NORMALIZE_EPS))?,
        Normalization::Softmax => tape.softmax(z)?,
    })
}

/// Vocabulary logits at `(sequence, position)` pairs through the tied
/// embedding projection.
pub fn mlm_logits<T: Real>(tape: &mut Tape<T>, p: &Bound, enc: &Encoded, positions: &[(usize, usize)]) -> Result<Var> {
    let mut rows = Vec::with_capacity(positions.len());
    for &(s, pos) in positions {
        if s >= enc.batch || pos >= enc.seq_len {
            return Err(Error::contract(format!(
                "masked position ({s}, {pos}) outside a batch of {} x {}",
                enc.batch, enc.seq_len
            )));
        }
        rows.push(s * enc.seq_len + pos);
    }
    let sel = tape.select_rows(enc.hidden, &rows)?;
    let logits = tape.matmul_nt(sel, p.var(names::TOKEN_EMB)?)?;
    Ok(tape.add_row(logits, p.var(names::MLM_BIAS)?)?)
}

/// Longest unpadded length in a batch; columns past it are all `[PAD]`.
pub fn batch_len(seqs: &[&TokenSeq]) -> usize {
    seqs.iter().map(|s| s.true_len).max().unwrap_or(1)
}

/// Parameters plus architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Model { config, params })
    }

    pub fn has_decoder(&self) -> bool {
        self.params.names().any(|n| n.starts_with(names::DECODER_PREFIX))
    }

    /// Drops the decoder and MLM head, leaving the shared retrieval encoder.
    pub fn into_encoder(mut self) -> Self {
        self.params
            .retain(|n| !n.starts_with(names::DECODER_PREFIX) && !n.starts_with(names::MLM_PREFIX));
        self
    }

    fn chunks<'a>(seqs: &'a [TokenSeq]) -> impl Iterator<Item = Vec<&'a [u32]>> + 'a {
        seqs.chunks(INFERENCE_BATCH).map(|chunk| {
            let refs: Vec<&TokenSeq> = chunk.iter().collect();
            let len = batch_len(&refs);
            chunk.iter().map(|s| &s.ids[..len]).collect()
        })
    }

    /// `[CLS]` embeddings, one row per sequence, dropout off.
    pub fn embed(&self, seqs: &[TokenSeq]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(seqs.len() * self.config.hidden);
        for rows in Self::chunks(seqs) {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let enc = encode(&mut tape, &self.config, &p, &rows, None)?;
            data.extend_from_slice(tape.value(enc.cls).data());
        }
        Ok(Tensor::new(vec![seqs.len(), self.config.hidden], data)?)
    }

    /// Normalized decoded word distributions `z̃`, one row per sequence.
    pub fn word_distributions(&self, seqs: &[TokenSeq]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(seqs.len() * self.config.vocab_size);
        for rows in Self::chunks(seqs) {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let enc = encode(&mut tape, &self.config, &p, &rows, None)?;
            let z = decode(&mut tape, &p, enc.cls)?;
            let z_hat = vocab_probs(&mut tape, z)?;
            let dist = normalize_dist(&mut tape, self.config.normalize, z, z_hat)?;
            data.extend_from_slice(tape.value(dist).data());
        }
        Ok(Tensor::new(vec![seqs.len(), self.config.vocab_size], data)?)
    }
}
