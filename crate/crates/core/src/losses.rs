//! Training objectives.
//!
//! Tape-level losses are generic over the element type so they can be
//! gradient-checked in `f64`; the scalar helpers at the bottom
//! ([`js_divergence`], [`surrogate_term`]) are plain `f64` references.

use cpdae_tensor::{Real, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default weight of the contrastive term in the total loss.
pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Default temperature for the word-distribution contrastive loss.
pub const DEFAULT_TAU_DIST: f64 = 1.0;
/// Default temperature for the representation-space variant.
pub const DEFAULT_TAU_REPR: f64 = 0.05;

/// Which views act as anchors in the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClAnchors {
    /// Every one of the `2m` views.
    #[default]
    Symmetric,
    /// Only the first view of each pair.
    FirstView,
}

impl ClAnchors {
    fn indices(self, views: usize) -> Vec<usize> {
        match self {
            ClAnchors::Symmetric => (0..views).collect(),
            ClAnchors::FirstView => (0..views).step_by(2).collect(),
        }
    }
}

/// Mean binary cross-entropy between `z_hat` and the 0/1 targets `y`.
pub fn reconstruction_loss<T: Real>(tape: &mut Tape<T>, z_hat: Var, y: &Tensor<T>) -> Result<Var> {
    let terms = tape.bce(z_hat, y)?;
    Ok(tape.mean(terms)?)
}

/// Reconstruction loss with per-token weights, rescaled so the weights have
/// mean 1.
///
/// Uniform weights normalize to exactly 1.0, which makes this bit-identical
/// to [`reconstruction_loss`].
pub fn idf_reconstruction_loss<T: Real>(tape: &mut Tape<T>, z_hat: Var, y: &Tensor<T>, idf: &[T]) -> Result<Var> {
    let shape = tape.shape(z_hat).to_vec();
    let v = *shape.last().unwrap_or(&0);
    if idf.len() != v {
        return Err(TensorError::shape("idf_reconstruction_loss", &shape, &[idf.len()]).into());
    }
    if idf.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
        return Err(Error::contract("idf weights must be finite and non-negative"));
    }
    let mean = idf.iter().map(|w| w.as_f64()).sum::<f64>() / v as f64;
    if mean <= 0.0 {
        return Err(Error::contract("idf weights are all zero"));
    }
    let weights: Vec<T> = idf.iter().map(|w| T::lit(w.as_f64() / mean)).collect();
    let rows = tape.value(z_hat).rows();
    let mask = Tensor::new(shape, weights.repeat(rows))?;
    let terms = tape.bce(z_hat, y)?;
    let weighted = tape.mul_const(terms, mask)?;
    Ok(tape.mean(weighted)?)
}

fn sibling_positives(views: usize) -> Result<Vec<usize>> {
    if views % 2 != 0 {
        return Err(Error::contract(format!("expected sibling pairs but got {views} views")));
    }
    if views < 4 {
        return Err(Error::contract("contrastive loss needs in-batch negatives (at least 2 texts)"));
    }
    Ok((0..views).map(|i| i ^ 1).collect())
}

/// NT-Xent over `z_tilde[2m × |V|]` with logits `-JS/tau`. Rows `2i` and
/// `2i+1` are the two views of text `i`.
pub fn contrastive_loss_dist<T: Real>(tape: &mut Tape<T>, z_tilde: Var, tau: f64, anchors: ClAnchors) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let views = tape.value(z_tilde).rows();
    let positives = sibling_positives(views)?;
    let js = tape.pairwise_js(z_tilde)?;
    let logits = tape.scale(js, T::lit(-1.0 / tau))?;
    Ok(tape.nt_xent(logits, &positives, &anchors.indices(views))?)
}

/// NT-Xent over `[CLS]` vectors with cosine-similarity logits.
pub fn contrastive_loss_repr<T: Real>(tape: &mut Tape<T>, h: Var, tau: f64, anchors: ClAnchors) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let views = tape.value(h).rows();
    let positives = sibling_positives(views)?;
    let unit = tape.l2_normalize_rows(h).map_err(|e| match e {
        TensorError::Contract { .. } => Error::contract("contrastive_loss_repr: zero-norm representation"),
        other => other.into(),
    })?;
    let cos = tape.matmul_nt(unit, unit)?;
    let logits = tape.scale(cos, T::lit(1.0 / tau))?;
    Ok(tape.nt_xent(logits, &positives, &anchors.indices(views))?)
}

/// Result of [`mlm_loss`]; `empty` is the warning flag for a batch without
/// masked positions.
#[derive(Debug, Clone, Copy)]
pub struct MlmLoss {
    pub loss: Var,
    pub empty: bool,
}

/// Mean cross-entropy over masked positions. `logits` may be `None` when
/// there is nothing to predict; the loss is then a constant 0.
pub fn mlm_loss<T: Real>(tape: &mut Tape<T>, logits: Option<Var>, labels: &[usize]) -> Result<MlmLoss> {
    match logits {
        Some(logits) if !labels.is_empty() => Ok(MlmLoss {
            loss: tape.cross_entropy(logits, labels)?,
            empty: false,
        }),
        _ => Ok(MlmLoss {
            loss: tape.constant(Tensor::scalar(T::zero())),
            empty: true,
        }),
    }
}

/// Per-step loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cl: f64,
    pub mlm: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.rec, self.cl, self.mlm, self.total].iter().all(|v| v.is_finite())
    }
}

/// `total = rec + mlm + λ·cl`.
pub fn total_loss(rec: f64, cl: f64, mlm: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        rec,
        cl,
        mlm,
        total: rec + mlm + lambda * cl,
        lambda,
    }
}

/// Tape version of [`total_loss`]. Without a contrastive term the graph is
/// exactly `rec + mlm`.
pub fn combine<T: Real>(tape: &mut Tape<T>, rec: Var, mlm: Var, cl: Option<Var>, lambda: f64) -> Result<Var> {
    let base = tape.add(rec, mlm)?;
    match cl {
        Some(cl) => {
            let weighted = tape.scale(cl, T::lit(lambda))?;
            Ok(tape.add(base, weighted)?)
        }
        None => Ok(base),
    }
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence (natural log) between two distributions.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::contract(format!(
            "js_divergence needs equal non-empty lengths, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, d) in [("p", p), ("q", q)] {
        let sum: f64 = d.iter().sum();
        if d.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "{name} is not a probability distribution (sum {sum})"
            )));
        }
    }
    let js: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (xlogx(a) + xlogx(b)) - xlogx(m)
        })
        .sum();
    Ok(js.max(0.0))
}

/// Per-coordinate term `g(p, q) = -p ln p - q ln q + (p+q) ln(p+q)` of the
/// unnormalized negative JS expansion.
///
/// Evaluated as `p ln((p+q)/p) + q ln((p+q)/q)`, which gives the closed
/// forms exactly: `2p ln 2` when `p == q` and `0` when either side is 0.
pub fn surrogate_term(p: f64, q: f64) -> f64 {
    let s = p + q;
    let part = |a: f64| if a == 0.0 { 0.0 } else { a * (s / a).ln() };
    part(p) + part(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        assert_eq!(ClAnchors::Symmetric.indices(4), vec![0, 1, 2, 3]);
        assert_eq!(ClAnchors::FirstView.indices(4), vec![0, 2]);
    }

    #[test]
    fn too_few_texts() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::full([2, 3], 1.0 / 3.0));
        let err = contrastive_loss_dist(&mut tape, z, 1.0, ClAnchors::Symmetric).unwrap_err();
        assert!(err.to_string().contains("in-batch negatives"));
    }
}
