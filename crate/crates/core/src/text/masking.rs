use rand::seq::index::sample;
use rand::Rng;

use super::{TokenSeq, MASK, NUM_RESERVED};
use crate::{Error, Result};

/// A masked copy of a [`TokenSeq`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedView {
    pub ids: Vec<u32>,
    /// Sorted indices into `ids` that were selected for prediction.
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`.
    pub mlm_labels: Vec<u32>,
}

impl MaskedView {
    /// Undoes the masking.
    pub fn restore(&self) -> Vec<u32> {
        let mut ids = self.ids.clone();
        for (&p, &l) in self.mask_positions.iter().zip(&self.mlm_labels) {
            ids[p] = l;
        }
        ids
    }
}

/// `max(1, round(rate · content_len))`, capped at the content length.
pub fn mask_count(rate: f64, content_len: usize) -> usize {
    ((rate * content_len as f64).round() as usize).max(1).min(content_len)
}

/// Selects content positions and applies the 80/10/10 replacement rule:
/// `[MASK]`, a random non-reserved token, or the original token.
pub fn mask_once(seq: &TokenSeq, rate: f64, vocab_size: usize, rng: &mut impl Rng) -> Result<MaskedView> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::contract(format!("mask rate must lie in (0,1), got {rate}")));
    }
    let content_len = seq.content_len();
    if content_len == 0 {
        return Err(Error::contract(format!("document `{}` has no content tokens to mask", seq.doc_id)));
    }
    if vocab_size <= NUM_RESERVED as usize {
        return Err(Error::contract("vocabulary has no ordinary tokens"));
    }
    let count = mask_count(rate, content_len);
    let mut positions: Vec<usize> = sample(rng, content_len, count).into_iter().map(|i| i + 1).collect();
    positions.sort_unstable();
    let mut ids = seq.ids.clone();
    let mut labels = Vec::with_capacity(count);
    for &p in &positions {
        labels.push(ids[p]);
        let roll: f64 = rng.random();
        if roll < 0.8 {
            ids[p] = MASK;
        } else if roll < 0.9 {
            ids[p] = rng.random_range(NUM_RESERVED..vocab_size as u32);
        }
    }
    Ok(MaskedView {
        ids,
        mask_positions: positions,
        mlm_labels: labels,
    })
}

/// Two independently masked views of one sequence.
pub fn mask_twice(
    seq: &TokenSeq,
    rate: f64,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<(MaskedView, MaskedView)> {
    Ok((mask_once(seq, rate, vocab_size, rng)?, mask_once(seq, rate, vocab_size, rng)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::text::{CLS, PAD, SEP};

    fn seq(content: usize, max_len: usize) -> TokenSeq {
        let mut ids = vec![CLS];
        ids.extend((0..content as u32).map(|i| 10 + i));
        ids.push(SEP);
        let true_len = ids.len();
        ids.resize(max_len, PAD);
        TokenSeq {
            doc_id: "d".into(),
            ids,
            true_len,
        }
    }

    #[test]
    fn mask_counts() {
        let mut r = rng::stream(0, rng::MASKING);
        let (a, b) = mask_twice(&seq(20, 30), 0.15, 100, &mut r).unwrap();
        assert_eq!(a.mask_positions.len(), 3);
        assert_eq!(b.mask_positions.len(), 3);
        let (a, _) = mask_twice(&seq(1, 8), 0.15, 100, &mut r).unwrap();
        assert_eq!(a.mask_positions, vec![1]);
    }

    #[test]
    fn special_positions_untouched_and_restorable() {
        let mut r = rng::stream(3, rng::MASKING);
        let s = seq(12, 20);
        for _ in 0..200 {
            let v = mask_once(&s, 0.3, 50, &mut r).unwrap();
            assert_eq!(v.ids[0], CLS);
            assert_eq!(v.ids[13], SEP);
            assert!(v.ids[14..].iter().all(|&t| t == PAD));
            assert!(v.mask_positions.iter().all(|&p| (1..13).contains(&p)));
            assert_eq!(v.restore(), s.ids);
        }
    }

    #[test]
    fn replacement_frequencies_follow_bert_rule() {
        let mut r = rng::stream(9, rng::MASKING);
        let s = seq(20, 24);
        let (mut masked, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let v = mask_once(&s, 0.15, 1000, &mut r).unwrap();
            total += v.mask_positions.len();
            masked += v.mask_positions.iter().filter(|&&p| v.ids[p] == MASK).count();
        }
        let frac = masked as f64 / total as f64;
        assert!((frac - 0.8).abs() < 0.02, "mask fraction {frac}");
    }

    #[test]
    fn sibling_views_differ() {
        let mut r = rng::stream(4, rng::MASKING);
        let differ_rate = |content: usize, r: &mut rng::Rng| {
            let s = seq(content, content + 2);
            let n = (0..1000)
                .filter(|_| {
                    let (a, b) = mask_twice(&s, 0.15, 100, r).unwrap();
                    a.mask_positions != b.mask_positions
                })
                .count();
            n as f64 / 1000.0
        };
        assert!(differ_rate(20, &mut r) > 0.99);
        // two positions out of ten collide with probability 1/45
        let short = differ_rate(10, &mut r);
        let expected = 44.0 / 45.0;
        let sigma = (expected * (1.0 - expected) / 1000.0f64).sqrt();
        assert!((short - expected).abs() < 4.0 * sigma, "{short}");
    }

    #[test]
    fn rejects_empty_content_and_bad_rate() {
        let mut r = rng::stream(0, rng::MASKING);
        assert!(mask_once(&seq(0, 4), 0.15, 100, &mut r).is_err());
        assert!(mask_once(&seq(4, 8), 1.0, 100, &mut r).is_err());
    }
}
