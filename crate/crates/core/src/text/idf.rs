use super::{is_reserved, TokenSeq};

/// Smoothed inverse document frequency `ln((N+1)/(df+1)) + 1` per vocabulary
/// id; reserved ids get 0.
pub fn compute_idf(corpus: &[TokenSeq], vocab_size: usize) -> Vec<f32> {
    let mut df = vec![0u32; vocab_size];
    let mut seen = vec![usize::MAX; vocab_size];
    for (d, seq) in corpus.iter().enumerate() {
        for &id in seq.content() {
            let id = id as usize;
            if seen[id] != d {
                seen[id] = d;
                df[id] += 1;
            }
        }
    }
    let n = corpus.len() as f64;
    df.iter()
        .enumerate()
        .map(|(id, &f)| {
            if is_reserved(id as u32) {
                0.0
            } else {
                (((n + 1.0) / (f as f64 + 1.0)).ln() + 1.0) as f32
            }
        })
        .collect()
}
