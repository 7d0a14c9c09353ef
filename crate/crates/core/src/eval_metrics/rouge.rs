use crate::error::MetricError;
use crate::text::tokens;

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Balanced LCS F-measure over case-folded tokens.
pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    let (h, r) = (tokens(hyp), tokens(reference));
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&h, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    // = 2PR/(P+R)
    2.0 * l / (h.len() + r.len()) as f64
}

/// Mean sentence-level ROUGE-L.
pub fn rouge_l_corpus(hypotheses: &[String], references: &[String]) -> Result<f64, MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch(hypotheses.len(), references.len()));
    }
    if hypotheses.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let sum: f64 = hypotheses.iter().zip(references).map(|(h, r)| rouge_l(h, r)).sum();
    Ok(sum / hypotheses.len() as f64)
}
