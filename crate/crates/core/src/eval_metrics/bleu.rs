use crate::error::MetricError;
use crate::text::tokens;

use super::ngram_counts;

/// Corpus BLEU-`n` with uniform weights and no smoothing.
pub fn bleu(hypotheses: &[String], references: &[String], n: usize) -> Result<f64, MetricError> {
    if !(1..=4).contains(&n) {
        return Err(MetricError::BadOrder(n));
    }
    Ok(bleu_all(hypotheses, references)?[n - 1])
}

/// BLEU-1 through BLEU-4 from one pass over the corpus.
pub fn bleu_all(hypotheses: &[String], references: &[String]) -> Result<[f64; 4], MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch(hypotheses.len(), references.len()));
    }
    if hypotheses.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        let (ht, rt) = (tokens(h), tokens(rf));
        c += ht.len();
        r += rt.len();
        for k in 0..4 {
            let hc = ngram_counts(&ht, k + 1);
            let rc = ngram_counts(&rt, k + 1);
            for (g, &cnt) in &hc {
                matched[k] += cnt.min(rc.get(g).copied().unwrap_or(0));
                total[k] += cnt;
            }
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let mut out = [0.0; 4];
    let mut log_sum = 0.0;
    let mut zero = false;
    for k in 0..4 {
        if matched[k] == 0 {
            zero = true;
        } else {
            log_sum += (matched[k] as f64 / total[k] as f64).ln();
        }
        out[k] = if zero { 0.0 } else { bp * (log_sum / (k + 1) as f64).exp() };
    }
    Ok(out)
}
