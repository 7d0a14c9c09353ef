use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::MetricError;
use crate::text::tokens;

use super::ngram_counts;

pub const CIDER_SIGMA: f64 = 6.0;

type Vector<'a> = BTreeMap<&'a [String], f64>;

fn tfidf<'a>(toks: &'a [String], n: usize, df: &HashMap<Vec<String>, usize>, log_n: f64) -> (Vector<'a>, f64) {
    let v: Vector<'a> = ngram_counts(toks, n)
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 * (log_n - d.ln()))
        })
        .collect();
    let norm: f64 = v.values().map(|w| w * w).sum();
    (v, norm.sqrt())
}

/// CIDEr-D with clipped TF-IDF vectors and a Gaussian length penalty.
/// Document frequencies count each reference set once.
pub fn cider_d(hypotheses: &[String], reference_sets: &[Vec<String>]) -> Result<f64, MetricError> {
    if hypotheses.len() != reference_sets.len() {
        return Err(MetricError::LengthMismatch(hypotheses.len(), reference_sets.len()));
    }
    if hypotheses.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let ref_toks: Vec<Vec<Vec<String>>> = reference_sets
        .iter()
        .map(|set| set.iter().map(|r| tokens(r)).collect())
        .collect();
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for set in &ref_toks {
        let mut seen: HashSet<&[String]> = HashSet::new();
        for r in set {
            for n in 1..=4 {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    let log_n = (reference_sets.len() as f64).ln();
    let mut total = 0.0;
    for (h, set) in hypotheses.iter().zip(&ref_toks) {
        if set.is_empty() {
            continue;
        }
        let ht = tokens(h);
        let mut score = 0.0;
        for r in set {
            let delta = ht.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            let mut per_order = 0.0;
            for n in 1..=4 {
                let (vh, nh) = tfidf(&ht, n, &df, log_n);
                let (vr, nr) = tfidf(r, n, &df, log_n);
                if nh == 0.0 || nr == 0.0 {
                    continue;
                }
                let dot: f64 = vh
                    .iter()
                    .filter_map(|(g, &a)| vr.get(g).map(|&b| a.min(b) * b))
                    .sum();
                per_order += dot / (nh * nr) * penalty;
            }
            score += per_order / 4.0;
        }
        total += 10.0 * score / set.len() as f64;
    }
    Ok(total / hypotheses.len() as f64)
}
