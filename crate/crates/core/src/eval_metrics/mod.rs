//! Report-generation metrics: BLEU, ROUGE-L, METEOR, CIDEr-D and clinical
//! efficacy from extracted disease labels.

mod bleu;
mod cider;
mod labels;
mod meteor;
mod rouge;

pub use bleu::{bleu, bleu_all};
pub use cider::{cider_d, CIDER_SIGMA};
pub use labels::{
    ce_scores, extract_labels, read_label_jsonl, CeScores, LabelState, LabelVector, LABEL_NAMES, NO_FINDING,
};
pub use meteor::{meteor, meteor_corpus, meteor_alignment, ALPHA, BETA, GAMMA};
pub use rouge::{lcs_len, rouge_l, rouge_l_corpus};

use serde::{Deserialize, Serialize};

use crate::error::MetricError;

/// The full metric object written by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider_d: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
}

/// Scores aligned hypothesis/reference reports. Gold labels default to the
/// labels extracted from the references.
pub fn evaluate_reports(
    hypotheses: &[String],
    references: &[String],
    gold: Option<&[LabelVector]>,
) -> Result<MetricReport, MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch(hypotheses.len(), references.len()));
    }
    if hypotheses.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let b = bleu_all(hypotheses, references)?;
    let ref_sets: Vec<Vec<String>> = references.iter().map(|r| vec![r.clone()]).collect();
    let hyp_labels: Vec<LabelVector> = hypotheses.iter().map(|h| extract_labels(h)).collect();
    let ref_labels: Vec<LabelVector> = match gold {
        Some(g) => g.to_vec(),
        None => references.iter().map(|r| extract_labels(r)).collect(),
    };
    let ce = ce_scores(&hyp_labels, &ref_labels)?;
    Ok(MetricReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge_l_corpus(hypotheses, references)?,
        meteor: meteor_corpus(hypotheses, references)?,
        cider_d: cider_d(hypotheses, &ref_sets)?,
        ce_precision: ce.precision,
        ce_recall: ce.recall,
        ce_f1: ce.f1,
    })
}

/// Counts of every n-gram of length `n`.
pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> std::collections::HashMap<&[String], usize> {
    let mut m = std::collections::HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}
