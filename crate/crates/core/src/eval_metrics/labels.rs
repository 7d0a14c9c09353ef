use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{MetricError, PipelineError};

pub const LABEL_NAMES: [&str; 14] = [
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
];

pub const NO_FINDING: usize = 0;

const KEYWORDS: [&[&str]; 14] = [
    &[],
    &[
        "enlarged cardiomediastinum",
        "widened mediastinum",
        "mediastinal widening",
        "mediastinum is widened",
        "cardiomediastinal silhouette is enlarged",
    ],
    &["cardiomegaly", "enlarged heart", "heart is enlarged", "heart size is enlarged"],
    &["opacity", "opacities", "opacification", "infiltrate", "infiltrates"],
    &["nodule", "nodules", "mass", "masses", "lesion", "lesions"],
    &["edema", "oedema", "vascular congestion"],
    &["consolidation", "consolidations", "consolidative"],
    &["pneumonia", "pneumonias"],
    &["atelectasis", "atelectatic", "collapse"],
    &["pneumothorax", "pneumothoraces"],
    &["effusion", "effusions"],
    &["pleural thickening", "pleural plaque", "pleural plaques", "fibrothorax"],
    &["fracture", "fractures", "fractured"],
    &[
        "tube", "tubes", "catheter", "catheters", "pacemaker", "line", "lines", "wire", "wires", "device", "devices",
        "stent", "clips",
    ],
];

const NEGATION_CUES: [&str; 7] = ["no", "not", "without", "free of", "negative for", "clear of", "resolution of"];
const NEGATION_WINDOW: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelState {
    Positive,
    Negative,
    Absent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector(pub [LabelState; 14]);

impl LabelVector {
    pub fn absent() -> Self {
        LabelVector([LabelState::Absent; 14])
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.0[i] == LabelState::Positive
    }

    /// Indices of positive labels, `No Finding` included.
    pub fn positives(&self) -> Vec<usize> {
        (0..14).filter(|&i| self.is_positive(i)).collect()
    }

    /// `1`, `0` or `null` per slot.
    pub fn to_json(&self) -> Value {
        Value::Array(
            self.0
                .iter()
                .map(|s| match s {
                    LabelState::Positive => Value::from(1),
                    LabelState::Negative => Value::from(0),
                    LabelState::Absent => Value::Null,
                })
                .collect(),
        )
    }

    pub fn from_json(v: &Value) -> Result<Self, String> {
        let arr = v.as_array().ok_or("expected a JSON array of 14 values")?;
        if arr.len() != 14 {
            return Err(format!("expected 14 label slots, got {}", arr.len()));
        }
        let mut out = [LabelState::Absent; 14];
        for (slot, x) in out.iter_mut().zip(arr) {
            *slot = match x {
                Value::Null => LabelState::Absent,
                Value::Bool(true) => LabelState::Positive,
                Value::Bool(false) => LabelState::Negative,
                Value::Number(n) if n.as_f64() == Some(1.0) => LabelState::Positive,
                Value::Number(n) if n.as_f64() == Some(0.0) => LabelState::Negative,
                Value::String(s) => match s.to_lowercase().as_str() {
                    "positive" => LabelState::Positive,
                    "negative" => LabelState::Negative,
                    "absent" => LabelState::Absent,
                    other => return Err(format!("unknown label state `{other}`")),
                },
                other => return Err(format!("unsupported label value {other}")),
            };
        }
        Ok(LabelVector(out))
    }
}

impl fmt::Display for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.positives().into_iter().map(|i| LABEL_NAMES[i]).collect();
        write!(f, "[{}]", names.join(", "))
    }
}

fn phrase_tokens(p: &str) -> Vec<&str> {
    p.split(' ').collect()
}

fn find_all(sentence: &[String], phrase: &[&str]) -> Vec<usize> {
    if phrase.is_empty() || sentence.len() < phrase.len() {
        return Vec::new();
    }
    (0..=sentence.len() - phrase.len())
        .filter(|&i| phrase.iter().enumerate().all(|(k, p)| sentence[i + k] == *p))
        .collect()
}

fn negated(sentence: &[String], start: usize) -> bool {
    let lo = start.saturating_sub(NEGATION_WINDOW);
    NEGATION_CUES.iter().any(|cue| {
        let c = phrase_tokens(cue);
        find_all(&sentence[lo..start], &c).into_iter().next().is_some()
    })
}

fn sentences(text: &str) -> Vec<Vec<String>> {
    text.to_lowercase()
        .split('.')
        .map(|s| {
            s.split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '-'))
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Rule-based keyword and negation labeler. A label mentioned both with and
/// without a negation cue counts as positive.
pub fn extract_labels(text: &str) -> LabelVector {
    let mut out = LabelVector::absent();
    for sentence in sentences(text) {
        for (label, words) in KEYWORDS.iter().enumerate().skip(1) {
            for kw in words.iter() {
                for start in find_all(&sentence, &phrase_tokens(kw)) {
                    let state = if negated(&sentence, start) {
                        LabelState::Negative
                    } else {
                        LabelState::Positive
                    };
                    if out.0[label] != LabelState::Positive {
                        out.0[label] = state;
                    }
                }
            }
        }
    }
    if (1..14).all(|i| !out.is_positive(i)) {
        out.0[NO_FINDING] = LabelState::Positive;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged precision, recall and F1 on positive cells.
pub fn ce_scores(hyp: &[LabelVector], reference: &[LabelVector]) -> Result<CeScores, MetricError> {
    if hyp.len() != reference.len() {
        return Err(MetricError::LengthMismatch(hyp.len(), reference.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (h, r) in hyp.iter().zip(reference) {
        for i in 0..14 {
            match (h.is_positive(i), r.is_positive(i)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(CeScores { precision, recall, f1 })
}

/// Reads one 14-slot label array per line. Slots may be `1`/`0`/`null`,
/// booleans, or `"positive"`/`"negative"`/`"absent"`.
pub fn read_label_jsonl(path: impl AsRef<Path>) -> Result<Vec<LabelVector>, PipelineError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{} line {}", path.display(), i + 1);
        let v: Value = serde_json::from_str(line).map_err(|e| PipelineError::format(ctx(), e.to_string()))?;
        out.push(LabelVector::from_json(&v).map_err(|m| PipelineError::format(ctx(), m))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use LabelState::*;

    fn idx(name: &str) -> usize {
        LABEL_NAMES.iter().position(|n| *n == name).unwrap()
    }

    #[test]
    fn empty_report_is_no_finding() {
        let v = extract_labels("");
        assert_eq!(v.0[NO_FINDING], Positive);
        assert!(v.0[1..].iter().all(|s| *s == Absent));
    }

    #[test]
    fn negated_effusion() {
        let v = extract_labels("no pleural effusion.");
        assert_eq!(v.0[idx("Pleural Effusion")], Negative);
        assert_eq!(v.0[NO_FINDING], Positive);
        let v = extract_labels("No pleural effusion or pneumothorax .");
        assert_eq!(v.0[idx("Pneumothorax")], Negative);
    }

    #[test]
    fn positive_findings() {
        let v = extract_labels("small bilateral pleural effusions. mild cardiomegaly.");
        assert_eq!(v.0[idx("Pleural Effusion")], Positive);
        assert_eq!(v.0[idx("Cardiomegaly")], Positive);
        assert_eq!(v.0[NO_FINDING], Absent);
    }

    #[test]
    fn negation_scope() {
        // Cue six tokens before the match is out of range.
        let v = extract_labels("no change in the size of the effusion");
        assert_eq!(v.0[idx("Pleural Effusion")], Positive);
        // Cues do not cross sentence boundaries.
        let v = extract_labels("no acute process. effusion");
        assert_eq!(v.0[idx("Pleural Effusion")], Positive);
        let v = extract_labels("free of edema, and negative for pneumonia");
        assert_eq!(v.0[idx("Edema")], Negative);
        assert_eq!(v.0[idx("Pneumonia")], Negative);
        let v = extract_labels("no effusion. left effusion.");
        assert_eq!(v.0[idx("Pleural Effusion")], Positive);
    }

    #[test]
    fn ce_hand_cases() {
        let mut a = LabelVector::absent();
        a.0[2] = Positive;
        let mut b = LabelVector::absent();
        b.0[3] = Positive;
        let s = ce_scores(&[a, a], &[a, a]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = ce_scores(&[LabelVector::absent()], &[a]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        // TP = 1 (a), FP = 1 (b in hyp), FN = 1 (a in ref).
        let s = ce_scores(&[a, b], &[a, a]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert_eq!(ce_scores(&[a], &[]).unwrap_err(), MetricError::LengthMismatch(1, 0));
    }

    #[test]
    fn json_round_trip() {
        let v = extract_labels("mild cardiomegaly. no pneumothorax.");
        assert_eq!(LabelVector::from_json(&v.to_json()).unwrap(), v);
        let s: Value = serde_json::from_str(r#"["positive",0,null,1,true,false,null,null,null,null,null,null,null,null]"#).unwrap();
        let l = LabelVector::from_json(&s).unwrap();
        assert_eq!(l.0[0], Positive);
        assert_eq!(l.0[5], Negative);
        assert!(LabelVector::from_json(&serde_json::json!([1, 0])).is_err());
        assert!(LabelVector::from_json(&Value::from(vec![2; 14])).is_err());
    }

    #[test]
    fn reads_label_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gold.jsonl");
        fs::write(&p, "[1,null,null,null,null,null,null,null,null,null,0,null,null,null]\n\n").unwrap();
        let v = read_label_jsonl(&p).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].0[10], Negative);
        fs::write(&p, "[1]\n").unwrap();
        assert!(read_label_jsonl(&p).unwrap_err().to_string().contains("line 1"));
    }
}
