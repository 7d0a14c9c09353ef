//! Scoring generated reports against a corpus or against text files.

use std::fs;
use std::path::Path;

use crate::error::PipelineError;
use crate::eval_metrics::{evaluate_reports, read_label_jsonl, MetricReport};
use crate::params::ParamStore;

use super::corpus::ReportPair;
use super::model::Model;

/// Greedy reports for every pair, scored against the references and the
/// corpus gold labels.
pub fn evaluate_model(model: &Model, store: &ParamStore, pairs: &[ReportPair]) -> Result<(MetricReport, Vec<String>), PipelineError> {
    let images: Vec<_> = pairs.iter().map(|p| &p.image.pixels).collect();
    let hyps = model.generate_reports(store, &images)?;
    let refs: Vec<String> = pairs.iter().map(|p| p.report.clone()).collect();
    let gold: Vec<_> = pairs.iter().map(|p| p.gold_labels).collect();
    Ok((evaluate_reports(&hyps, &refs, Some(&gold))?, hyps))
}

fn read_lines(path: &Path) -> Result<Vec<String>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// One report per line in each file; gold labels are optional JSONL.
pub fn evaluate_files(hyp: impl AsRef<Path>, reference: impl AsRef<Path>, gold: Option<&Path>) -> Result<MetricReport, PipelineError> {
    let hyps = read_lines(hyp.as_ref())?;
    let refs = read_lines(reference.as_ref())?;
    let gold = gold.map(read_label_jsonl).transpose()?;
    if let Some(g) = &gold {
        if g.len() != refs.len() {
            return Err(PipelineError::format(
                "gold labels",
                format!("{} label lines for {} reference lines", g.len(), refs.len()),
            ));
        }
    }
    Ok(evaluate_reports(&hyps, &refs, gold.as_deref())?)
}
