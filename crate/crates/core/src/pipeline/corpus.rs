//! Report pairs on disk: one JSON record per line, images and activation
//! maps as PGM files relative to the corpus file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::PipelineError;
use crate::eval_metrics::LabelVector;
use crate::vision_path::{read_pgm, ImageGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub label_index: usize,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub image: String,
    pub report: String,
    pub labels: serde_json::Value,
    #[serde(default)]
    pub activation_maps: Vec<MapRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportPair {
    pub image: ImageGrid,
    pub report: String,
    pub gold_labels: LabelVector,
    /// `(label_index, map)` at patch-grid resolution.
    pub activation_maps: Vec<(usize, Matrix)>,
}

pub fn write_records(path: impl AsRef<Path>, records: &[PairRecord]) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| PipelineError::format(path.display().to_string(), e.to_string()))?;
        out.write_all(b"\n").map_err(|e| PipelineError::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| PipelineError::io(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<PairRecord>, PipelineError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{} line {}", path.display(), i + 1);
        let rec: PairRecord = serde_json::from_str(line).map_err(|e| PipelineError::format(ctx(), e.to_string()))?;
        if rec.report.trim().is_empty() {
            return Err(PipelineError::format(ctx(), "report is empty"));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reads the corpus and every image and activation map it references.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ReportPair>, PipelineError> {
    let path = path.as_ref();
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let records = read_records(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let gold_labels = LabelVector::from_json(&rec.labels)
            .map_err(|m| PipelineError::format(format!("{} record {} (`{}`)", path.display(), i + 1, rec.id), m))?;
        let pixels = read_pgm(base.join(&rec.image))?;
        let mut maps = Vec::with_capacity(rec.activation_maps.len());
        for m in &rec.activation_maps {
            if m.label_index >= 14 {
                return Err(PipelineError::format(
                    format!("{} record {}", path.display(), i + 1),
                    format!("activation map label index {} is outside [0, 14)", m.label_index),
                ));
            }
            maps.push((m.label_index, read_pgm(base.join(&m.path))?));
        }
        out.push(ReportPair {
            image: ImageGrid::new(rec.id, pixels),
            report: rec.report,
            gold_labels,
            activation_maps: maps,
        });
    }
    Ok(out)
}
