//! Entity text serialisation and node feature construction.

use std::io::Write;
use std::process::{Command, Stdio};

use crate::autodiff::Matrix;
use crate::error::ModelError;
use crate::kg_sampler::Subgraph;
use crate::kg_store::{Entity, KnowledgeGraph};
use crate::text::{fnv1a64, tokens};

/// Turns one text into a token-embedding matrix (one row per token).
pub trait TextEmbedder {
    fn embed_tokens(&self, text: &str, d: usize) -> Result<Matrix, ModelError>;

    /// Pooled embeddings for many texts, one row each. The default pools
    /// `embed_tokens` per text.
    fn embed_pooled(&self, texts: &[String], d: usize) -> Result<Matrix, ModelError> {
        let mut out = Matrix::zeros((texts.len(), d));
        for (i, t) in texts.iter().enumerate() {
            out.row_mut(i).assign(&mean_pool(&self.embed_tokens(t, d)?, d));
        }
        Ok(out)
    }
}

/// Deterministic one-hot embedder: token `t` lights index
/// `FNV-1a-64(t) mod d`.
#[derive(Clone, Copy, Debug, Default)]
pub struct HashedEmbedder;

impl TextEmbedder for HashedEmbedder {
    fn embed_tokens(&self, text: &str, d: usize) -> Result<Matrix, ModelError> {
        if d < 1 {
            return Err(ModelError::BadDim);
        }
        let toks = tokens(text);
        let mut m = Matrix::zeros((toks.len(), d));
        for (i, t) in toks.iter().enumerate() {
            m[[i, (fnv1a64(t.as_bytes()) % d as u64) as usize]] = 1.0;
        }
        Ok(m)
    }
}

/// Delegates to an external program: entity texts go to its stdin one per
/// line, and it answers with one whitespace-separated row of `d` floats per
/// line.
#[derive(Clone, Debug)]
pub struct ExternalEmbedder {
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalEmbedder {
    fn run(&self, texts: &[String], d: usize) -> Result<Matrix, ModelError> {
        let fail = |m: String| ModelError::ShapeMismatch(format!("external embedder: {m}"));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            for t in texts {
                writeln!(stdin, "{}", t.replace('\n', " ")).map_err(|e| fail(e.to_string()))?;
            }
        }
        let output = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !output.status.success() {
            return Err(fail(format!("exited with {}", output.status)));
        }
        let text = String::from_utf8_lossy(&output.stdout);
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != texts.len() {
            return Err(fail(format!("{} rows for {} texts", rows.len(), texts.len())));
        }
        let mut m = Matrix::zeros((texts.len(), d));
        for (i, row) in rows.iter().enumerate() {
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| fail(e.to_string())))
                .collect::<Result<_, _>>()?;
            if vals.len() != d || vals.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("row {i} has {} finite values, need {d}", vals.len())));
            }
            m.row_mut(i).assign(&ndarray::Array1::from(vals));
        }
        Ok(m)
    }
}

impl TextEmbedder for ExternalEmbedder {
    /// The external provider is sentence-level, so this is a 1×d matrix.
    fn embed_tokens(&self, text: &str, d: usize) -> Result<Matrix, ModelError> {
        if d < 1 {
            return Err(ModelError::BadDim);
        }
        self.run(&[text.to_string()], d)
    }

    fn embed_pooled(&self, texts: &[String], d: usize) -> Result<Matrix, ModelError> {
        if d < 1 {
            return Err(ModelError::BadDim);
        }
        if texts.is_empty() {
            return Ok(Matrix::zeros((0, d)));
        }
        self.run(texts, d)
    }
}

/// `CUI | Name | Definition | TUI | alias1, alias2`.
pub fn entity_text(entity: &Entity) -> String {
    [
        entity.cui.as_str(),
        entity.name.as_str(),
        entity.definition.as_str(),
        entity.tui.as_str(),
        &entity.aliases.join(", "),
    ]
    .join(" | ")
}

/// Column mean; zeros when there are no rows.
pub fn mean_pool(tokens: &Matrix, d: usize) -> ndarray::Array1<f64> {
    if tokens.nrows() == 0 {
        return ndarray::Array1::zeros(d);
    }
    tokens.sum_axis(ndarray::Axis(0)) / tokens.nrows() as f64
}

/// Node feature matrix aligned with a subgraph's node order.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatureMatrix {
    pub values: Matrix,
    pub node_ids: Vec<usize>,
    pub d: usize,
}

pub fn encode_nodes(
    subgraph: &Subgraph,
    graph: &KnowledgeGraph,
    embedder: &dyn TextEmbedder,
    d: usize,
) -> Result<NodeFeatureMatrix, ModelError> {
    if d < 1 {
        return Err(ModelError::BadDim);
    }
    let texts = subgraph
        .node_ids
        .iter()
        .map(|&id| {
            graph
                .entity(id)
                .map(entity_text)
                .ok_or(ModelError::UnknownEntity(id))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let values = embedder.embed_pooled(&texts, d)?;
    Ok(NodeFeatureMatrix {
        values,
        node_ids: subgraph.node_ids.clone(),
        d,
    })
}
