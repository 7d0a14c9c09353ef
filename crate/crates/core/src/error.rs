//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the knowledge-graph store and sampler.
#[derive(Debug, Error)]
pub enum KgError {
    #[error("entity field `{0}` must not be empty")]
    EmptyField(&'static str),
    #[error("unknown entity type `{0}`")]
    BadEntityType(String),
    #[error("unknown relation `{0}`")]
    BadRelation(String),
    #[error("unknown entity id {0}")]
    UnknownEntity(usize),
    #[error("self-loop on entity {0} is only allowed for `modify`")]
    SelfLoop(usize),
    #[error("vision token label index {0} is outside [0, 14)")]
    BadLabel(usize),
    #[error("vision token feature has length {got}, graph declares d_vision = {expected}")]
    BadFeatureWidth { expected: usize, got: usize },
    #[error("vision token feature contains a non-finite value")]
    NonFinite,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported m3kg schema version {found} (supported: {supported})")]
    SchemaVersionMismatch { found: u64, supported: u64 },
    #[error("budgets must be non-empty and strictly increasing, got {0:?}")]
    BadBudgets(Vec<usize>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Shape and argument errors raised by the differentiable layers.
#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("width {width} is not divisible by {heads} heads")]
    HeadDivisibility { width: usize, heads: usize },
    #[error("{rows} rows exceed the positional table size {max}")]
    TooManyNodes { rows: usize, max: usize },
    #[error("scale index {index} out of range for {count} scales")]
    BadScaleIndex { index: usize, count: usize },
    #[error("embedding width must be at least 1")]
    BadDim,
    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    BadDims {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("activation map is all zeros")]
    EmptyActivation,
    #[error("vision memory is empty")]
    EmptyMemory,
    #[error("graph representation has no rows")]
    EmptyGraph,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("threshold tau must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("unknown entity id {0}")]
    UnknownEntity(usize),
}

/// Errors raised by the metric engines.
#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("hypothesis and reference lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("BLEU order must be in 1..=4, got {0}")]
    BadOrder(usize),
}

/// Errors from checkpoint, image and config I/O plus orchestration.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Format { context: String, message: String },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("bad parameters: {0}")]
    BadParams(String),
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        PipelineError::Format {
            context: context.into(),
            message: message.into(),
        }
    }
}
