//! Patch encoder, learned-query block, vision-token extraction and
//! retrieval from the vision-token memory.

use std::fs;
use std::path::Path;

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{ModelError, PipelineError};
use crate::kg_store::{KnowledgeGraph, VisionToken, NUM_LABELS};
use crate::nn::{attention, AttentionWeights, Ctx, MultiHeadAttention};
use crate::params::{ParamId, Registrar};

pub const NUM_QUERIES: usize = NUM_LABELS;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub pixels: Matrix,
    pub id: String,
}

impl ImageGrid {
    pub fn new(id: impl Into<String>, pixels: Matrix) -> Self {
        ImageGrid { pixels, id: id.into() }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// Parses a binary 8-bit PGM. Samples are divided by 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<Matrix, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected magic P5, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field `{s}`: {e}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("only 8-bit PGM is supported (maxval {maxval})"));
    }
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or("truncated pixel data")?;
    Ok(Matrix::from_shape_fn((h, w), |(r, c)| data[r * w + c] as f64 / 255.0))
}

/// Writes a binary PGM, rounding `v * 255` and clamping to [0, 255].
pub fn encode_pgm(pixels: &Matrix) -> Vec<u8> {
    let (h, w) = pixels.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Matrix, PipelineError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    parse_pgm(&bytes).map_err(|m| PipelineError::format(path.display().to_string(), m))
}

pub fn write_pgm(path: impl AsRef<Path>, pixels: &Matrix) -> Result<(), PipelineError> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(pixels)).map_err(|e| PipelineError::io(path, e))
}

/// Row-major patches, each flattened row-major: a `P × patch²` matrix.
pub fn patchify(pixels: &Matrix, patch: usize) -> Result<Matrix, ModelError> {
    let (h, w) = pixels.dim();
    if patch == 0 || h == 0 || w == 0 || h % patch != 0 || w % patch != 0 {
        return Err(ModelError::BadDims {
            height: h,
            width: w,
            patch,
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(Matrix::from_shape_fn((gh * gw, patch * patch), |(p, k)| {
        let (pr, pc) = (p / gw, p % gw);
        let (r, c) = (k / patch, k % patch);
        pixels[[pr * patch + r, pc * patch + c]]
    }))
}

/// Trainable patch projection (`vision.W_patch`, `vision.b`).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEncoder {
    pub w_patch: ParamId,
    pub b: ParamId,
    pub patch: usize,
}

impl PatchEncoder {
    pub fn register(reg: &mut Registrar<'_>, patch: usize, d: usize) -> Self {
        PatchEncoder {
            w_patch: reg.xavier("vision.W_patch", patch * patch, d),
            b: reg.fill("vision.b", 1, d, 0.0),
            patch,
        }
    }

    pub fn forward(&self, ctx: Ctx<'_>, image: &Matrix) -> Result<Var, ModelError> {
        let patches = ctx.tape.constant(patchify(image, self.patch)?);
        let proj = ctx.tape.matmul(patches, ctx.p(self.w_patch))?;
        ctx.tape.add_row(proj, ctx.p(self.b))
    }
}

/// Learned queries attending over patch features, with a residual on the
/// queries (`vision.qformer.queries`, `vision.qformer.attn.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct QFormer {
    pub queries: ParamId,
    pub attn: MultiHeadAttention,
}

impl QFormer {
    pub fn register(reg: &mut Registrar<'_>, d: usize, heads: usize) -> Result<Self, ModelError> {
        Ok(QFormer {
            queries: reg.normal("vision.qformer.queries", NUM_QUERIES, d, 0.02),
            attn: MultiHeadAttention::register(reg, "vision.qformer.attn", d, heads)?,
        })
    }

    pub fn forward(&self, ctx: Ctx<'_>, f_v: Var) -> Result<Var, ModelError> {
        let w = [ctx.p(self.attn.w_q), ctx.p(self.attn.w_k), ctx.p(self.attn.w_v), ctx.p(self.attn.w_o)];
        qformer_vars(ctx.tape, ctx.p(self.queries), f_v, w, self.attn.heads)
    }
}

pub fn qformer_vars(tape: &Tape, queries: Var, f_v: Var, w: [Var; 4], heads: usize) -> Result<Var, ModelError> {
    if tape.shape(f_v).0 == 0 {
        return Err(ModelError::EmptyInput("patch features"));
    }
    let att = attention(tape, queries, f_v, w, heads, None)?;
    tape.add(queries, att.out)
}

/// Cross-attention from a query stream into the vision-token memory
/// (`vision.retrieve.attn.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct Retriever {
    pub attn: MultiHeadAttention,
}

impl Retriever {
    pub fn register(reg: &mut Registrar<'_>, d: usize, heads: usize) -> Result<Self, ModelError> {
        Ok(Retriever {
            attn: MultiHeadAttention::register(reg, "vision.retrieve.attn", d, heads)?,
        })
    }

    pub fn forward(&self, ctx: Ctx<'_>, query: Var, memory: Var) -> Result<Var, ModelError> {
        if ctx.tape.shape(memory).0 == 0 {
            return Err(ModelError::EmptyMemory);
        }
        Ok(self.attn.forward(ctx, query, memory, None)?.out)
    }
}

/// Patch positions whose max-normalised activation reaches `tau`.
pub fn select_patches(activation: &Matrix, tau: f64) -> Result<Vec<usize>, ModelError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(ModelError::BadThreshold(tau));
    }
    let max = activation.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(ModelError::EmptyActivation);
    }
    Ok(activation
        .iter()
        .enumerate()
        .filter(|&(_, &m)| m / max >= tau)
        .map(|(i, _)| i)
        .collect())
}

/// One pooled token for this (image, disease) pair. The returned token's id
/// is 0; the graph assigns the real id on insertion.
pub fn extract_vision_tokens(
    activation: &Matrix,
    f_v: &Matrix,
    tau: f64,
    label_index: usize,
    source_id: &str,
) -> Result<Vec<VisionToken>, ModelError> {
    if activation.len() != f_v.nrows() {
        return Err(ModelError::LengthMismatch(activation.len(), f_v.nrows()));
    }
    let selected = select_patches(activation, tau)?;
    let mut feature = ndarray::Array1::<f64>::zeros(f_v.ncols());
    for &p in &selected {
        feature += &f_v.row(p);
    }
    feature /= selected.len() as f64;
    Ok(vec![VisionToken {
        id: 0,
        label_index,
        feature: feature.to_vec(),
        source_id: source_id.to_string(),
    }])
}

/// Stacked vision-token features.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionMemory {
    pub k_v: Matrix,
}

impl VisionMemory {
    /// First `n_visual` tokens in insertion order (all when `None`).
    pub fn from_graph(graph: &KnowledgeGraph, n_visual: Option<usize>) -> Self {
        let tokens = graph.vision_tokens();
        let n = n_visual.map_or(tokens.len(), |k| k.min(tokens.len()));
        let d = graph.d_vision();
        VisionMemory {
            k_v: Matrix::from_shape_fn((n, d), |(i, j)| tokens[i].feature[j]),
        }
    }

    pub fn len(&self) -> usize {
        self.k_v.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.k_v.nrows() == 0
    }
}

/// Plain-matrix patch encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEncoderParams {
    pub patch: usize,
    pub w_patch: Matrix,
    pub b: Matrix,
}

pub fn encode_image(image: &ImageGrid, p: &PatchEncoderParams) -> Result<Matrix, ModelError> {
    let patches = patchify(&image.pixels, p.patch)?;
    if p.w_patch.nrows() != patches.ncols() || p.b.dim() != (1, p.w_patch.ncols()) {
        return Err(ModelError::ShapeMismatch(format!(
            "patch encoder {:?} / {:?} for patch {}",
            p.w_patch.dim(),
            p.b.dim(),
            p.patch
        )));
    }
    Ok(patches.dot(&p.w_patch) + &p.b.row(0))
}

/// Plain-matrix learned-query block.
#[derive(Clone, Debug, PartialEq)]
pub struct QFormerParams {
    pub queries: Matrix,
    pub attention: AttentionWeights,
}

pub fn qformer(f_v: &Matrix, p: &QFormerParams) -> Result<Matrix, ModelError> {
    let tape = Tape::new();
    let q = tape.leaf(p.queries.clone());
    let f = tape.leaf(f_v.clone());
    let out = qformer_vars(&tape, q, f, p.attention.bind(&tape), p.attention.heads)?;
    let value = tape.value(out).clone();
    Ok(value)
}

pub fn retrieve(query: &Matrix, memory: &VisionMemory, w: &AttentionWeights) -> Result<Matrix, ModelError> {
    if memory.is_empty() {
        return Err(ModelError::EmptyMemory);
    }
    Ok(w.apply(query, &memory.k_v, None)?.0)
}
