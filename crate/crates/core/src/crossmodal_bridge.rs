//! KG↔vision cross-attention and assembly of the decoder prefix.

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::ModelError;
use crate::nn::{AttentionWeights, Ctx, MultiHeadAttention};
use crate::params::{ParamId, Registrar};

/// Prefix segments in concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    V,
    Kv,
    Kg2v,
    V2kg,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::V, Stream::Kv, Stream::Kg2v, Stream::V2kg];

    pub fn name(self) -> &'static str {
        match self {
            Stream::V => "v",
            Stream::Kv => "kv",
            Stream::Kg2v => "kg2v",
            Stream::V2kg => "v2kg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub stream: Stream,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixMatrix {
    pub f: Matrix,
    pub spans: Vec<Span>,
}

impl PrefixMatrix {
    pub fn segment(&self, stream: Stream) -> Matrix {
        let s = self.spans.iter().find(|s| s.stream == stream).expect("every stream has a span");
        self.f.slice(ndarray::s![s.start..s.end(), ..]).to_owned()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bridge {
    pub kg2v: MultiHeadAttention,
    pub v2kg: MultiHeadAttention,
    /// Projections in `Stream::ALL` order; tied projections share one id.
    pub proj: [ParamId; 4],
}

impl Bridge {
    pub fn register(
        reg: &mut Registrar<'_>,
        d: usize,
        d_dec: usize,
        heads: usize,
        tie_projections: bool,
    ) -> Result<Self, ModelError> {
        let kg2v = MultiHeadAttention::register(reg, "bridge.kg2v.attn", d, heads)?;
        let v2kg = MultiHeadAttention::register(reg, "bridge.v2kg.attn", d, heads)?;
        let proj = if tie_projections {
            [reg.xavier("bridge.proj_v", d, d_dec); 4]
        } else {
            Stream::ALL.map(|s| reg.xavier(&format!("bridge.proj_{}", s.name()), d, d_dec))
        };
        Ok(Bridge { kg2v, v2kg, proj })
    }

    /// Patch rows attend over graph nodes.
    pub fn kg2v(&self, ctx: Ctx<'_>, f_v: Var, x_final: Var) -> Result<Var, ModelError> {
        if ctx.tape.shape(x_final).0 == 0 {
            return Err(ModelError::EmptyGraph);
        }
        Ok(self.kg2v.forward(ctx, f_v, x_final, None)?.out)
    }

    /// Graph nodes attend over patch rows.
    pub fn v2kg(&self, ctx: Ctx<'_>, x_final: Var, f_v: Var) -> Result<Var, ModelError> {
        if ctx.tape.shape(x_final).0 == 0 {
            return Err(ModelError::EmptyGraph);
        }
        Ok(self.v2kg.forward(ctx, x_final, f_v, None)?.out)
    }

    /// `None` streams are omitted and get a zero-length span.
    pub fn assemble(&self, ctx: Ctx<'_>, streams: [Option<Var>; 4]) -> Result<(Var, Vec<Span>), ModelError> {
        let proj = self.proj.map(|id| ctx.p(id));
        assemble_prefix_vars(ctx.tape, streams, proj)
    }
}

pub fn assemble_prefix_vars(
    tape: &Tape,
    streams: [Option<Var>; 4],
    proj: [Var; 4],
) -> Result<(Var, Vec<Span>), ModelError> {
    let mut parts = Vec::new();
    let mut spans = Vec::with_capacity(4);
    let mut start = 0;
    for (k, stream) in Stream::ALL.into_iter().enumerate() {
        let len = match streams[k] {
            Some(x) if tape.shape(x).0 > 0 => {
                parts.push(tape.matmul(x, proj[k])?);
                tape.shape(x).0
            }
            Some(x) => {
                let (d, _) = tape.shape(proj[k]);
                if tape.shape(x).1 != d {
                    return Err(ModelError::ShapeMismatch(format!(
                        "stream {} has width {}, projection expects {d}",
                        stream.name(),
                        tape.shape(x).1
                    )));
                }
                0
            }
            None => 0,
        };
        spans.push(Span { stream, start, len });
        start += len;
    }
    if parts.is_empty() {
        return Err(ModelError::EmptyInput("prefix streams"));
    }
    let f = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    Ok((f, spans))
}

/// Plain-matrix bridge parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeParams {
    pub kg2v: AttentionWeights,
    pub v2kg: AttentionWeights,
    pub proj: [Matrix; 4],
}

impl BridgeParams {
    pub fn kg2v(&self, f_v: &Matrix, x_final: &Matrix) -> Result<Matrix, ModelError> {
        if x_final.nrows() == 0 {
            return Err(ModelError::EmptyGraph);
        }
        Ok(self.kg2v.apply(f_v, x_final, None)?.0)
    }

    pub fn v2kg(&self, x_final: &Matrix, f_v: &Matrix) -> Result<Matrix, ModelError> {
        if x_final.nrows() == 0 {
            return Err(ModelError::EmptyGraph);
        }
        Ok(self.v2kg.apply(x_final, f_v, None)?.0)
    }

    pub fn assemble_prefix(
        &self,
        f_v: &Matrix,
        f_kv: &Matrix,
        f_kg2v: &Matrix,
        f_v2kg: &Matrix,
    ) -> Result<PrefixMatrix, ModelError> {
        let tape = Tape::new();
        let streams = [f_v, f_kv, f_kg2v, f_v2kg].map(|m| Some(tape.leaf(m.clone())));
        let proj = [0, 1, 2, 3].map(|k| tape.leaf(self.proj[k].clone()));
        let (f, spans) = assemble_prefix_vars(&tape, streams, proj)?;
        let f = tape.value(f).clone();
        Ok(PrefixMatrix { f, spans })
    }
}
