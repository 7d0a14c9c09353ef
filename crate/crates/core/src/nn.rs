//! Shared building blocks: the forward context and multi-head scaled
//! dot-product attention.

use ndarray::Array2;

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::ModelError;
use crate::params::{ParamId, ParamStore, Registrar};

/// A tape plus the parameter store its leaves are bound from.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Ctx { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Projection weights of one attention block (no biases).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub d: usize,
}

/// Attention output and the per-head weight matrices (rows sum to 1).
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

pub fn check_heads(d: usize, heads: usize) -> Result<(), ModelError> {
    if heads == 0 || d % heads != 0 {
        return Err(ModelError::HeadDivisibility { width: d, heads });
    }
    Ok(())
}

impl MultiHeadAttention {
    /// Registers `{prefix}.W_Q`, `.W_K`, `.W_V`, `.W_O`, each d×d.
    pub fn register(reg: &mut Registrar<'_>, prefix: &str, d: usize, heads: usize) -> Result<Self, ModelError> {
        check_heads(d, heads)?;
        Ok(MultiHeadAttention {
            w_q: reg.xavier(&format!("{prefix}.W_Q"), d, d),
            w_k: reg.xavier(&format!("{prefix}.W_K"), d, d),
            w_v: reg.xavier(&format!("{prefix}.W_V"), d, d),
            w_o: reg.xavier(&format!("{prefix}.W_O"), d, d),
            heads,
            d,
        })
    }

    /// `query` rows attend over `context` rows.
    pub fn forward(
        &self,
        ctx: Ctx<'_>,
        query: Var,
        context: Var,
        mask: Option<&Array2<bool>>,
    ) -> Result<AttentionOutput, ModelError> {
        let w = [ctx.p(self.w_q), ctx.p(self.w_k), ctx.p(self.w_v), ctx.p(self.w_o)];
        attention(ctx.tape, query, context, w, self.heads, mask)
    }
}

/// Multi-head attention over explicit weight nodes `[W_Q, W_K, W_V, W_O]`.
pub fn attention(
    tape: &Tape,
    query: Var,
    context: Var,
    w: [Var; 4],
    heads: usize,
    mask: Option<&Array2<bool>>,
) -> Result<AttentionOutput, ModelError> {
    let d = tape.shape(w[0]).1;
    check_heads(d, heads)?;
    let dk = d / heads;
    let q = tape.matmul(query, w[0])?;
    let k = tape.matmul(context, w[1])?;
    let v = tape.matmul(context, w[2])?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax_rows(scores, mask)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let out = tape.matmul(cat, w[3])?;
    Ok(AttentionOutput { out, weights })
}

/// Plain-matrix attention weights, for callers that do not need gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn identity_values(d: usize, heads: usize) -> Self {
        AttentionWeights {
            w_q: Matrix::zeros((d, d)),
            w_k: Matrix::zeros((d, d)),
            w_v: Matrix::eye(d),
            w_o: Matrix::eye(d),
            heads,
        }
    }

    pub fn bind(&self, tape: &Tape) -> [Var; 4] {
        [
            tape.leaf(self.w_q.clone()),
            tape.leaf(self.w_k.clone()),
            tape.leaf(self.w_v.clone()),
            tape.leaf(self.w_o.clone()),
        ]
    }

    /// Returns the output and the per-head attention weights.
    pub fn apply(
        &self,
        query: &Matrix,
        context: &Matrix,
        mask: Option<&Array2<bool>>,
    ) -> Result<(Matrix, Vec<Matrix>), ModelError> {
        let tape = Tape::new();
        let q = tape.leaf(query.clone());
        let c = tape.leaf(context.clone());
        let res = attention(&tape, q, c, self.bind(&tape), self.heads, mask)?;
        let out = tape.value(res.out).clone();
        let weights = res.weights.iter().map(|&w| tape.value(w).clone()).collect();
        Ok((out, weights))
    }
}
