//! Relational graph convolution plus the GCN and GAT baselines.
//!
//! Messages flow head to tail: an edge `(j, i, r)` lets node `i` read node
//! `j` under relation `r`. Features are row vectors, so a layer computes
//! `h_j · W` rather than `W h_j`.

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array2;

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::ModelError;
use crate::kg_sampler::EdgeTensors;
use crate::nn::Ctx;
use crate::params::{ParamId, Registrar};

pub const NUM_RELATIONS: usize = 3;
pub const GAT_SLOPE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Identity => v,
        }
    }
}

impl FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "identity" | "none" => Ok(Activation::Identity),
            _ => Err(format!("unknown activation `{s}`")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderVariant {
    Rgcn,
    Gcn,
    Gat,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 3] = [EncoderVariant::Gcn, EncoderVariant::Rgcn, EncoderVariant::Gat];

    pub fn label(self) -> &'static str {
        match self {
            EncoderVariant::Rgcn => "RGCN",
            EncoderVariant::Gcn => "GCN",
            EncoderVariant::Gat => "GAT",
        }
    }
}

impl FromStr for EncoderVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rgcn" => Ok(EncoderVariant::Rgcn),
            "gcn" => Ok(EncoderVariant::Gcn),
            "gat" => Ok(EncoderVariant::Gat),
            _ => Err(format!("unknown encoder `{s}`")),
        }
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label().to_ascii_lowercase())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEncoderConfig {
    pub variant: EncoderVariant,
    pub layers: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    pub add_inverse_relations: bool,
    pub final_activation: Activation,
}

impl GraphEncoderConfig {
    pub fn new(variant: EncoderVariant, d: usize) -> Self {
        GraphEncoderConfig {
            variant,
            layers: 2,
            d_in: d,
            d_hidden: d,
            add_inverse_relations: false,
            final_activation: Activation::Identity,
        }
    }

    pub fn n_relations(&self) -> usize {
        if self.add_inverse_relations {
            2 * NUM_RELATIONS
        } else {
            NUM_RELATIONS
        }
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers {
            self.final_activation
        } else {
            Activation::Relu
        }
    }
}

/// Edges with reversed copies appended under codes `r + 3`.
pub fn with_inverse_relations(edges: &EdgeTensors) -> EdgeTensors {
    let mut out = edges.clone();
    for (h, t, r) in edges.edges() {
        out.edge_index[0].push(t);
        out.edge_index[1].push(h);
        out.edge_type.push(r + NUM_RELATIONS);
    }
    out
}

fn check_edges(edges: &EdgeTensors, n: usize, n_rel: usize) -> Result<(), ModelError> {
    if edges.edge_index[0].len() != edges.len() || edges.edge_index[1].len() != edges.len() {
        return Err(ModelError::LengthMismatch(edges.edge_index[0].len(), edges.len()));
    }
    for (h, t, r) in edges.edges() {
        for idx in [h, t] {
            if idx >= n {
                return Err(ModelError::IndexOutOfRange { index: idx, len: n });
            }
        }
        if r >= n_rel {
            return Err(ModelError::IndexOutOfRange { index: r, len: n_rel });
        }
    }
    Ok(())
}

/// Mean-aggregation entries `(tail, head, 1/in_degree)` for the edges
/// accepted by `keep`, sorted by destination then source.
fn mean_entries(edges: &EdgeTensors, n: usize, keep: impl Fn(usize) -> bool) -> Vec<(usize, usize, f64)> {
    let mut deg = vec![0usize; n];
    let mut pairs = Vec::new();
    for (h, t, r) in edges.edges() {
        if keep(r) {
            deg[t] += 1;
            pairs.push((t, h));
        }
    }
    pairs.sort_unstable();
    pairs.into_iter().map(|(t, h)| (t, h, 1.0 / deg[t] as f64)).collect()
}

/// One R-GCN layer over tape nodes. `w_r` holds one matrix per relation code.
pub fn rgcn_layer_vars(
    tape: &Tape,
    v: Var,
    edges: &EdgeTensors,
    w_r: &[Var],
    w_0: Var,
    act: Activation,
) -> Result<Var, ModelError> {
    let n = tape.shape(v).0;
    check_edges(edges, n, w_r.len())?;
    let mut terms = vec![tape.matmul(v, w_0)?];
    for (r, &w) in w_r.iter().enumerate() {
        let entries = mean_entries(edges, n, |code| code == r);
        if entries.is_empty() {
            continue;
        }
        let agg = tape.aggregate(v, n, Rc::from(entries))?;
        terms.push(tape.matmul(agg, w)?);
    }
    let pre = tape.sum(&terms)?;
    Ok(act.apply(tape, pre))
}

/// Relation-blind layer: one shared `W` and a mean over all in-edges.
pub fn gcn_layer_vars(
    tape: &Tape,
    v: Var,
    edges: &EdgeTensors,
    w: Var,
    w_0: Var,
    act: Activation,
) -> Result<Var, ModelError> {
    let n = tape.shape(v).0;
    check_edges(edges, n, usize::MAX)?;
    let mut terms = vec![tape.matmul(v, w_0)?];
    let entries = mean_entries(edges, n, |_| true);
    if !entries.is_empty() {
        let agg = tape.aggregate(v, n, Rc::from(entries))?;
        terms.push(tape.matmul(agg, w)?);
    }
    let pre = tape.sum(&terms)?;
    Ok(act.apply(tape, pre))
}

/// In-neighbourhood mask including the self-edge; `mask[i][j]` is true when
/// `i` attends to `j`.
pub fn gat_mask(edges: &EdgeTensors, n: usize) -> Array2<bool> {
    let mut mask = Array2::from_elem((n, n), false);
    for i in 0..n {
        mask[[i, i]] = true;
    }
    for (h, t, _) in edges.edges() {
        mask[[t, h]] = true;
    }
    mask
}

/// Single-head additive attention. `a` is a `2·d_out × 1` column whose first
/// half scores the neighbour and second half the receiving node.
pub fn gat_layer_vars(
    tape: &Tape,
    v: Var,
    edges: &EdgeTensors,
    w: Var,
    a: Var,
    act: Activation,
) -> Result<Var, ModelError> {
    let n = tape.shape(v).0;
    check_edges(edges, n, usize::MAX)?;
    let d_out = tape.shape(w).1;
    if tape.shape(a) != (2 * d_out, 1) {
        return Err(ModelError::ShapeMismatch(format!(
            "gat attention vector {:?}, need ({}, 1)",
            tape.shape(a),
            2 * d_out
        )));
    }
    let wh = tape.matmul(v, w)?;
    let a_nb = tape.slice_rows(a, 0, d_out)?;
    let a_self = tape.slice_rows(a, d_out, 2 * d_out)?;
    let s_self = tape.matmul(wh, a_self)?;
    let s_nb = tape.matmul(wh, a_nb)?;
    let e = tape.outer_sum(s_self, s_nb)?;
    let e = tape.leaky_relu(e, GAT_SLOPE);
    let alpha = tape.softmax_rows(e, Some(&gat_mask(edges, n)))?;
    let out = tape.matmul(alpha, wh)?;
    Ok(act.apply(tape, out))
}

/// Parameter handles for one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Rgcn { w_r: Vec<ParamId>, w_0: ParamId },
    Gcn { w: ParamId, w_0: ParamId },
    Gat { w: ParamId, a: ParamId },
}

/// A stack of graph layers registered in a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphEncoder {
    pub config: GraphEncoderConfig,
    pub layers: Vec<LayerParams>,
}

impl GraphEncoder {
    pub fn register(reg: &mut Registrar<'_>, config: &GraphEncoderConfig) -> Result<Self, ModelError> {
        if config.layers == 0 {
            return Err(ModelError::EmptyInput("graph encoder layers"));
        }
        if config.d_in == 0 || config.d_hidden == 0 {
            return Err(ModelError::BadDim);
        }
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let d_in = if l == 0 { config.d_in } else { config.d_hidden };
            let d_out = config.d_hidden;
            let p = format!("graph_encoder.layer{l}");
            layers.push(match config.variant {
                EncoderVariant::Rgcn => LayerParams::Rgcn {
                    w_r: (0..config.n_relations())
                        .map(|r| reg.xavier(&format!("{p}.W_r{r}"), d_in, d_out))
                        .collect(),
                    w_0: reg.xavier(&format!("{p}.W_0"), d_in, d_out),
                },
                EncoderVariant::Gcn => LayerParams::Gcn {
                    w: reg.xavier(&format!("{p}.W"), d_in, d_out),
                    w_0: reg.xavier(&format!("{p}.W_0"), d_in, d_out),
                },
                EncoderVariant::Gat => LayerParams::Gat {
                    w: reg.xavier(&format!("{p}.W"), d_in, d_out),
                    a: reg.xavier(&format!("{p}.gat.a"), 2 * d_out, 1),
                },
            });
        }
        Ok(GraphEncoder {
            config: config.clone(),
            layers,
        })
    }

    pub fn forward(&self, ctx: Ctx<'_>, v: Var, edges: &EdgeTensors) -> Result<Var, ModelError> {
        let owned;
        let edges = if self.config.add_inverse_relations {
            owned = with_inverse_relations(edges);
            &owned
        } else {
            edges
        };
        let tape = ctx.tape;
        let mut h = v;
        for (l, layer) in self.layers.iter().enumerate() {
            let act = self.config.activation(l);
            h = match layer {
                LayerParams::Rgcn { w_r, w_0 } => {
                    let ws: Vec<Var> = w_r.iter().map(|&id| ctx.p(id)).collect();
                    rgcn_layer_vars(tape, h, edges, &ws, ctx.p(*w_0), act)?
                }
                LayerParams::Gcn { w, w_0 } => gcn_layer_vars(tape, h, edges, ctx.p(*w), ctx.p(*w_0), act)?,
                LayerParams::Gat { w, a } => gat_layer_vars(tape, h, edges, ctx.p(*w), ctx.p(*a), act)?,
            };
        }
        Ok(h)
    }
}

/// Plain-matrix R-GCN layer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RgcnLayerParams {
    pub w_r: Vec<Matrix>,
    pub w_0: Matrix,
    pub activation: Activation,
}

/// Plain-matrix GCN layer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayerParams {
    pub w: Matrix,
    pub w_0: Matrix,
    pub activation: Activation,
}

/// Plain-matrix GAT layer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams {
    pub w: Matrix,
    pub a: Matrix,
    pub activation: Activation,
}

fn run<F>(v: &Matrix, f: F) -> Result<Matrix, ModelError>
where
    F: FnOnce(&Tape, Var) -> Result<Var, ModelError>,
{
    let tape = Tape::new();
    let x = tape.leaf(v.clone());
    let out = f(&tape, x)?;
    let value = tape.value(out).clone();
    Ok(value)
}

pub fn rgcn_layer(v: &Matrix, edges: &EdgeTensors, p: &RgcnLayerParams) -> Result<Matrix, ModelError> {
    run(v, |t, x| {
        let ws: Vec<Var> = p.w_r.iter().map(|w| t.leaf(w.clone())).collect();
        rgcn_layer_vars(t, x, edges, &ws, t.leaf(p.w_0.clone()), p.activation)
    })
}

/// Applies the layers in order; the caller sets each layer's activation.
pub fn rgcn_forward(v: &Matrix, edges: &EdgeTensors, layers: &[RgcnLayerParams]) -> Result<Matrix, ModelError> {
    let mut h = v.clone();
    for p in layers {
        h = rgcn_layer(&h, edges, p)?;
    }
    Ok(h)
}

pub fn gcn_layer(v: &Matrix, edges: &EdgeTensors, p: &GcnLayerParams) -> Result<Matrix, ModelError> {
    run(v, |t, x| {
        gcn_layer_vars(t, x, edges, t.leaf(p.w.clone()), t.leaf(p.w_0.clone()), p.activation)
    })
}

pub fn gat_layer(v: &Matrix, edges: &EdgeTensors, p: &GatLayerParams) -> Result<Matrix, ModelError> {
    run(v, |t, x| {
        gat_layer_vars(t, x, edges, t.leaf(p.w.clone()), t.leaf(p.a.clone()), p.activation)
    })
}

/// Distinct in-neighbours of `i` plus `i` itself, ascending.
pub fn gat_neighbourhood(edges: &EdgeTensors, i: usize) -> Vec<usize> {
    let mut s: BTreeSet<usize> = edges.edges().filter(|e| e.1 == i).map(|e| e.0).collect();
    s.insert(i);
    s.into_iter().collect()
}
