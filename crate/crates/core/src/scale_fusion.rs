//! Scale and position encodings, cross-scale self-attention, and final-scale
//! selection.

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::ModelError;
use crate::nn::{attention, AttentionWeights, Ctx, MultiHeadAttention};
use crate::params::{ParamId, Registrar};

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleFusion {
    pub e_scale: ParamId,
    pub e_pos: ParamId,
    pub attn: MultiHeadAttention,
    pub residual: bool,
    pub n_scales: usize,
    pub n_max: usize,
}

/// Fused features plus the per-scale slices and attention weights.
pub struct FusedVars {
    pub fused: Var,
    pub per_scale: Vec<Var>,
    pub offsets: Vec<usize>,
    pub weights: Vec<Var>,
}

impl ScaleFusion {
    pub fn register(
        reg: &mut Registrar<'_>,
        n_scales: usize,
        n_max: usize,
        d: usize,
        heads: usize,
        residual: bool,
    ) -> Result<Self, ModelError> {
        if n_scales == 0 {
            return Err(ModelError::EmptyInput("scales"));
        }
        Ok(ScaleFusion {
            e_scale: reg.normal("fusion.E_scale", n_scales, d, 0.02),
            e_pos: reg.normal("fusion.E_pos", n_max, d, 0.02),
            attn: MultiHeadAttention::register(reg, "fusion.attn", d, heads)?,
            residual,
            n_scales,
            n_max,
        })
    }

    pub fn apply_encodings(&self, ctx: Ctx<'_>, x: Var, scale_index: usize) -> Result<Var, ModelError> {
        apply_encodings_vars(ctx.tape, x, ctx.p(self.e_scale), ctx.p(self.e_pos), scale_index)
    }

    /// Encodes each scale, then fuses. `xs[i]` holds scale `i`'s node features.
    pub fn forward(&self, ctx: Ctx<'_>, xs: &[Var]) -> Result<FusedVars, ModelError> {
        let encoded = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| self.apply_encodings(ctx, x, i))
            .collect::<Result<Vec<_>, _>>()?;
        let w = [ctx.p(self.attn.w_q), ctx.p(self.attn.w_k), ctx.p(self.attn.w_v), ctx.p(self.attn.w_o)];
        fuse_vars(ctx.tape, &encoded, w, self.attn.heads, self.residual)
    }
}

/// Row `p` of the result is `x[p] + E_scale[scale_index] + E_pos[p]`.
pub fn apply_encodings_vars(
    tape: &Tape,
    x: Var,
    e_scale: Var,
    e_pos: Var,
    scale_index: usize,
) -> Result<Var, ModelError> {
    let rows = tape.shape(x).0;
    let (n_scales, _) = tape.shape(e_scale);
    let (n_max, _) = tape.shape(e_pos);
    if scale_index >= n_scales {
        return Err(ModelError::BadScaleIndex {
            index: scale_index,
            count: n_scales,
        });
    }
    if rows > n_max {
        return Err(ModelError::TooManyNodes { rows, max: n_max });
    }
    if rows == 0 {
        return Ok(x);
    }
    let s = tape.gather_rows(e_scale, &vec![scale_index; rows])?;
    let p = tape.slice_rows(e_pos, 0, rows)?;
    tape.sum(&[x, s, p])
}

pub fn fuse_vars(
    tape: &Tape,
    encoded: &[Var],
    w: [Var; 4],
    heads: usize,
    residual: bool,
) -> Result<FusedVars, ModelError> {
    if encoded.is_empty() {
        return Err(ModelError::EmptyInput("scales"));
    }
    let mut offsets = Vec::with_capacity(encoded.len());
    let mut total = 0;
    for &x in encoded {
        offsets.push(total);
        total += tape.shape(x).0;
    }
    if total == 0 {
        return Err(ModelError::EmptyGraph);
    }
    let x = tape.concat_rows(encoded)?;
    let att = attention(tape, x, x, w, heads, None)?;
    let fused = if residual { tape.add(x, att.out)? } else { att.out };
    let per_scale = encoded
        .iter()
        .zip(&offsets)
        .map(|(&e, &off)| tape.slice_rows(fused, off, off + tape.shape(e).0))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FusedVars {
        fused,
        per_scale,
        offsets,
        weights: att.weights,
    })
}

pub fn select_final<T: Copy>(per_scale: &[T], index: usize) -> Result<T, ModelError> {
    per_scale.get(index).copied().ok_or(ModelError::BadScaleIndex {
        index,
        count: per_scale.len(),
    })
}

/// Plain-matrix fusion parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub e_scale: Matrix,
    pub e_pos: Matrix,
    pub attention: AttentionWeights,
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedScales {
    pub x_doubleprime: Matrix,
    pub per_scale: Vec<Matrix>,
    pub offsets: Vec<usize>,
    pub attention_weights: Vec<Matrix>,
}

impl FusedScales {
    pub fn select_final(&self, index: usize) -> Result<&Matrix, ModelError> {
        self.per_scale.get(index).ok_or(ModelError::BadScaleIndex {
            index,
            count: self.per_scale.len(),
        })
    }
}

impl FusionParams {
    pub fn apply_encodings(&self, x: &Matrix, scale_index: usize) -> Result<Matrix, ModelError> {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = apply_encodings_vars(
            &tape,
            v,
            tape.leaf(self.e_scale.clone()),
            tape.leaf(self.e_pos.clone()),
            scale_index,
        )?;
        let value = tape.value(out).clone();
        Ok(value)
    }

    /// Fuses already-encoded scale matrices.
    pub fn fuse(&self, encoded: &[Matrix]) -> Result<FusedScales, ModelError> {
        let tape = Tape::new();
        let vars: Vec<Var> = encoded.iter().map(|m| tape.leaf(m.clone())).collect();
        let res = fuse_vars(&tape, &vars, self.attention.bind(&tape), self.attention.heads, self.residual)?;
        let value = |v: Var| tape.value(v).clone();
        Ok(FusedScales {
            x_doubleprime: value(res.fused),
            per_scale: res.per_scale.iter().map(|&v| value(v)).collect(),
            offsets: res.offsets,
            attention_weights: res.weights.iter().map(|&v| value(v)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{normal, tensor_rng, ParamStore};
    use ndarray::{concatenate, Axis};

    fn rand_params(seed: u64, s: usize, n_max: usize, d: usize, heads: usize, residual: bool) -> FusionParams {
        let mut rng = tensor_rng(seed, "fusion");
        FusionParams {
            e_scale: normal(&mut rng, s, d, 1.0),
            e_pos: normal(&mut rng, n_max, d, 1.0),
            attention: AttentionWeights {
                w_q: normal(&mut rng, d, d, 0.5),
                w_k: normal(&mut rng, d, d, 0.5),
                w_v: normal(&mut rng, d, d, 0.5),
                w_o: normal(&mut rng, d, d, 0.5),
                heads,
            },
            residual,
        }
    }

    fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
        assert_eq!(a.dim(), b.dim());
        (a - b).mapv(f64::abs).fold(0.0, |m, &x| m.max(x))
    }

    #[test]
    fn encodings() {
        let mut p = rand_params(1, 2, 5, 4, 2, true);
        let x = normal(&mut tensor_rng(2, "x"), 3, 4, 1.0);
        let out = p.apply_encodings(&x, 1).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let want = x[[r, c]] + p.e_scale[[1, c]] + p.e_pos[[r, c]];
                assert!((out[[r, c]] - want).abs() < 1e-15);
            }
        }
        let z = p.apply_encodings(&Matrix::zeros((1, 4)), 0).unwrap();
        assert_eq!(z.row(0), &p.e_scale.row(0) + &p.e_pos.row(0));
        p.e_scale.fill(0.0);
        p.e_pos.fill(0.0);
        assert_eq!(p.apply_encodings(&x, 0).unwrap(), x);
        assert_eq!(
            p.apply_encodings(&Matrix::zeros((6, 4)), 0).unwrap_err(),
            ModelError::TooManyNodes { rows: 6, max: 5 }
        );
        assert_eq!(
            p.apply_encodings(&x, 2).unwrap_err(),
            ModelError::BadScaleIndex { index: 2, count: 2 }
        );
    }

    #[test]
    fn uniform_attention_gives_column_mean() {
        let mut p = rand_params(3, 2, 4, 4, 2, false);
        p.attention = AttentionWeights::identity_values(4, 2);
        let mut rng = tensor_rng(4, "x");
        let xs = [normal(&mut rng, 2, 4, 1.0), normal(&mut rng, 3, 4, 1.0)];
        let f = p.fuse(&xs).unwrap();
        let all = concatenate(Axis(0), &[xs[0].view(), xs[1].view()]).unwrap();
        let mean = all.mean_axis(Axis(0)).unwrap();
        for row in f.x_doubleprime.outer_iter() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_row_passes_through_projections() {
        let p = rand_params(5, 1, 2, 4, 1, false);
        let x = normal(&mut tensor_rng(6, "x"), 1, 4, 1.0);
        let f = p.fuse(&[x.clone()]).unwrap();
        let want = x.dot(&p.attention.w_v).dot(&p.attention.w_o);
        assert!(max_diff(&f.x_doubleprime, &want) < 1e-12);
        assert_eq!(f.select_final(0).unwrap(), &f.x_doubleprime);
    }

    #[test]
    fn zero_projections_with_residual_is_identity() {
        let mut p = rand_params(7, 2, 4, 4, 2, true);
        p.attention.w_v.fill(0.0);
        p.attention.w_o.fill(0.0);
        let mut rng = tensor_rng(8, "x");
        let xs = [normal(&mut rng, 2, 4, 1.0), normal(&mut rng, 3, 4, 1.0)];
        let f = p.fuse(&xs).unwrap();
        assert_eq!(f.per_scale, xs.to_vec());
    }

    #[test]
    fn matches_loop_oracle_and_partitions() {
        let p = rand_params(9, 2, 4, 8, 2, true);
        let mut rng = tensor_rng(10, "x");
        let xs = [normal(&mut rng, 3, 8, 1.0), normal(&mut rng, 4, 8, 1.0)];
        let f = p.fuse(&xs).unwrap();
        let all = concatenate(Axis(0), &[xs[0].view(), xs[1].view()]).unwrap();
        let w = &p.attention;
        let (q, k, v) = (all.dot(&w.w_q), all.dot(&w.w_k), all.dot(&w.w_v));
        let n = all.nrows();
        let dk = 4;
        let mut cat = Matrix::zeros((n, 8));
        for h in 0..2 {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| (0..dk).map(|c| q[[i, h * dk + c]] * k[[j, h * dk + c]]).sum::<f64>() / 2.0)
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for j in 0..n {
                    for c in 0..dk {
                        cat[[i, h * dk + c]] += (s[j] - m).exp() / z * v[[j, h * dk + c]];
                    }
                }
            }
        }
        let want = &all + &cat.dot(&w.w_o);
        assert!(max_diff(&f.x_doubleprime, &want) < 1e-12);
        assert_eq!(f.offsets, vec![0, 3]);
        let views: Vec<_> = f.per_scale.iter().map(|m| m.view()).collect();
        assert_eq!(concatenate(Axis(0), &views).unwrap(), f.x_doubleprime);
        for a in &f.attention_weights {
            for row in a.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn select_final_slicing() {
        let p = rand_params(11, 5, 4, 4, 2, true);
        let mut rng = tensor_rng(12, "x");
        let xs: Vec<Matrix> = (1..=5).map(|r| normal(&mut rng, r % 4 + 1, 4, 1.0)).collect();
        let f = p.fuse(&xs).unwrap();
        let off = f.offsets[4];
        let last = f.select_final(4).unwrap();
        assert_eq!(last, &f.x_doubleprime.slice(ndarray::s![off.., ..]).to_owned());
        assert_eq!(
            f.select_final(5).unwrap_err(),
            ModelError::BadScaleIndex { index: 5, count: 5 }
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let fusion = ScaleFusion::register(&mut Registrar::new(&mut store, 2), 2, 4, 4, 2, true).unwrap();
        let mut rng = tensor_rng(13, "x");
        let inputs = [normal(&mut rng, 3, 4, 1.0), normal(&mut rng, 2, 4, 1.0)];
        let report = crate::gradcheck::check_gradients(
            &store,
            &inputs,
            |ctx, xs| Ok(fusion.forward(ctx, xs)?.fused),
            1,
            usize::MAX,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
