//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients for
//! every node reachable from the seed. Parameters are bound to the tape through
//! [`Tape::param`], which registers each [`ParamId`] at most once per tape so
//! gradients for shared weights come out already summed.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::ModelError;
use crate::params::{ParamId, ParamStore};

/// Row-major dense matrix used for every feature tensor in the pipeline.
pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Aggregate {
        input: Var,
        entries: Rc<[(usize, usize, f64)]>,
    },
    OuterSum(Var, Var),
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
        count: usize,
    },
    DotConst(Var, Rc<Matrix>),
    Sum(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a computation for later differentiation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    kink: Cell<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> ModelError {
    ModelError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            kink: Cell::new(f64::INFINITY),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Leaf node. Gradients are tracked for every leaf; constants simply
    /// ignore theirs.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for values that are inputs, not parameters.
    pub fn constant(&self, value: Matrix) -> Var {
        self.leaf(value)
    }

    /// Binds a stored parameter, reusing the existing leaf if already bound.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Parameters bound on this tape with their leaf handles.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> = self.params.borrow().iter().map(|(&p, &v)| (p, v)).collect();
        out.sort_by_key(|(p, _)| p.index());
        out
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Smallest absolute input seen by any piecewise-linear activation on
    /// this tape. Finite-difference checks need this to stay well above the
    /// perturbation step.
    pub fn kink_distance(&self) -> f64 {
        self.kink.get()
    }

    fn note_kinks(&self, m: &Matrix) {
        let min = m.iter().fold(f64::INFINITY, |acc, x| acc.min(x.abs()));
        if min < self.kink.get() {
            self.kink.set(min);
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, ModelError> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.ncols() != vb.nrows() {
                return Err(shape_err("matmul", va.shape(), vb.shape()));
            }
            va.dot(&*vb)
        };
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var, ModelError> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.ncols() != vb.ncols() {
                return Err(shape_err("matmul_nt", va.shape(), vb.shape()));
            }
            va.dot(&vb.t())
        };
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, ModelError> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.dim() != vb.dim() {
                return Err(shape_err("add", va.shape(), vb.shape()));
            }
            &*va + &*vb
        };
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds the 1×m row `b` to every row of `a`.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var, ModelError> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            if vb.nrows() != 1 || vb.ncols() != va.ncols() {
                return Err(shape_err("add_row", va.shape(), vb.shape()));
            }
            &*va + &*vb
        };
        Ok(self.push(value, Op::AddRow(a, b)))
    }

    /// Multiplies every row of `a` elementwise by the 1×m row `b`.
    pub fn mul_row(&self, a: Var, b: Var) -> Result<Var, ModelError> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            if vb.nrows() != 1 || vb.ncols() != va.ncols() {
                return Err(shape_err("mul_row", va.shape(), vb.shape()));
            }
            &*va * &*vb
        };
        Ok(self.push(value, Op::MulRow(a, b)))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let value = &*self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = {
            let va = self.value(a);
            self.note_kinks(&va);
            va.mapv(|x| x.max(0.0))
        };
        self.push(value, Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let value = {
            let va = self.value(a);
            self.note_kinks(&va);
            va.mapv(|x| if x > 0.0 { x } else { slope * x })
        };
        self.push(value, Op::LeakyRelu(a, slope))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise softmax. Entries where `mask` is `false` get probability 0.
    pub fn softmax_rows(&self, a: Var, mask: Option<&Array2<bool>>) -> Result<Var, ModelError> {
        let value = {
            let va = self.value(a);
            if let Some(m) = mask {
                if m.dim() != va.dim() {
                    return Err(shape_err("softmax mask", va.shape(), m.shape()));
                }
            }
            let mut out = Matrix::zeros(va.dim());
            for (i, row) in va.outer_iter().enumerate() {
                let allowed = |j: usize| mask.is_none_or(|m| m[[i, j]]);
                let max = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| allowed(j))
                    .fold(f64::NEG_INFINITY, |acc, (_, &x)| acc.max(x));
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for (j, &x) in row.iter().enumerate() {
                    if allowed(j) {
                        let e = (x - max).exp();
                        out[[i, j]] = e;
                        total += e;
                    }
                }
                out.row_mut(i).mapv_inplace(|e| e / total);
            }
            out
        };
        Ok(self.push(value, Op::Softmax(a)))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, ModelError> {
        let value = {
            let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = values.iter().map(|v| v.view()).collect();
            if views.is_empty() {
                return Err(ModelError::EmptyInput("concat_rows"));
            }
            concatenate(Axis(0), &views)
                .map_err(|_| ModelError::ShapeMismatch("concat_rows: widths differ".into()))?
        };
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, ModelError> {
        let value = {
            let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = values.iter().map(|v| v.view()).collect();
            if views.is_empty() {
                return Err(ModelError::EmptyInput("concat_cols"));
            }
            concatenate(Axis(1), &views)
                .map_err(|_| ModelError::ShapeMismatch("concat_cols: heights differ".into()))?
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var, ModelError> {
        let value = {
            let va = self.value(a);
            if start > end || end > va.nrows() {
                return Err(ModelError::IndexOutOfRange {
                    index: end,
                    len: va.nrows(),
                });
            }
            va.slice(s![start..end, ..]).to_owned()
        };
        Ok(self.push(value, Op::SliceRows(a, start)))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var, ModelError> {
        let value = {
            let va = self.value(a);
            if start > end || end > va.ncols() {
                return Err(ModelError::IndexOutOfRange {
                    index: end,
                    len: va.ncols(),
                });
            }
            va.slice(s![.., start..end]).to_owned()
        };
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    /// Row lookup, as used by embedding tables.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var, ModelError> {
        let value = {
            let vt = self.value(table);
            let mut out = Matrix::zeros((ids.len(), vt.ncols()));
            for (r, &id) in ids.iter().enumerate() {
                if id >= vt.nrows() {
                    return Err(ModelError::IndexOutOfRange {
                        index: id,
                        len: vt.nrows(),
                    });
                }
                out.row_mut(r).assign(&vt.row(id));
            }
            out
        };
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec())))
    }

    /// Sparse constant aggregation: `out[dst] += coef * input[src]` for each
    /// `(dst, src, coef)` entry, applied in entry order.
    pub fn aggregate(
        &self,
        input: Var,
        n_out: usize,
        entries: Rc<[(usize, usize, f64)]>,
    ) -> Result<Var, ModelError> {
        let value = {
            let vi = self.value(input);
            let mut out = Matrix::zeros((n_out, vi.ncols()));
            for &(dst, src, coef) in entries.iter() {
                if dst >= n_out {
                    return Err(ModelError::IndexOutOfRange {
                        index: dst,
                        len: n_out,
                    });
                }
                if src >= vi.nrows() {
                    return Err(ModelError::IndexOutOfRange {
                        index: src,
                        len: vi.nrows(),
                    });
                }
                out.row_mut(dst).scaled_add(coef, &vi.row(src));
            }
            out
        };
        Ok(self.push(value, Op::Aggregate { input, entries }))
    }

    /// `out[i][j] = col_a[i] + col_b[j]` for column vectors `a` (n×1), `b` (m×1).
    pub fn outer_sum(&self, a: Var, b: Var) -> Result<Var, ModelError> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.ncols() != 1 || vb.ncols() != 1 {
                return Err(shape_err("outer_sum", va.shape(), vb.shape()));
            }
            Matrix::from_shape_fn((va.nrows(), vb.nrows()), |(i, j)| va[[i, 0]] + vb[[j, 0]])
        };
        Ok(self.push(value, Op::OuterSum(a, b)))
    }

    /// Per-row standardisation (zero mean, unit variance), no affine part.
    pub fn layer_norm(&self, a: Var) -> Var {
        let (value, inv_std) = {
            let va = self.value(a);
            let d = va.ncols() as f64;
            let mut out = va.clone();
            let mut inv_std = Vec::with_capacity(va.nrows());
            for mut row in out.outer_iter_mut() {
                let mean = row.sum() / d;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
                let is = 1.0 / (var + LN_EPS).sqrt();
                row.mapv_inplace(|x| (x - mean) * is);
                inv_std.push(is);
            }
            (out, inv_std)
        };
        self.push(value, Op::LayerNorm { input: a, inv_std })
    }

    /// Mean token cross-entropy over rows whose target differs from
    /// `ignore`. Returns a 1×1 node; 0 when every row is ignored.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var, ModelError> {
        let (loss, probs, count) = {
            let vl = self.value(logits);
            if vl.nrows() != targets.len() {
                return Err(ModelError::LengthMismatch(vl.nrows(), targets.len()));
            }
            let mut probs = Matrix::zeros(vl.dim());
            let mut total = 0.0;
            let mut count = 0usize;
            for (i, row) in vl.outer_iter().enumerate() {
                let t = targets[i];
                if t >= vl.ncols() {
                    return Err(ModelError::IndexOutOfRange {
                        index: t,
                        len: vl.ncols(),
                    });
                }
                let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                let lse = max + sum.ln();
                for (j, &x) in row.iter().enumerate() {
                    probs[[i, j]] = (x - lse).exp();
                }
                if Some(t) != ignore {
                    total += lse - row[t];
                    count += 1;
                }
            }
            let loss = if count == 0 { 0.0 } else { total / count as f64 };
            (loss, probs, count)
        };
        Ok(self.push(
            Matrix::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets
                    .iter()
                    .map(|&t| if Some(t) == ignore { usize::MAX } else { t })
                    .collect(),
                probs,
                count,
            },
        ))
    }

    /// `Σ a ⊙ weights` as a 1×1 node.
    pub fn dot_const(&self, a: Var, weights: Rc<Matrix>) -> Result<Var, ModelError> {
        let value = {
            let va = self.value(a);
            if va.dim() != weights.dim() {
                return Err(shape_err("dot_const", va.shape(), weights.shape()));
            }
            (&*va * &*weights).sum()
        };
        Ok(self.push(Matrix::from_elem((1, 1), value), Op::DotConst(a, weights)))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&self, parts: &[Var]) -> Result<Var, ModelError> {
        let value = {
            let first = parts.first().ok_or(ModelError::EmptyInput("sum"))?;
            let mut acc = self.value(*first).clone();
            for &p in &parts[1..] {
                let vp = self.value(p);
                if vp.dim() != acc.dim() {
                    return Err(shape_err("sum", acc.shape(), vp.shape()));
                }
                acc += &*vp;
            }
            acc
        };
        Ok(self.push(value, Op::Sum(parts.to_vec())))
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::ones(nodes[root.0].value.dim()));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads, *a, g.dot(&vb.t()));
                    acc(&mut grads, *b, va.t().dot(&g));
                }
                Op::MatMulNt(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads, *a, g.dot(vb));
                    acc(&mut grads, *b, g.t().dot(va));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads, *b, (&g * va).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, &g * vb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::Relu(a) => {
                    let va = &nodes[a.0].value;
                    let mut ga = g.clone();
                    ga.zip_mut_with(va, |gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let va = &nodes[a.0].value;
                    let mut ga = g.clone();
                    ga.zip_mut_with(va, |gi, &x| {
                        if x <= 0.0 {
                            *gi *= slope
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let va = &nodes[a.0].value;
                    let mut ga = g.clone();
                    ga.zip_mut_with(va, |gi, &x| {
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *gi *= d;
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut ga = &g * p;
                    for (mut row, prow) in ga.outer_iter_mut().zip(p.outer_iter()) {
                        let dot = row.sum();
                        row.zip_mut_with(&prow, |r, &pi| *r -= pi * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = nodes[p.0].value.nrows();
                        acc(&mut grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = nodes[p.0].value.ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Matrix::zeros(nodes[a.0].value.dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Matrix::zeros(nodes[a.0].value.dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(table, ids) => {
                    let mut gt = Matrix::zeros(nodes[table.0].value.dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Aggregate { input, entries } => {
                    let mut gi = Matrix::zeros(nodes[input.0].value.dim());
                    for &(dst, src, coef) in entries.iter() {
                        gi.row_mut(src).scaled_add(coef, &g.row(dst));
                    }
                    acc(&mut grads, *input, gi);
                }
                Op::OuterSum(a, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(1)));
                    acc(&mut grads, *a, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                Op::LayerNorm { input, inv_std } => {
                    let y = &node.value;
                    let d = y.ncols() as f64;
                    let mut gi = Matrix::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let mean_g = gr.sum() / d;
                        let mean_gy = gr.dot(&yr) / d;
                        for j in 0..y.ncols() {
                            gi[[i, j]] = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    acc(&mut grads, *input, gi);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let mut gl = Matrix::zeros(probs.dim());
                    if *count > 0 {
                        let k = g[[0, 0]] / *count as f64;
                        for (i, &t) in targets.iter().enumerate() {
                            if t == usize::MAX {
                                continue;
                            }
                            let mut row = gl.row_mut(i);
                            row.assign(&probs.row(i));
                            row[t] -= 1.0;
                            row *= k;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::DotConst(a, w) => acc(&mut grads, *a, &**w * g[[0, 0]]),
                Op::Sum(parts) => {
                    for p in parts {
                        acc(&mut grads, *p, g.clone());
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient at `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient at `v`, zeros of the node's shape when unreachable.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(tape.shape(v)))
    }

    /// Gradients of every parameter bound on `tape`.
    pub fn param_grads(&self, tape: &Tape) -> Vec<(ParamId, Matrix)> {
        tape.bound_params()
            .into_iter()
            .map(|(p, v)| (p, self.get_or_zeros(tape, v)))
            .collect()
    }
}
