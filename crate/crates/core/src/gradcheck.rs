//! Central finite-difference verification of tape gradients.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::ModelError;
use crate::nn::Ctx;
use crate::params::{tensor_rng, ParamStore};

pub const STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: String,
    pub checked: usize,
    /// Smallest |pre-activation| fed to a piecewise-linear op.
    pub kink_distance: f64,
}

/// Compares analytic and numeric gradients of `Σ out ⊙ P` for a fixed random
/// projection `P`, over every parameter the graph binds and every input.
/// At most `max_coords` coordinates per tensor are sampled.
pub fn check_gradients<F>(
    store: &ParamStore,
    inputs: &[Matrix],
    build: F,
    seed: u64,
    max_coords: usize,
) -> Result<GradCheckReport, ModelError>
where
    F: Fn(Ctx<'_>, &[Var]) -> Result<Var, ModelError>,
{
    let eval = |store: &ParamStore, inputs: &[Matrix], proj: Option<&Rc<Matrix>>| -> Result<(f64, Matrix), ModelError> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(Ctx::new(&tape, store), &vars)?;
        let value = tape.value(out).clone();
        let loss = match proj {
            Some(p) => tape.scalar(tape.dot_const(out, p.clone())?),
            None => 0.0,
        };
        Ok((loss, value))
    };

    let (_, out0) = eval(store, inputs, None)?;
    let mut rng = tensor_rng(seed, "gradcheck");
    let proj = Rc::new(Matrix::from_shape_fn(out0.dim(), |_| rng.random_range(-1.0..1.0)));

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(Ctx::new(&tape, store), &vars)?;
    let loss = tape.dot_const(out, proj.clone())?;
    let grads = tape.backward(loss);
    let kink_distance = tape.kink_distance();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        kink_distance,
    };
    let note = |name: &str, idx: usize, a: f64, n: f64, report: &mut GradCheckReport| {
        let e = rel_err(a, n);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = format!("{name}[{idx}] analytic {a:e} numeric {n:e}");
        }
    };
    let pick = |len: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        if len <= max_coords {
            (0..len).collect()
        } else {
            let mut v = sample(rng, len, max_coords).into_vec();
            v.sort_unstable();
            v
        }
    };

    for (pid, var) in tape.bound_params() {
        let g = grads.get_or_zeros(&tape, var);
        let name = store.name(pid).to_string();
        let cols = g.ncols();
        for idx in pick(g.len(), &mut rng) {
            let (i, j) = (idx / cols, idx % cols);
            let mut s = store.clone();
            s.value_mut(pid)[[i, j]] += STEP;
            let (lp, _) = eval(&s, inputs, Some(&proj))?;
            s.value_mut(pid)[[i, j]] -= 2.0 * STEP;
            let (lm, _) = eval(&s, inputs, Some(&proj))?;
            note(&name, idx, g[[i, j]], (lp - lm) / (2.0 * STEP), &mut report);
        }
    }
    for (k, var) in vars.iter().enumerate() {
        let g = grads.get_or_zeros(&tape, *var);
        let cols = g.ncols().max(1);
        for idx in pick(g.len(), &mut rng) {
            let (i, j) = (idx / cols, idx % cols);
            let mut xs = inputs.to_vec();
            xs[k][[i, j]] += STEP;
            let (lp, _) = eval(store, &xs, Some(&proj))?;
            xs[k][[i, j]] -= 2.0 * STEP;
            let (lm, _) = eval(store, &xs, Some(&proj))?;
            note(&format!("input{k}"), idx, g[[i, j]], (lp - lm) / (2.0 * STEP), &mut report);
        }
    }
    Ok(report)
}
