//! Acceptance checks A1 to A7. Runs without the libtest harness so that every
//! criterion prints exactly one PASS or FAIL line. Positional arguments select
//! criteria by id, e.g. `cargo test --test acceptance -- A1 A4`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use m3kg::autodiff::Matrix;
use m3kg::checkpoint;
use m3kg::crossmodal_bridge::Bridge;
use m3kg::error::{KgError, PipelineError};
use m3kg::eval_metrics::{bleu, bleu_all, cider_d, meteor, rouge_l};
use m3kg::gradcheck::{check_gradients, GradCheckReport};
use m3kg::graph_encoder::{
    rgcn_forward, rgcn_layer, Activation, EncoderVariant, GraphEncoder, GraphEncoderConfig, RgcnLayerParams,
};
use m3kg::kg_sampler::{build_multiscale, EdgeTensors};
use m3kg::kg_store::{EntityRecord, EntityType, KnowledgeGraph, RelationType};
use m3kg::params::{normal, tensor_rng, ParamStore, Registrar};
use m3kg::pipeline::{
    add_vision_tokens, build_vocab, evaluate_model, load_corpus, run_sweep, synth_corpus, tables, train,
    train_loop, write_corpus, Model, PipelineConfig, ReportPair, Sweep, SynthOptions,
};
use m3kg::report_decoder::{generation_loss, Decoder, DecoderConfig, EOS};
use m3kg::scale_fusion::ScaleFusion;
use m3kg::vision_path::{QFormer, Retriever};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rng(seed: u64, name: &str) -> ChaCha8Rng {
    tensor_rng(seed, name)
}

// ---------------------------------------------------------------- A1

/// Explicit per-node, per-relation loop: `h_i = act(v_i W0 + Σ_r mean_{j→i, r} v_j W_r)`.
fn rgcn_loop(v: &Matrix, edges: &[(usize, usize, usize)], p: &RgcnLayerParams) -> Matrix {
    let (n, d_out) = (v.nrows(), p.w_0.ncols());
    let mut out = Matrix::zeros((n, d_out));
    for i in 0..n {
        for k in 0..d_out {
            let mut s = 0.0;
            for a in 0..v.ncols() {
                s += v[[i, a]] * p.w_0[[a, k]];
            }
            for (r, w) in p.w_r.iter().enumerate() {
                let srcs: Vec<usize> = edges.iter().filter(|e| e.1 == i && e.2 == r).map(|e| e.0).collect();
                for &j in &srcs {
                    let mut m = 0.0;
                    for a in 0..v.ncols() {
                        m += v[[j, a]] * w[[a, k]];
                    }
                    s += m / srcs.len() as f64;
                }
            }
            out[[i, k]] = match p.activation {
                Activation::Relu => s.max(0.0),
                Activation::Identity => s,
            };
        }
    }
    out
}

fn to_tensors(list: &[(usize, usize, usize)]) -> EdgeTensors {
    let mut e = EdgeTensors::default();
    for &(h, t, r) in list {
        e.edge_index[0].push(h);
        e.edge_index[1].push(t);
        e.edge_type.push(r);
    }
    e
}

fn rand_layer(r: &mut ChaCha8Rng, din: usize, dout: usize, activation: Activation) -> RgcnLayerParams {
    RgcnLayerParams {
        w_r: (0..3).map(|_| normal(r, din, dout, 1.0)).collect(),
        w_0: normal(r, din, dout, 1.0),
        activation,
    }
}

fn a1() -> Outcome {
    let mut worst = 0.0f64;
    let mut edges_seen = 0;
    for g in 0..200u64 {
        let mut r = rng(g, "a1");
        let n = r.random_range(1..=20);
        let m = r.random_range(0..=40);
        let list: Vec<(usize, usize, usize)> =
            (0..m).map(|_| (r.random_range(0..n), r.random_range(0..n), r.random_range(0..3))).collect();
        edges_seen += list.len();
        let (d0, d1, d2) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let v = normal(&mut r, n, d0, 1.0);
        let l1 = rand_layer(&mut r, d0, d1, Activation::Relu);
        let l2 = rand_layer(&mut r, d1, d2, Activation::Identity);
        let e = to_tensors(&list);

        let one = rgcn_layer(&v, &e, &l1).map_err(|x| x.to_string())?;
        let want_one = rgcn_loop(&v, &list, &l1);
        let two = rgcn_forward(&v, &e, &[l1, l2.clone()]).map_err(|x| x.to_string())?;
        let want_two = rgcn_loop(&want_one, &list, &l2);
        let d = max_diff(&one, &want_one).max(max_diff(&two, &want_two));
        ensure(d < 1e-12, || format!("graph {g}: max abs diff {d:e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("200 graphs, {edges_seen} edges, max abs diff {worst:.2e}"))
}

// ---------------------------------------------------------------- A2

const INSTANCES: usize = 5;
const KINK_MIN: f64 = 1e-3;

/// Runs `check` on fresh seeds until `INSTANCES` instances clear the kink
/// margin. Returns the worst relative error.
fn grad_module(name: &str, check: impl Fn(u64) -> GradCheckReport) -> Result<(f64, usize), String> {
    let mut accepted = 0;
    let mut worst = 0.0f64;
    let mut coords = 0;
    for seed in 0..60u64 {
        let rep = check(seed);
        if rep.kink_distance < KINK_MIN {
            continue;
        }
        ensure(rep.max_rel_err < 1e-6, || format!("{name} seed {seed}: rel err {:e} at {}", rep.max_rel_err, rep.worst))?;
        worst = worst.max(rep.max_rel_err);
        coords += rep.checked;
        accepted += 1;
        if accepted == INSTANCES {
            return Ok((worst, coords));
        }
    }
    Err(format!("{name}: only {accepted} instances away from ReLU kinks"))
}

/// Replaces every parameter with N(0, 0.5²) draws so instances cover more
/// than the initialisation scale.
fn randomize(store: &mut ParamStore, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    let mut r = rng(seed, "a2.params");
    for id in ids {
        let (a, b) = store.value(id).dim();
        *store.value_mut(id) = normal(&mut r, a, b, 0.5);
    }
}

/// Random row count in `rows`, then a standard normal matrix.
fn draw(r: &mut ChaCha8Rng, rows: std::ops::Range<usize>, cols: usize) -> Matrix {
    let n = r.random_range(rows);
    normal(r, n, cols, 1.0)
}

fn rand_edges(r: &mut ChaCha8Rng, n: usize, max_m: usize) -> EdgeTensors {
    let m = r.random_range(0..=max_m);
    let list: Vec<_> = (0..m).map(|_| (r.random_range(0..n), r.random_range(0..n), r.random_range(0..3))).collect();
    to_tensors(&list)
}

fn a2() -> Outcome {
    let mut lines = Vec::new();
    let mut record = |name: &str, res: (f64, usize)| lines.push(format!("{name} {:.1e}/{}", res.0, res.1));

    for variant in EncoderVariant::ALL {
        let res = grad_module(&format!("graph_encoder/{variant}"), |seed| {
            let mut r = rng(seed, "a2.graph");
            let n = r.random_range(2..7);
            let e = rand_edges(&mut r, n, 10);
            let v = normal(&mut r, n, 4, 1.0);
            let mut store = ParamStore::new();
            let mut cfg = GraphEncoderConfig::new(variant, 4);
            cfg.add_inverse_relations = seed % 2 == 1;
            let enc = GraphEncoder::register(&mut Registrar::new(&mut store, seed), &cfg).unwrap();
            randomize(&mut store, seed);
            check_gradients(&store, &[v], |ctx, xs| enc.forward(ctx, xs[0], &e), seed, usize::MAX).unwrap()
        })?;
        record(&format!("{variant}"), res);
    }

    let res = grad_module("scale_fusion", |seed| {
        let mut r = rng(seed, "a2.fusion");
        let k = r.random_range(1..4);
        let rows: Vec<usize> = (0..k).map(|_| r.random_range(1..4)).collect();
        let xs: Vec<Matrix> = rows.iter().map(|&n| normal(&mut r, n, 4, 1.0)).collect();
        let mut store = ParamStore::new();
        let n_max = *rows.iter().max().unwrap();
        let f = ScaleFusion::register(&mut Registrar::new(&mut store, seed), k, n_max, 4, 2, seed % 2 == 0).unwrap();
        randomize(&mut store, seed);
        check_gradients(&store, &xs, |ctx, v| Ok(f.forward(ctx, v)?.fused), seed, usize::MAX).unwrap()
    })?;
    record("fusion", res);

    let res = grad_module("qformer", |seed| {
        let mut r = rng(seed, "a2.qformer");
        let f_v = draw(&mut r, 1..6, 4);
        let mut store = ParamStore::new();
        let q = QFormer::register(&mut Registrar::new(&mut store, seed), 4, 2).unwrap();
        randomize(&mut store, seed);
        check_gradients(&store, &[f_v], |ctx, xs| q.forward(ctx, xs[0]), seed, usize::MAX).unwrap()
    })?;
    record("qformer", res);

    let res = grad_module("retrieve", |seed| {
        let mut r = rng(seed, "a2.retrieve");
        let query = draw(&mut r, 1..6, 4);
        let memory = draw(&mut r, 1..8, 4);
        let mut store = ParamStore::new();
        let ret = Retriever::register(&mut Registrar::new(&mut store, seed), 4, 2).unwrap();
        randomize(&mut store, seed);
        check_gradients(&store, &[query, memory], |ctx, xs| ret.forward(ctx, xs[0], xs[1]), seed, usize::MAX).unwrap()
    })?;
    record("retrieve", res);

    for (name, forward) in [("kg2v", true), ("v2kg", false)] {
        let res = grad_module(name, |seed| {
            let mut r = rng(seed, "a2.bridge");
            let f_v = draw(&mut r, 1..5, 4);
            let x = draw(&mut r, 1..5, 4);
            let mut store = ParamStore::new();
            let b = Bridge::register(&mut Registrar::new(&mut store, seed), 4, 6, 2, seed % 2 == 0).unwrap();
            randomize(&mut store, seed);
            check_gradients(
                &store,
                &[f_v, x],
                |ctx, xs| {
                    let streams = if forward {
                        [None, None, Some(b.kg2v(ctx, xs[0], xs[1])?), None]
                    } else {
                        [None, None, None, Some(b.v2kg(ctx, xs[1], xs[0])?)]
                    };
                    Ok(b.assemble(ctx, streams)?.0)
                },
                seed,
                usize::MAX,
            )
            .unwrap()
        })?;
        record(name, res);
    }

    let res = grad_module("decoder", |seed| {
        let mut r = rng(seed, "a2.decoder");
        let vocab = r.random_range(6..10);
        let cfg = DecoderConfig {
            d: 8,
            layers: r.random_range(1..3),
            heads: 2,
            vocab_size: vocab,
            n_positions: 12,
        };
        let prompt: Vec<usize> = (0..r.random_range(0..3)).map(|_| r.random_range(4..vocab)).collect();
        let mut target: Vec<usize> = (0..r.random_range(0..4)).map(|_| r.random_range(3..vocab)).collect();
        target.push(EOS);
        let f = draw(&mut r, 1..4, 8);
        let mut store = ParamStore::new();
        let dec = Decoder::register(&mut Registrar::new(&mut store, seed), &cfg).unwrap();
        randomize(&mut store, seed);
        check_gradients(
            &store,
            &[f],
            |ctx, xs| {
                let logits = dec.forward(ctx, xs[0], &prompt, &target)?;
                generation_loss(ctx.tape, logits, &target)
            },
            seed,
            24,
        )
        .unwrap()
    })?;
    record("decoder", res);
    Ok(format!("{INSTANCES} instances each; worst rel err/coords: {}", lines.join(", ")))
}

// ---------------------------------------------------------------- A3 / A7

fn synthetic(dir: &Path) -> Result<(KnowledgeGraph, Vec<ReportPair>), PipelineError> {
    let c = synth_corpus(&SynthOptions::default())?;
    write_corpus(dir, &c)?;
    Ok((c.kg, load_corpus(dir.join("corpus.jsonl"))?))
}

fn a3() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut kg, pairs) = synthetic(dir.path()).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::default();
    add_vision_tokens(&mut kg, &pairs, &cfg).map_err(|e| e.to_string())?;
    let (model, mut store) = Model::build(&cfg, &kg, build_vocab(&pairs)).map_err(|e| e.to_string())?;
    let examples = model.examples(&pairs);
    let mut trace = Vec::new();
    let mut reached = None;
    let mut eval_err = None;
    train_loop(&model, &mut store, &examples, |step, _, s| {
        let done = step + 1;
        if done % 100 != 0 {
            return true;
        }
        match evaluate_model(&model, s, &pairs) {
            Ok((m, _)) => {
                trace.push(format!("{done}:{:.3}/{:.3}", m.bleu4, m.ce_f1));
                if m.bleu4 >= 0.95 && m.ce_f1 >= 0.95 {
                    reached = Some((done, m.bleu4, m.ce_f1));
                    return false;
                }
                true
            }
            Err(e) => {
                eval_err = Some(e.to_string());
                false
            }
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(e) = eval_err {
        return Err(e);
    }
    match reached {
        Some((step, b, f)) => Ok(format!("{} pairs, BLEU-4 {b:.3}, CE F1 {f:.3} at step {step}", pairs.len())),
        None => Err(format!("not reached in {} steps; BLEU-4/CE F1 trace {}", cfg.steps, trace.join(" "))),
    }
}

fn a7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut kg, pairs) = synthetic(dir.path()).map_err(|e| e.to_string())?;
    let full = PipelineConfig::default();
    add_vision_tokens(&mut kg, &pairs, &full).map_err(|e| e.to_string())?;
    let mut base = full.clone();
    base.use_graph = false;
    base.use_multiscale = false;
    base.use_dvg = false;
    let score = |cfg: &PipelineConfig| -> Result<f64, String> {
        let (model, store, _) = train(cfg, &kg, &pairs).map_err(|e| e.to_string())?;
        Ok(evaluate_model(&model, &store, &pairs).map_err(|e| e.to_string())?.0.ce_f1)
    };
    let (b, d) = (score(&base)?, score(&full)?);
    let msg = format!("CE F1 BASE {b:.4}, (d) RG+MF+DVG {d:.4} after {} steps", full.steps);
    if d >= b {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- A4

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Distinct n-grams of `t` with their counts, in first-occurrence order.
fn grams(t: &[String], n: usize) -> Vec<(Vec<String>, usize)> {
    let mut out: Vec<(Vec<String>, usize)> = Vec::new();
    if t.len() < n || n == 0 {
        return out;
    }
    for i in 0..=t.len() - n {
        let g = t[i..i + n].to_vec();
        match out.iter_mut().find(|(h, _)| *h == g) {
            Some(e) => e.1 += 1,
            None => out.push((g, 1)),
        }
    }
    out
}

fn count_of(list: &[(Vec<String>, usize)], g: &[String]) -> usize {
    list.iter().find(|(h, _)| h == g).map_or(0, |e| e.1)
}

fn bleu_oracle(hyps: &[String], refs: &[String]) -> [f64; 4] {
    let (mut c, mut r) = (0usize, 0usize);
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (toks(h), toks(rf));
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let rg = grams(&rf, n);
            for (g, k) in grams(&h, n) {
                num[n - 1] += k.min(count_of(&rg, &g));
                den[n - 1] += k;
            }
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let mut out = [0.0; 4];
    for n in 1..=4 {
        if num[..n].iter().any(|&x| x == 0) {
            continue;
        }
        let logs: f64 = (0..n).map(|k| (num[k] as f64 / den[k] as f64).ln()).sum();
        out[n - 1] = bp * (logs / n as f64).exp();
    }
    out
}

/// Longest common subsequence by trying every subset of the hypothesis.
fn lcs_brute(h: &[String], r: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << h.len()) {
        let sub: Vec<&String> = (0..h.len()).filter(|i| mask >> i & 1 == 1).map(|i| &h[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = r.iter();
        if sub.iter().all(|w| it.any(|x| x == *w)) {
            best = sub.len();
        }
    }
    best
}

fn rouge_oracle(h: &str, r: &str) -> f64 {
    let (h, r) = (toks(h), toks(r));
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_brute(&h, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
    2.0 * p * rc / (p + rc)
}

/// Every partial one-to-one exact matching; keeps (most matches, fewest chunks).
fn meteor_oracle(h: &str, r: &str) -> f64 {
    fn walk(i: usize, h: &[String], r: &[String], used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == h.len() {
            let m = cur.len();
            let mut chunks = 0;
            for k in 0..m {
                if k == 0 || cur[k - 1].0 + 1 != cur[k].0 || cur[k - 1].1 + 1 != cur[k].1 {
                    chunks += 1;
                }
            }
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        walk(i + 1, h, r, used, cur, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == h[i] {
                used[j] = true;
                cur.push((i, j));
                walk(i + 1, h, r, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let (h, r) = (toks(h), toks(r));
    let mut best = (0, usize::MAX);
    walk(0, &h, &r, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    let (m, chunks) = best;
    if m == 0 {
        return 0.0;
    }
    let m = m as f64;
    let (p, rc) = (m / h.len() as f64, m / r.len() as f64);
    let f = p * rc / (0.9 * p + 0.1 * rc);
    f * (1.0 - 0.5 * (chunks as f64 / m).powi(3))
}

fn cider_oracle(hyps: &[String], sets: &[Vec<String>]) -> f64 {
    let n_docs = sets.len() as f64;
    let set_toks: Vec<Vec<Vec<String>>> = sets.iter().map(|s| s.iter().map(|r| toks(r)).collect()).collect();
    let df = |g: &[String]| -> f64 {
        set_toks
            .iter()
            .filter(|s| s.iter().any(|r| r.len() >= g.len() && r.windows(g.len()).any(|w| w == g)))
            .count() as f64
    };
    let weights = |t: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
        grams(t, n)
            .into_iter()
            .map(|(g, k)| {
                let idf = n_docs.ln() - df(&g).max(1.0).ln();
                (g, k as f64 * idf)
            })
            .collect()
    };
    let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (h, set) in hyps.iter().zip(&set_toks) {
        let ht = toks(h);
        let mut item = 0.0;
        for r in set {
            let delta = ht.len() as f64 - r.len() as f64;
            let pen = (-delta * delta / 72.0).exp();
            let mut orders = 0.0;
            for n in 1..=4 {
                let (vh, vr) = (weights(&ht, n), weights(r, n));
                let (nh, nr) = (norm(&vh), norm(&vr));
                if nh == 0.0 || nr == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (g, a) in &vh {
                    if let Some((_, b)) = vr.iter().find(|(x, _)| x == g) {
                        dot += a.min(*b) * b;
                    }
                }
                orders += dot / (nh * nr) * pen;
            }
            item += orders / 4.0;
        }
        total += 10.0 * item / set.len() as f64;
    }
    total / hyps.len() as f64
}

fn sentence(r: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    const WORDS: [&str; 6] = ["a", "b", "c", "d", "The", "the"];
    let n = r.random_range(min..=max);
    (0..n).map(|_| WORDS[r.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn a4() -> Outcome {
    let mut worst = [0.0f64; 4];
    for i in 0..200u64 {
        let mut r = rng(i, "a4");
        let (h, rf) = (sentence(&mut r, 0, 7), sentence(&mut r, 1, 7));
        let d = (rouge_l(&h, &rf) - rouge_oracle(&h, &rf)).abs();
        ensure(d < 1e-9, || format!("ROUGE-L `{h}` vs `{rf}`: diff {d:e}"))?;
        worst[1] = worst[1].max(d);
        let d = (meteor(&h, &rf) - meteor_oracle(&h, &rf)).abs();
        ensure(d < 1e-9, || format!("METEOR `{h}` vs `{rf}`: diff {d:e}"))?;
        worst[2] = worst[2].max(d);

        let k = r.random_range(1..=4);
        let hyps: Vec<String> = std::iter::once(h).chain((1..k).map(|_| sentence(&mut r, 0, 7))).collect();
        let refs: Vec<String> = std::iter::once(rf).chain((1..k).map(|_| sentence(&mut r, 1, 7))).collect();
        let got = bleu_all(&hyps, &refs).map_err(|e| e.to_string())?;
        let want = bleu_oracle(&hyps, &refs);
        for n in 0..4 {
            let d = (got[n] - want[n]).abs();
            ensure(d < 1e-9, || format!("BLEU-{} {hyps:?} vs {refs:?}: {} vs {}", n + 1, got[n], want[n]))?;
            worst[0] = worst[0].max(d);
        }
        let sets: Vec<Vec<String>> = refs
            .iter()
            .map(|first| std::iter::once(first.clone()).chain((0..r.random_range(0..3)).map(|_| sentence(&mut r, 1, 7))).collect())
            .collect();
        let got = cider_d(&hyps, &sets).map_err(|e| e.to_string())?;
        let want = cider_oracle(&hyps, &sets);
        let d = (got - want).abs();
        ensure(d < 1e-9, || format!("CIDEr-D {hyps:?} vs {sets:?}: {got} vs {want}"))?;
        worst[3] = worst[3].max(d);
    }

    let s = |x: &str| vec![x.to_string()];
    let b1 = bleu(&s("the the the the"), &s("the cat"), 1).map_err(|e| e.to_string())?;
    ensure(b1 == 0.25, || format!("BLEU-1 clip case gave {b1}"))?;
    let rl = rouge_l("the cat sat on mat", "the cat on the mat");
    ensure(rl == 0.8, || format!("ROUGE-L hand case gave {rl}"))?;
    let me = meteor("the cat", "the cat");
    ensure(me == 0.9375, || format!("METEOR identity case gave {me}"))?;
    let corpus: Vec<String> = ["heart size is normal", "no pleural effusion seen today", "mild basal atelectasis on left"]
        .iter()
        .map(|x| x.to_string())
        .collect();
    let sets: Vec<Vec<String>> = corpus.iter().map(|x| vec![x.clone()]).collect();
    let cd = cider_d(&corpus, &sets).map_err(|e| e.to_string())?;
    ensure(cd == 10.0, || format!("CIDEr-D identity case gave {cd}"))?;
    Ok(format!(
        "200 random pairs, max diff BLEU {:.1e} ROUGE-L {:.1e} METEOR {:.1e} CIDEr-D {:.1e}; hand cases exact",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// ---------------------------------------------------------------- A5

fn random_graph(seed: u64, with_tokens: bool) -> KnowledgeGraph {
    let mut r = rng(seed, "graph");
    let n = r.random_range(1..=40);
    let mut g = KnowledgeGraph::new(3);
    for i in 0..n {
        let name = format!("e{}", r.random_range(0..1000));
        let t = EntityType::ALL[r.random_range(0..EntityType::ALL.len())];
        g.add_entity(&EntityRecord::new(&format!("C{i:05}"), &name, t)).unwrap();
    }
    for _ in 0..r.random_range(0..=3 * n) {
        let (h, t) = (r.random_range(0..n), r.random_range(0..n));
        let rel = RelationType::ALL[r.random_range(0..3)];
        let _ = g.add_triple_count(h, t, rel, r.random_range(1..20));
    }
    if with_tokens {
        for _ in 0..r.random_range(0..4) {
            let f = (0..3).map(|_| r.random_range(-10.0..10.0)).collect();
            g.add_vision_token(r.random_range(0..14), f, "src").unwrap();
        }
    }
    g
}

fn sampler_checks() -> Result<String, String> {
    let mut scales = 0;
    for seed in 0..500u64 {
        let g = random_graph(seed, false);
        let mut r = rng(seed, "budgets");
        let mut budgets = Vec::new();
        let mut b = 0;
        for _ in 0..r.random_range(1..=5) {
            b += r.random_range(1..12);
            budgets.push(b);
        }
        let ms = build_multiscale(&g, &budgets).map_err(|e| e.to_string())?;
        let again = build_multiscale(&g, &budgets).map_err(|e| e.to_string())?;
        ensure(ms == again, || format!("graph {seed}: two builds differ"))?;
        for (k, s) in ms.scales.iter().enumerate() {
            let sub = &s.subgraph;
            ensure(sub.n_nodes() <= s.budget, || format!("graph {seed} scale {k}: over budget"))?;
            for (e, t) in sub.edges.edges().zip(&sub.triples) {
                let ok = e.0 < sub.n_nodes()
                    && e.1 < sub.n_nodes()
                    && sub.node_ids[e.0] == t.head_id
                    && sub.node_ids[e.1] == t.tail_id;
                ensure(ok, || format!("graph {seed} scale {k}: dangling or mismatched edge {e:?}"))?;
            }
            ensure(sub.edges.len() == sub.triples.len(), || format!("graph {seed} scale {k}: edge count"))?;
            if k > 0 {
                let prev = &ms.scales[k - 1].subgraph;
                let nested = prev.node_ids.iter().all(|v| sub.node_ids.contains(v))
                    && prev.triple_indices.iter().all(|t| sub.triple_indices.contains(t));
                ensure(nested, || format!("graph {seed}: scale {k} does not contain scale {}", k - 1))?;
            }
            scales += 1;
        }
    }
    Ok(format!("500 graphs, {scales} scales nested, deterministic, no dangling edges"))
}

fn expect_table(t: &m3kg::pipeline::Table, columns: &[&str], rows: &[&[&str]], n_metrics: usize) -> Result<(), String> {
    ensure(t.columns == columns, || format!("`{}` columns {:?}", t.title, t.columns))?;
    ensure(t.rows.len() == rows.len(), || format!("`{}` has {} rows", t.title, t.rows.len()))?;
    for (row, want) in t.rows.iter().zip(rows) {
        ensure(row.len() == columns.len(), || format!("`{}` ragged row {row:?}", t.title))?;
        ensure(&row[..want.len()] == *want, || format!("`{}` row {row:?}, expected prefix {want:?}", t.title))?;
        let numeric = row[want.len()..].iter().all(|c| c.parse::<f64>().is_ok_and(f64::is_finite));
        ensure(numeric && row.len() - want.len() == n_metrics, || format!("`{}` metric cells {row:?}", t.title))?;
    }
    Ok(())
}

fn a5() -> Outcome {
    let sampler = sampler_checks()?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut kg, pairs) = synthetic(dir.path()).map_err(|e| e.to_string())?;
    let mut base = PipelineConfig::default();
    base.steps = 20;
    base.max_len = 24;
    add_vision_tokens(&mut kg, &pairs, &base).map_err(|e| e.to_string())?;

    let rows = run_sweep(Sweep::Encoder, &base, &kg, &pairs, &pairs).map_err(|e| e.to_string())?;
    let enc = tables(Sweep::Encoder, &rows);
    ensure(enc.len() == 1, || "encoder sweep should yield one table".into())?;
    expect_table(
        &enc[0],
        &["Encoder", "BLEU-4", "ROUGE-L", "METEOR", "CIDEr"],
        &[&["GCN"], &["RGCN"], &["GAT"]],
        4,
    )?;

    let rows = run_sweep(Sweep::Toggles, &base, &kg, &pairs, &pairs).map_err(|e| e.to_string())?;
    let tog = tables(Sweep::Toggles, &rows);
    ensure(tog.len() == 2, || "toggle sweep should yield two tables".into())?;
    let marks: [&[&str]; 5] = [
        &["BASE", "-", "-", "-"],
        &["(a)", "-", "-", "✓"],
        &["(b)", "✓", "-", "-"],
        &["(c)", "✓", "✓", "-"],
        &["(d)", "✓", "✓", "✓"],
    ];
    expect_table(&tog[0], &["Setting", "RG", "MF", "DVG", "Precision", "Recall", "F1"], &marks, 3)?;
    expect_table(
        &tog[1],
        &["Setting", "RG", "MF", "DVG", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "RG-L", "METEOR", "CIDEr"],
        &marks,
        7,
    )?;
    Ok(format!("{sampler}; encoder table 3x5, toggle tables 5x7 and 5x11 ({} steps per cell)", base.steps))
}

// ---------------------------------------------------------------- A6

fn random_store(seed: u64) -> ParamStore {
    let mut r = rng(seed, "store");
    let mut s = ParamStore::new();
    for i in 0..r.random_range(0..8) {
        let (a, b) = (r.random_range(0..6), r.random_range(0..6));
        let mut m = normal(&mut r, a, b, 10.0);
        if let Some(x) = m.iter_mut().next() {
            *x = [f64::MIN_POSITIVE, -0.0, 1e300, f64::EPSILON][i % 4];
        }
        s.insert(format!("layer{i}.é{}", r.random_range(0..100)), m);
    }
    s
}

fn a6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for i in 0..100u64 {
        let g = random_graph(i, true);
        let path = dir.path().join("g.jsonl");
        g.save(&path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let back = KnowledgeGraph::load(&path).map_err(|e| e.to_string())?;
        ensure(back == g, || format!("graph {i}: structure changed"))?;
        back.save(&path).map_err(|e| e.to_string())?;
        ensure(std::fs::read(&path).map_err(|e| e.to_string())? == bytes, || format!("graph {i}: bytes changed"))?;

        let s = random_store(i);
        let path = dir.path().join("s.ckpt");
        checkpoint::save(&path, &s).map_err(|e| e.to_string())?;
        let back = checkpoint::load(&path).map_err(|e| e.to_string())?;
        let same = back.len() == s.len()
            && back.iter().zip(s.iter()).all(|((na, a), (nb, b))| {
                na == nb && a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        ensure(same, || format!("checkpoint {i}: tensors changed"))?;
        ensure(checkpoint::encode(&back) == checkpoint::encode(&s), || format!("checkpoint {i}: bytes changed"))?;
    }

    let mut lines_checked = 0;
    for i in 0..20u64 {
        let g = random_graph(i, true);
        let mut buf = Vec::new();
        g.write_jsonl(&mut buf).map_err(|e| e.to_string())?;
        let mut lines: Vec<String> = String::from_utf8(buf).unwrap().lines().map(String::from).collect();
        let k = 1 + rng(i, "corrupt").random_range(0..lines.len());
        lines[k - 1] = if k == 1 { "{\"kind\":\"header\"".into() } else { "{\"kind\":\"entty\"}".into() };
        match KnowledgeGraph::read_jsonl(lines.join("\n").as_bytes()) {
            Err(KgError::Parse { line, .. }) if line == k => lines_checked += 1,
            other => return Err(format!("graph {i}: corrupt line {k} gave {other:?}")),
        }
    }
    match PipelineConfig::parse("d = 8\nheads = 2\nsteps = many\n") {
        Err(PipelineError::Config { line: 3, .. }) => lines_checked += 1,
        other => return Err(format!("config error without line 3: {other:?}")),
    }
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(&corpus, "\n\nnot json\n").map_err(|e| e.to_string())?;
    match load_corpus(&corpus) {
        Err(e) if e.to_string().contains("line 3") => lines_checked += 1,
        other => return Err(format!("corpus error without line 3: {other:?}")),
    }
    let mut bad = checkpoint::encode(&random_store(3));
    bad.truncate(bad.len() - 3);
    ensure(checkpoint::decode(&bad).is_err(), || "truncated checkpoint decoded".into())?;
    Ok(format!("100 graphs and 100 checkpoints bit-exact; {lines_checked} malformed files reported the right line"))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [("A1", a1), ("A2", a2), ("A3", a3), ("A4", a4), ("A5", a5), ("A6", a6), ("A7", a7)];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, f) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w.eq_ignore_ascii_case(id)) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("{id} PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
