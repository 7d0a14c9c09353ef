//! Vocabulary, prefix-conditioned transformer decoder, teacher-forced loss
//! and greedy / beam generation.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{ModelError, PipelineError};
use crate::nn::{check_heads, Ctx, MultiHeadAttention};
use crate::params::{ParamId, ParamStore, Registrar};
use crate::text::tokens;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const PROMPT: &str = "Generate a comprehensive radiology report for this chest X-ray:";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabLine {
    id: usize,
    token: String,
}

impl Vocab {
    /// Specials first, then every distinct case-folded token in alphabetical
    /// order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokens).collect();
        let list = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_tokens(list)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        tokens(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Joins with single spaces and drops special ids.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (id, token) in self.tokens.iter().enumerate() {
            serde_json::to_writer(
                &mut *w,
                &VocabLine {
                    id,
                    token: token.clone(),
                },
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, PipelineError> {
        let mut tokens = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| PipelineError::format("vocab", e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VocabLine =
                serde_json::from_str(&line).map_err(|e| PipelineError::format(format!("vocab line {}", n + 1), e.to_string()))?;
            if rec.id != tokens.len() {
                return Err(PipelineError::format(
                    format!("vocab line {}", n + 1),
                    format!("expected id {}, found {}", tokens.len(), rec.id),
                ));
            }
            tokens.push(rec.token);
        }
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS.map(String::from) {
            return Err(PipelineError::format("vocab", "missing special tokens"));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Size of the text positional table.
    pub n_positions: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    attn: MultiHeadAttention,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pre-norm transformer over `[prefix ‖ prompt ‖ text]`. Prefix rows see
/// each other; text rows see the prefix and earlier text. The output
/// projection is the transposed token embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

fn layer_norm(tape: &Tape, x: Var, (g, b): (Var, Var)) -> Result<Var, ModelError> {
    let n = tape.layer_norm(x);
    let s = tape.mul_row(n, g)?;
    tape.add_row(s, b)
}

/// `mask[i][j]`: row `i` may read row `j`.
pub fn prefix_lm_mask(n_prefix: usize, n_text: usize) -> Array2<bool> {
    let n = n_prefix + n_text;
    Array2::from_shape_fn((n, n), |(i, j)| j < n_prefix || (i >= n_prefix && j <= i))
}

impl Decoder {
    pub fn register(reg: &mut Registrar<'_>, config: &DecoderConfig) -> Result<Self, ModelError> {
        check_heads(config.d, config.heads)?;
        if config.vocab_size < SPECIALS.len() {
            return Err(ModelError::EmptyInput("vocabulary"));
        }
        let d = config.d;
        let tok_emb = reg.normal("decoder.tok_emb", config.vocab_size, d, 0.02);
        let pos_emb = reg.normal("decoder.pos_emb", config.n_positions, d, 0.02);
        let ln = |reg: &mut Registrar<'_>, name: &str| {
            (reg.fill(&format!("{name}.g"), 1, d, 1.0), reg.fill(&format!("{name}.b"), 1, d, 0.0))
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("decoder.block{l}");
            blocks.push(Block {
                ln1: ln(reg, &format!("{p}.ln1")),
                attn: MultiHeadAttention::register(reg, &format!("{p}.attn"), d, config.heads)?,
                ln2: ln(reg, &format!("{p}.ln2")),
                w1: reg.xavier(&format!("{p}.ffn.W1"), d, 4 * d),
                b1: reg.fill(&format!("{p}.ffn.b1"), 1, 4 * d, 0.0),
                w2: reg.xavier(&format!("{p}.ffn.W2"), 4 * d, d),
                b2: reg.fill(&format!("{p}.ffn.b2"), 1, d, 0.0),
            });
        }
        let ln_f = ln(reg, "decoder.ln_f");
        Ok(Decoder {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    /// Final hidden states of the text rows.
    fn text_hidden(&self, ctx: Ctx<'_>, f: Var, text_ids: &[usize]) -> Result<Var, ModelError> {
        let tape = ctx.tape;
        let (n_f, d) = tape.shape(f);
        if d != self.config.d {
            return Err(ModelError::ShapeMismatch(format!("prefix width {d}, decoder width {}", self.config.d)));
        }
        if text_ids.len() > self.config.n_positions {
            return Err(ModelError::TooManyNodes {
                rows: text_ids.len(),
                max: self.config.n_positions,
            });
        }
        let tok_emb = ctx.p(self.tok_emb);
        let emb = tape.gather_rows(tok_emb, text_ids)?;
        let pos = tape.slice_rows(ctx.p(self.pos_emb), 0, text_ids.len())?;
        let text = tape.add(emb, pos)?;
        let mut h = if n_f == 0 { text } else { tape.concat_rows(&[f, text])? };
        let mask = prefix_lm_mask(n_f, text_ids.len());
        for b in &self.blocks {
            let x = layer_norm(tape, h, (ctx.p(b.ln1.0), ctx.p(b.ln1.1)))?;
            let a = b.attn.forward(ctx, x, x, Some(&mask))?;
            h = tape.add(h, a.out)?;
            let x = layer_norm(tape, h, (ctx.p(b.ln2.0), ctx.p(b.ln2.1)))?;
            let u = tape.matmul(x, ctx.p(b.w1))?;
            let u = tape.gelu(tape.add_row(u, ctx.p(b.b1))?);
            let u = tape.matmul(u, ctx.p(b.w2))?;
            let u = tape.add_row(u, ctx.p(b.b2))?;
            h = tape.add(h, u)?;
        }
        let text_h = tape.slice_rows(h, n_f, n_f + text_ids.len())?;
        layer_norm(tape, text_h, (ctx.p(self.ln_f.0), ctx.p(self.ln_f.1)))
    }

    /// Teacher-forced logits, one row per target: row `t` predicts
    /// `targets[t]` from the prefix, the prompt, `<bos>` and `targets[..t]`.
    pub fn forward(&self, ctx: Ctx<'_>, f: Var, prompt_ids: &[usize], target_ids: &[usize]) -> Result<Var, ModelError> {
        if target_ids.is_empty() {
            return Err(ModelError::EmptyInput("targets"));
        }
        let mut text = prompt_ids.to_vec();
        text.push(BOS);
        text.extend_from_slice(&target_ids[..target_ids.len() - 1]);
        let h = self.text_hidden(ctx, f, &text)?;
        let rows = ctx.tape.slice_rows(h, prompt_ids.len(), text.len())?;
        ctx.tape.matmul_nt(rows, ctx.p(self.tok_emb))
    }

    /// Next-token log-probabilities after `generated`.
    fn next_log_probs(
        &self,
        store: &ParamStore,
        f: &Matrix,
        prompt_ids: &[usize],
        generated: &[usize],
    ) -> Result<Array1<f64>, ModelError> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let fv = tape.constant(f.clone());
        let mut text = prompt_ids.to_vec();
        text.push(BOS);
        text.extend_from_slice(generated);
        let h = self.text_hidden(ctx, fv, &text)?;
        let last = tape.slice_rows(h, text.len() - 1, text.len())?;
        let logits = tape.matmul_nt(last, ctx.p(self.tok_emb))?;
        let row = tape.value(logits).row(0).to_owned();
        Ok(log_softmax(&row))
    }

    /// Generated ids, ending with `<eos>` when one was produced.
    pub fn generate(
        &self,
        store: &ParamStore,
        f: &Matrix,
        prompt_ids: &[usize],
        mode: DecodeMode,
        max_len: usize,
    ) -> Result<Vec<usize>, ModelError> {
        let max_len = max_len.min(self.config.n_positions.saturating_sub(prompt_ids.len() + 1) + 1);
        match mode {
            DecodeMode::Greedy => {
                let mut out = Vec::new();
                while out.len() < max_len {
                    let lp = self.next_log_probs(store, f, prompt_ids, &out)?;
                    let next = argmax(&lp);
                    out.push(next);
                    if next == EOS {
                        break;
                    }
                }
                Ok(out)
            }
            DecodeMode::Beam(k) => beam_search(k.max(1), max_len, |prefix| self.next_log_probs(store, f, prompt_ids, prefix)),
        }
    }
}

pub fn log_softmax(row: &Array1<f64>) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.mapv(|x| x - lse)
}

/// First index of the maximum.
pub fn argmax(row: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
struct Hyp {
    ids: Vec<usize>,
    score: f64,
}

fn better(a: &Hyp, b: &Hyp) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search over total log-probability; ties go to the lexicographically
/// smaller id sequence.
pub fn beam_search<F>(k: usize, max_len: usize, mut step: F) -> Result<Vec<usize>, ModelError>
where
    F: FnMut(&[usize]) -> Result<Array1<f64>, ModelError>,
{
    let mut alive = vec![Hyp {
        ids: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        let mut cands = Vec::new();
        for h in &alive {
            let lp = step(&h.ids)?;
            for (v, &l) in lp.iter().enumerate() {
                let mut ids = h.ids.clone();
                ids.push(v);
                cands.push(Hyp { ids, score: h.score + l });
            }
        }
        cands.sort_by(better);
        cands.truncate(k);
        alive.clear();
        for c in cands {
            if c.ids.last() == Some(&EOS) {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
        finished.sort_by(better);
        finished.truncate(k);
        let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if alive.is_empty() || finished.first().is_some_and(|f| f.score > best_alive) {
            break;
        }
    }
    let mut pool: Vec<Hyp> = finished.into_iter().chain(alive).collect();
    pool.sort_by(better);
    Ok(pool.into_iter().next().map(|h| h.ids).unwrap_or_default())
}

/// Mean negative log-likelihood over non-pad targets.
pub fn generation_loss(tape: &Tape, logits: Var, target_ids: &[usize]) -> Result<Var, ModelError> {
    tape.cross_entropy(logits, target_ids, Some(PAD))
}

pub fn generation_loss_value(logits: &Matrix, target_ids: &[usize]) -> Result<f64, ModelError> {
    let tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = generation_loss(&tape, l, target_ids)?;
    Ok(tape.scalar(loss))
}

/// Appends `<eos>` and truncates to `max_len`.
pub fn target_sequence(vocab: &Vocab, text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = vocab.tokenize(text);
    ids.push(EOS);
    if ids.len() > max_len {
        log::warn!("report truncated from {} to {max_len} tokens", ids.len());
        ids.truncate(max_len);
    }
    ids
}

/// Convenience: value of the teacher-forced logits.
pub fn forward_value(
    decoder: &Decoder,
    store: &ParamStore,
    f: &Matrix,
    prompt_ids: &[usize],
    target_ids: &[usize],
) -> Result<Matrix, ModelError> {
    let tape = Tape::new();
    let fv = tape.leaf(f.clone());
    let out = decoder.forward(Ctx::new(&tape, store), fv, prompt_ids, target_ids)?;
    let value = tape.value(out).clone();
    Ok(value)
}
