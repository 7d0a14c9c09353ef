//! Mini-batch AdamW training and checkpoint I/O with a vocabulary sidecar.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::crossmodal_bridge::Span;
use crate::error::PipelineError;
use crate::kg_store::KnowledgeGraph;
use crate::nn::Ctx;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::report_decoder::Vocab;

use super::config::PipelineConfig;
use super::corpus::ReportPair;
use super::model::{build_vocab, Example, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub node_counts: Vec<usize>,
    pub final_nodes: usize,
    /// Rows of the decoder prefix.
    pub n_f: usize,
    pub spans: Vec<Span>,
}

/// Deterministic batches: each epoch is a fresh permutation of the corpus.
pub struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Batcher {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n).max(1),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs `config.steps` updates. `on_step(step, loss)` is called after each
/// update and may return `false` to stop early.
pub fn train_loop(
    model: &Model,
    store: &mut ParamStore,
    examples: &[Example],
    mut on_step: impl FnMut(usize, f64, &ParamStore) -> bool,
) -> Result<TrainReport, PipelineError> {
    if examples.is_empty() {
        return Err(PipelineError::BadParams("training corpus is empty".into()));
    }
    let cfg = &model.config;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        store,
    );
    let mut batcher = Batcher::new(examples.len(), cfg.batch, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut spans = Vec::new();
    let mut n_f = 0;
    for step in 0..cfg.steps {
        let batch: Vec<&Example> = batcher.next_batch().into_iter().map(|i| &examples[i]).collect();
        let tape = Tape::new();
        let (loss, s) = model.batch_loss(Ctx::new(&tape, store), &batch)?;
        let value = tape.value(loss)[[0, 0]];
        if !value.is_finite() {
            return Err(PipelineError::BadParams(format!("loss became {value} at step {step}; lower lr")));
        }
        let grads = tape.backward(loss).param_grads(&tape);
        drop(tape);
        opt.step(store, &grads);
        spans = s;
        n_f = spans.last().map_or(0, Span::end);
        losses.push(value);
        if step % 100 == 0 {
            log::info!("step {step} loss {value:.4}");
        }
        if !on_step(step, value, store) {
            break;
        }
    }
    if spans.is_empty() {
        let x = model.graph_value(store)?;
        let (f, s) = model.prefix_value(store, x.as_ref(), &examples[0].image)?;
        n_f = f.nrows();
        spans = s;
    }
    Ok(TrainReport {
        losses,
        node_counts: model.node_counts(),
        final_nodes: model.final_nodes(),
        n_f,
        spans,
    })
}

/// Builds the vocabulary and model from the corpus, then trains.
pub fn train(
    config: &PipelineConfig,
    kg: &KnowledgeGraph,
    pairs: &[ReportPair],
) -> Result<(Model, ParamStore, TrainReport), PipelineError> {
    let (model, mut store) = Model::build(config, kg, build_vocab(pairs))?;
    let examples = model.examples(pairs);
    let report = train_loop(&model, &mut store, &examples, |_, _, _| true)?;
    Ok((model, store, report))
}

pub fn vocab_sidecar(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".vocab.jsonl");
    ckpt.with_file_name(name)
}

pub fn save_run(ckpt: impl AsRef<Path>, store: &ParamStore, vocab: &Vocab) -> Result<(), PipelineError> {
    let ckpt = ckpt.as_ref();
    checkpoint::save(ckpt, store)?;
    let side = vocab_sidecar(ckpt);
    let mut buf = Vec::new();
    vocab.write_jsonl(&mut buf).map_err(|e| PipelineError::io(&side, e))?;
    fs::write(&side, buf).map_err(|e| PipelineError::io(&side, e))
}

/// Rebuilds the model for `config` and loads trained parameters into it.
pub fn load_run(
    ckpt: impl AsRef<Path>,
    config: &PipelineConfig,
    kg: &KnowledgeGraph,
) -> Result<(Model, ParamStore), PipelineError> {
    let ckpt = ckpt.as_ref();
    let side = vocab_sidecar(ckpt);
    let file = fs::File::open(&side).map_err(|e| PipelineError::io(&side, e))?;
    let vocab = Vocab::read_jsonl(BufReader::new(file))?;
    let (model, mut store) = Model::build(config, kg, vocab)?;
    let trained = checkpoint::load(ckpt)?;
    store.load_from(&trained)?;
    Ok((model, store))
}
