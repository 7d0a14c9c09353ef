//! End-to-end model: vision path, optional graph branch, bridge and decoder
//! over one shared parameter store.

use crate::autodiff::{Matrix, Tape, Var};
use crate::crossmodal_bridge::{Bridge, Span};
use crate::error::{ModelError, PipelineError};
use crate::graph_encoder::{GraphEncoder, GraphEncoderConfig};
use crate::kg_sampler::{build_multiscale, prune_to_budget, EdgeTensors, Subgraph};
use crate::kg_store::KnowledgeGraph;
use crate::nn::Ctx;
use crate::node_encoder::{encode_nodes, ExternalEmbedder, HashedEmbedder, TextEmbedder};
use crate::params::{ParamStore, Registrar};
use crate::report_decoder::{
    generation_loss, target_sequence, DecodeMode, Decoder, DecoderConfig, Vocab, PROMPT,
};
use crate::scale_fusion::{select_final, ScaleFusion};
use crate::vision_path::{
    encode_image, extract_vision_tokens, ImageGrid, PatchEncoder, PatchEncoderParams, QFormer, Retriever,
    VisionMemory,
};

use super::config::{EmbedderKind, PipelineConfig, RetrievalQuery};
use super::corpus::ReportPair;

/// Node features and edges of one graph scale.
#[derive(Clone, Debug)]
pub struct ScaleInput {
    pub budget: usize,
    pub features: Matrix,
    pub edges: EdgeTensors,
}

#[derive(Clone, Debug)]
struct GraphBranch {
    encoder: GraphEncoder,
    fusion: Option<ScaleFusion>,
    scales: Vec<ScaleInput>,
    final_index: usize,
}

/// A tokenised training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Matrix,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: PipelineConfig,
    pub vocab: Vocab,
    pub prompt_ids: Vec<usize>,
    patch_encoder: PatchEncoder,
    qformer: QFormer,
    retriever: Retriever,
    graph: Option<GraphBranch>,
    bridge: Bridge,
    decoder: Decoder,
    memory: Option<Matrix>,
}

/// Vocabulary over the reports plus the prompt.
pub fn build_vocab(pairs: &[ReportPair]) -> Vocab {
    Vocab::build(pairs.iter().map(|p| p.report.as_str()).chain(std::iter::once(PROMPT)))
}

fn graph_scales(config: &PipelineConfig, kg: &KnowledgeGraph) -> Result<(Vec<ScaleInput>, usize), PipelineError> {
    let subgraphs: Vec<(usize, Subgraph)> = if config.use_multiscale {
        build_multiscale(kg, &config.scale_budgets)?
            .scales
            .into_iter()
            .map(|s| (s.budget, s.subgraph))
            .collect()
    } else {
        vec![(config.final_budget(), prune_to_budget(kg, config.final_budget()))]
    };
    let final_index = if config.use_multiscale { config.final_scale_index } else { 0 };
    if subgraphs[final_index].1.n_nodes() == 0 {
        return Err(PipelineError::BadParams(format!(
            "graph branch is on but the selected scale (budget {}) has no nodes; the knowledge graph has {} triples",
            subgraphs[final_index].0,
            kg.triples().len()
        )));
    }
    let external;
    let embedder: &dyn TextEmbedder = match config.embedder {
        EmbedderKind::Hashed => &HashedEmbedder,
        EmbedderKind::External => {
            let mut parts = config.embedder_command.split_whitespace().map(str::to_string);
            external = ExternalEmbedder {
                program: parts.next().unwrap_or_default(),
                args: parts.collect(),
            };
            &external
        }
    };
    let scales = subgraphs
        .into_iter()
        .map(|(budget, sub)| {
            let features = encode_nodes(&sub, kg, embedder, config.d)?.values;
            Ok(ScaleInput {
                budget,
                features,
                edges: sub.edges,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok((scales, final_index))
}

impl Model {
    /// Registers every parameter with the config seed and prepares the
    /// constant graph and memory inputs.
    pub fn build(config: &PipelineConfig, kg: &KnowledgeGraph, vocab: Vocab) -> Result<(Model, ParamStore), PipelineError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut reg = Registrar::new(&mut store, config.seed);
        let d = config.d;
        let patch_encoder = PatchEncoder::register(&mut reg, config.patch, d);
        let qformer = QFormer::register(&mut reg, d, config.heads)?;
        let retriever = Retriever::register(&mut reg, d, config.heads)?;
        let graph = if config.use_graph {
            let (scales, final_index) = graph_scales(config, kg)?;
            let encoder = GraphEncoder::register(&mut reg, &GraphEncoderConfig::new(config.use_rgcn_variant, d))?;
            let fusion = if config.use_multiscale {
                let n_max = scales.iter().map(|s| s.features.nrows()).max().unwrap_or(0).max(1);
                Some(ScaleFusion::register(&mut reg, scales.len(), n_max, d, config.heads, true)?)
            } else {
                None
            };
            Some(GraphBranch {
                encoder,
                fusion,
                scales,
                final_index,
            })
        } else {
            None
        };
        let bridge = Bridge::register(&mut reg, d, config.d_dec, config.heads, config.tie_projections)?;
        let prompt_ids = vocab.tokenize(PROMPT);
        let decoder = Decoder::register(
            &mut reg,
            &DecoderConfig {
                d: config.d_dec,
                layers: config.decoder_layers,
                heads: config.heads,
                vocab_size: vocab.len(),
                n_positions: prompt_ids.len() + 1 + config.max_len,
            },
        )?;
        let memory = if config.use_dvg {
            if kg.d_vision() != d {
                return Err(PipelineError::BadParams(format!(
                    "knowledge graph d_vision = {} but config d = {d}",
                    kg.d_vision()
                )));
            }
            let m = VisionMemory::from_graph(kg, Some(config.n_visual));
            if m.is_empty() {
                return Err(PipelineError::BadParams(
                    "use_dvg is on but the knowledge graph has no vision tokens; run `m3kg kg build` with the corpus first"
                        .into(),
                ));
            }
            Some(m.k_v)
        } else {
            None
        };
        let model = Model {
            config: config.clone(),
            vocab,
            prompt_ids,
            patch_encoder,
            qformer,
            retriever,
            graph,
            bridge,
            decoder,
            memory,
        };
        Ok((model, store))
    }

    pub fn examples(&self, pairs: &[ReportPair]) -> Vec<Example> {
        pairs
            .iter()
            .map(|p| Example {
                image: p.image.pixels.clone(),
                targets: target_sequence(&self.vocab, &p.report, self.config.max_len),
            })
            .collect()
    }

    /// Node counts per scale on the graph path (empty without a graph).
    pub fn node_counts(&self) -> Vec<usize> {
        self.graph
            .as_ref()
            .map(|g| g.scales.iter().map(|s| s.features.nrows()).collect())
            .unwrap_or_default()
    }

    /// Rows of the representation the bridge reads.
    pub fn final_nodes(&self) -> usize {
        self.graph
            .as_ref()
            .map(|g| g.scales[g.final_index].features.nrows())
            .unwrap_or(0)
    }

    pub fn memory_rows(&self) -> usize {
        self.memory.as_ref().map_or(0, |m| m.nrows())
    }

    /// Final graph representation, computed once per tape.
    pub fn graph_forward(&self, ctx: Ctx<'_>) -> Result<Option<Var>, ModelError> {
        let Some(g) = &self.graph else { return Ok(None) };
        let xs = g
            .scales
            .iter()
            .map(|s| {
                let v = ctx.tape.constant(s.features.clone());
                g.encoder.forward(ctx, v, &s.edges)
            })
            .collect::<Result<Vec<_>, _>>()?;
        match &g.fusion {
            Some(f) => {
                let fused = f.forward(ctx, &xs)?;
                Ok(Some(select_final(&fused.per_scale, g.final_index)?))
            }
            None => Ok(Some(select_final(&xs, g.final_index)?)),
        }
    }

    /// Prefix matrix `F` for one image and its stream spans.
    pub fn prefix(&self, ctx: Ctx<'_>, x_final: Option<Var>, image: &Matrix) -> Result<(Var, Vec<Span>), ModelError> {
        let f_v = self.patch_encoder.forward(ctx, image)?;
        let kv = match &self.memory {
            Some(m) => {
                let query = match self.config.retrieval_query {
                    RetrievalQuery::VisionGrid => f_v,
                    RetrievalQuery::QFormer => self.qformer.forward(ctx, f_v)?,
                };
                let mem = ctx.tape.constant(m.clone());
                Some(self.retriever.forward(ctx, query, mem)?)
            }
            None => None,
        };
        let (kg2v, v2kg) = match x_final {
            Some(x) => (Some(self.bridge.kg2v(ctx, f_v, x)?), Some(self.bridge.v2kg(ctx, x, f_v)?)),
            None => (None, None),
        };
        self.bridge.assemble(ctx, [Some(f_v), kv, kg2v, v2kg])
    }

    /// Mean per-example generation loss over a batch.
    pub fn batch_loss(&self, ctx: Ctx<'_>, batch: &[&Example]) -> Result<(Var, Vec<Span>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyInput("batch"));
        }
        let x_final = self.graph_forward(ctx)?;
        let mut losses = Vec::with_capacity(batch.len());
        let mut spans = Vec::new();
        for ex in batch {
            let (f, s) = self.prefix(ctx, x_final, &ex.image)?;
            if spans.is_empty() {
                spans = s;
            }
            let logits = self.decoder.forward(ctx, f, &self.prompt_ids, &ex.targets)?;
            losses.push(generation_loss(ctx.tape, logits, &ex.targets)?);
        }
        let total = ctx.tape.sum(&losses)?;
        Ok((ctx.tape.scale(total, 1.0 / batch.len() as f64), spans))
    }

    /// Value of the final graph representation.
    pub fn graph_value(&self, store: &ParamStore) -> Result<Option<Matrix>, ModelError> {
        let tape = Tape::new();
        let x = self.graph_forward(Ctx::new(&tape, store))?;
        Ok(x.map(|v| tape.value(v).clone()))
    }

    pub fn prefix_value(&self, store: &ParamStore, x_final: Option<&Matrix>, image: &Matrix) -> Result<(Matrix, Vec<Span>), ModelError> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let x = x_final.map(|m| tape.constant(m.clone()));
        let (f, spans) = self.prefix(ctx, x, image)?;
        let value = tape.value(f).clone();
        Ok((value, spans))
    }

    /// Generated token ids for one image.
    pub fn generate_ids(
        &self,
        store: &ParamStore,
        x_final: Option<&Matrix>,
        image: &Matrix,
        mode: DecodeMode,
    ) -> Result<Vec<usize>, ModelError> {
        let (f, _) = self.prefix_value(store, x_final, image)?;
        self.decoder.generate(store, &f, &self.prompt_ids, mode, self.config.max_len)
    }

    /// Greedy reports for every image.
    pub fn generate_reports(&self, store: &ParamStore, images: &[&Matrix]) -> Result<Vec<String>, ModelError> {
        let x = self.graph_value(store)?;
        images
            .iter()
            .map(|img| {
                let ids = self.generate_ids(store, x.as_ref(), img, DecodeMode::Greedy)?;
                Ok(self.vocab.detokenize(&ids))
            })
            .collect()
    }
}

/// Appends one pooled vision token per (image, activation map) using the
/// patch encoder initialised from `config.seed`. Returns the number added.
pub fn add_vision_tokens(kg: &mut KnowledgeGraph, pairs: &[ReportPair], config: &PipelineConfig) -> Result<usize, PipelineError> {
    if kg.d_vision() != config.d {
        return Err(PipelineError::BadParams(format!(
            "knowledge graph d_vision = {} but config d = {}",
            kg.d_vision(),
            config.d
        )));
    }
    let mut store = ParamStore::new();
    let enc = PatchEncoder::register(&mut Registrar::new(&mut store, config.seed), config.patch, config.d);
    let params = PatchEncoderParams {
        patch: config.patch,
        w_patch: store.value(enc.w_patch).clone(),
        b: store.value(enc.b).clone(),
    };
    let mut added = 0;
    for pair in pairs {
        if pair.activation_maps.is_empty() {
            continue;
        }
        let f_v = encode_image(&ImageGrid::new(pair.image.id.clone(), pair.image.pixels.clone()), &params)?;
        for (label, map) in &pair.activation_maps {
            for tok in extract_vision_tokens(map, &f_v, config.tau, *label, &pair.image.id)? {
                kg.add_vision_token(tok.label_index, tok.feature, &tok.source_id)?;
                added += 1;
            }
        }
    }
    Ok(added)
}
