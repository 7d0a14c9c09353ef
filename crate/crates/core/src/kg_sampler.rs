//! Frequency-ranked pruning of a knowledge graph into nested node-budgeted
//! subgraphs, plus the `edge_index` / `edge_type` tensors consumed by the
//! graph encoders.

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;
use serde_json::json;

use crate::error::KgError;
use crate::kg_store::{KnowledgeGraph, Triple};

/// Edge tensors in COO form. Positions index into the owning subgraph's
/// `node_ids`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EdgeTensors {
    /// Row 0: head positions, row 1: tail positions.
    pub edge_index: [Vec<usize>; 2],
    pub edge_type: Vec<usize>,
}

impl EdgeTensors {
    pub fn len(&self) -> usize {
        self.edge_type.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edge_type.is_empty()
    }

    /// `(head, tail, relation)` per column.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.len()).map(|j| (self.edge_index[0][j], self.edge_index[1][j], self.edge_type[j]))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Subgraph {
    /// Entity ids in first-inclusion order.
    pub node_ids: Vec<usize>,
    /// Retained triples in frequency order.
    pub triples: Vec<Triple>,
    /// Indices of the retained triples in the source graph.
    pub triple_indices: Vec<usize>,
    pub edges: EdgeTensors,
}

impl Subgraph {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scale {
    pub budget: usize,
    pub subgraph: Subgraph,
}

/// Nested subgraphs at increasing node budgets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiScaleGraph {
    pub scales: Vec<Scale>,
    /// Row offset of each scale in the concatenated node axis.
    pub offsets: Vec<usize>,
    pub n_total: usize,
}

impl MultiScaleGraph {
    pub fn node_counts(&self) -> Vec<usize> {
        self.scales.iter().map(|s| s.subgraph.n_nodes()).collect()
    }
}

/// Triple indices sorted by (count desc, head name, tail name, relation code),
/// with the triple index as the final tiebreak.
pub fn frequency_order(graph: &KnowledgeGraph) -> Vec<usize> {
    let triples = graph.triples();
    let name = |id: usize| graph.entity(id).map(|e| e.name.as_str()).unwrap_or("");
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (&triples[a], &triples[b]);
        tb.count
            .cmp(&ta.count)
            .then_with(|| name(ta.head_id).cmp(name(tb.head_id)))
            .then_with(|| name(ta.tail_id).cmp(name(tb.tail_id)))
            .then(ta.relation.code().cmp(&tb.relation.code()))
            .then(a.cmp(&b))
    });
    order
}

struct GreedyState {
    node_ids: Vec<usize>,
    position: HashMap<usize, usize>,
    admitted: Vec<bool>,
}

impl GreedyState {
    fn new(n_triples: usize) -> Self {
        GreedyState {
            node_ids: Vec::new(),
            position: HashMap::new(),
            admitted: vec![false; n_triples],
        }
    }

    /// One pass over `order`, admitting every not-yet-admitted triple whose
    /// new endpoints still fit in `budget`.
    fn extend(&mut self, graph: &KnowledgeGraph, order: &[usize], budget: usize) {
        let triples = graph.triples();
        for &idx in order {
            if self.admitted[idx] {
                continue;
            }
            let t = &triples[idx];
            let mut fresh = 0;
            if !self.position.contains_key(&t.head_id) {
                fresh += 1;
            }
            if t.tail_id != t.head_id && !self.position.contains_key(&t.tail_id) {
                fresh += 1;
            }
            if self.node_ids.len() + fresh > budget {
                continue;
            }
            for id in [t.head_id, t.tail_id] {
                if !self.position.contains_key(&id) {
                    self.position.insert(id, self.node_ids.len());
                    self.node_ids.push(id);
                }
            }
            self.admitted[idx] = true;
        }
    }

    fn snapshot(&self, graph: &KnowledgeGraph, order: &[usize]) -> Subgraph {
        let triple_indices: Vec<usize> = order.iter().copied().filter(|&i| self.admitted[i]).collect();
        let triples: Vec<Triple> = triple_indices.iter().map(|&i| graph.triples()[i].clone()).collect();
        let mut sub = Subgraph {
            node_ids: self.node_ids.clone(),
            triples,
            triple_indices,
            edges: EdgeTensors::default(),
        };
        sub.edges = build_edge_tensors(&sub);
        sub
    }
}

/// Greedy single-pass pruning: triples are scanned in frequency order and
/// admitted while the distinct-node count stays within `budget`; a triple that
/// would overflow is skipped and the scan continues.
pub fn prune_to_budget(graph: &KnowledgeGraph, budget: usize) -> Subgraph {
    let order = frequency_order(graph);
    let mut state = GreedyState::new(graph.triples().len());
    state.extend(graph, &order, budget);
    state.snapshot(graph, &order)
}

/// Builds nested scales. The first scale is `prune_to_budget(budgets[0])`;
/// every later scale continues the greedy scan from the previous scale's
/// admitted state, so node lists are prefixes of each other.
pub fn build_multiscale(graph: &KnowledgeGraph, budgets: &[usize]) -> Result<MultiScaleGraph, KgError> {
    if budgets.is_empty() || budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(KgError::BadBudgets(budgets.to_vec()));
    }
    let order = frequency_order(graph);
    let mut state = GreedyState::new(graph.triples().len());
    let mut scales = Vec::with_capacity(budgets.len());
    let mut offsets = Vec::with_capacity(budgets.len());
    let mut n_total = 0;
    for &budget in budgets {
        state.extend(graph, &order, budget);
        let subgraph = state.snapshot(graph, &order);
        offsets.push(n_total);
        n_total += subgraph.n_nodes();
        scales.push(Scale { budget, subgraph });
    }
    Ok(MultiScaleGraph {
        scales,
        offsets,
        n_total,
    })
}

/// Column j holds the positions of triple j's head and tail in `node_ids`
/// and its relation code.
pub fn build_edge_tensors(subgraph: &Subgraph) -> EdgeTensors {
    let position: HashMap<usize, usize> = subgraph
        .node_ids
        .iter()
        .enumerate()
        .map(|(p, &id)| (id, p))
        .collect();
    let mut out = EdgeTensors::default();
    for t in &subgraph.triples {
        out.edge_index[0].push(position[&t.head_id]);
        out.edge_index[1].push(position[&t.tail_id]);
        out.edge_type.push(t.relation.code());
    }
    out
}

/// `count` evenly spaced budgets ending at `final_budget`, deduplicated so
/// the list stays strictly increasing.
pub fn default_budgets(final_budget: usize, count: usize) -> Vec<usize> {
    let count = count.max(1);
    let mut out: Vec<usize> = (1..=count)
        .map(|k| (final_budget * k).div_ceil(count))
        .filter(|&b| b > 0)
        .collect();
    out.dedup();
    if out.is_empty() {
        out.push(final_budget);
    }
    out
}

/// Writes one `scale` record per scale followed by that scale's triples.
pub fn write_scales_jsonl(
    graph: &KnowledgeGraph,
    ms: &MultiScaleGraph,
    w: &mut impl Write,
) -> std::io::Result<()> {
    let mut line = |v: serde_json::Value| -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, &v)?;
        w.write_all(b"\n")
    };
    line(json!({
        "kind": "header",
        "format": "m3kg-scales",
        "version": 1,
        "n_scales": ms.scales.len(),
        "n_total": ms.n_total,
    }))?;
    let cui = |id: usize| graph.entity(id).map(|e| e.cui.clone()).unwrap_or_default();
    for (i, scale) in ms.scales.iter().enumerate() {
        let sub = &scale.subgraph;
        line(json!({
            "kind": "scale",
            "index": i,
            "budget": scale.budget,
            "offset": ms.offsets[i],
            "n_nodes": sub.n_nodes(),
            "n_triples": sub.triples.len(),
            "node_cuis": sub.node_ids.iter().map(|&id| cui(id)).collect::<Vec<_>>(),
            "edge_index": sub.edges.edge_index,
            "edge_type": sub.edges.edge_type,
        }))?;
        for t in &sub.triples {
            line(json!({
                "kind": "triple",
                "head_cui": cui(t.head_id),
                "tail_cui": cui(t.tail_id),
                "relation": t.relation.as_str(),
                "count": t.count,
            }))?;
        }
    }
    Ok(())
}
