//! Typed multi-modal knowledge graph: entities keyed by CUI, counted relation
//! triples, and disease-aware vision tokens.
//!
//! The on-disk form is JSON Lines. The first line is a header
//! `{"kind":"header","format":"m3kg","version":1,"d_vision":D}`, followed by
//! `entity`, `triple` and `vision_token` records. Triples name their endpoints
//! by CUI, so every entity must appear before the first triple.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::KgError;

pub const FORMAT_NAME: &str = "m3kg";
pub const FORMAT_VERSION: u64 = 1;

/// Number of CheXpert-style disease labels.
pub const NUM_LABELS: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    Anatomy,
    Disorder,
    Concept,
    Device,
    Procedure,
    Size,
}

impl EntityType {
    pub const ALL: [EntityType; 6] = [
        EntityType::Anatomy,
        EntityType::Disorder,
        EntityType::Concept,
        EntityType::Device,
        EntityType::Procedure,
        EntityType::Size,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Anatomy => "Anatomy",
            EntityType::Disorder => "Disorder",
            EntityType::Concept => "Concept",
            EntityType::Device => "Device",
            EntityType::Procedure => "Procedure",
            EntityType::Size => "Size",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| KgError::BadEntityType(s.to_string()))
    }
}

/// Relation kinds with stable integer codes used by `edge_type` tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationType {
    LocatedAt = 0,
    Modify = 1,
    SuggestiveOf = 2,
}

impl RelationType {
    pub const ALL: [RelationType; 3] = [
        RelationType::LocatedAt,
        RelationType::Modify,
        RelationType::SuggestiveOf,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        RelationType::ALL.get(code).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationType::LocatedAt => "located_at",
            RelationType::Modify => "modify",
            RelationType::SuggestiveOf => "suggestive_of",
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationType {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RelationType::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| KgError::BadRelation(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub id: usize,
    pub cui: String,
    pub name: String,
    pub entity_type: EntityType,
    pub aliases: Vec<String>,
    pub definition: String,
    pub tui: String,
}

/// Untyped entity input, as read from an ingestion file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub cui: String,
    pub name: String,
    pub entity_type: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub definition: String,
    #[serde(default)]
    pub tui: String,
}

impl EntityRecord {
    pub fn new(cui: &str, name: &str, entity_type: EntityType) -> Self {
        EntityRecord {
            cui: cui.to_string(),
            name: name.to_string(),
            entity_type: entity_type.as_str().to_string(),
            ..Default::default()
        }
    }

    pub fn with_aliases(mut self, aliases: &[&str]) -> Self {
        self.aliases = aliases.iter().map(|a| a.to_string()).collect();
        self
    }

    pub fn with_definition(mut self, definition: &str) -> Self {
        self.definition = definition.to_string();
        self
    }

    pub fn with_tui(mut self, tui: &str) -> Self {
        self.tui = tui.to_string();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triple {
    pub head_id: usize,
    pub tail_id: usize,
    pub relation: RelationType,
    /// Number of source reports contributing this triple.
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionToken {
    pub id: usize,
    pub label_index: usize,
    pub feature: Vec<f64>,
    pub source_id: String,
}

/// Decides whether a new record should merge into an existing entity whose
/// CUI differs. Exact CUI matches always merge.
pub type MergePredicate<'a> = &'a dyn Fn(&Entity, &EntityRecord) -> bool;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    cui_index: HashMap<String, usize>,
    triples: Vec<Triple>,
    triple_index: HashMap<(usize, usize, RelationType), usize>,
    vision_tokens: Vec<VisionToken>,
    d_vision: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_entities: usize,
    pub n_triples: usize,
    pub n_triple_instances: u64,
    pub n_vision_tokens: usize,
    /// Unique triples per relation name; all three relations are present.
    pub per_relation_counts: BTreeMap<String, usize>,
    /// Σ count per relation name.
    pub per_relation_instances: BTreeMap<String, u64>,
}

fn fold(s: &str) -> String {
    s.to_lowercase()
}

fn union_aliases(into: &mut Vec<String>, extra: &[String]) {
    let mut seen: HashSet<String> = into.iter().map(|a| fold(a)).collect();
    for a in extra {
        if seen.insert(fold(a)) {
            into.push(a.clone());
        }
    }
}

impl KnowledgeGraph {
    pub fn new(d_vision: usize) -> Self {
        KnowledgeGraph {
            d_vision,
            ..Default::default()
        }
    }

    pub fn d_vision(&self) -> usize {
        self.d_vision
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: usize) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn entity_by_cui(&self, cui: &str) -> Option<&Entity> {
        self.cui_index.get(&fold(cui)).map(|&id| &self.entities[id])
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn vision_tokens(&self) -> &[VisionToken] {
        &self.vision_tokens
    }

    /// Adds an entity or merges it into the entity with the same CUI.
    pub fn add_entity(&mut self, record: &EntityRecord) -> Result<usize, KgError> {
        self.add_entity_with(record, &|_, _| false)
    }

    /// Like [`add_entity`](Self::add_entity), additionally merging into the
    /// first existing entity accepted by `merge`.
    pub fn add_entity_with(
        &mut self,
        record: &EntityRecord,
        merge: MergePredicate<'_>,
    ) -> Result<usize, KgError> {
        if record.cui.trim().is_empty() {
            return Err(KgError::EmptyField("cui"));
        }
        if record.name.trim().is_empty() {
            return Err(KgError::EmptyField("name"));
        }
        let entity_type: EntityType = record.entity_type.parse()?;
        let key = fold(&record.cui);
        let existing = self
            .cui_index
            .get(&key)
            .copied()
            .or_else(|| self.entities.iter().find(|e| merge(e, record)).map(|e| e.id));
        if let Some(id) = existing {
            union_aliases(&mut self.entities[id].aliases, &record.aliases);
            return Ok(id);
        }
        let id = self.entities.len();
        let mut aliases = Vec::new();
        union_aliases(&mut aliases, &record.aliases);
        self.entities.push(Entity {
            id,
            cui: record.cui.clone(),
            name: record.name.clone(),
            entity_type,
            aliases,
            definition: record.definition.clone(),
            tui: record.tui.clone(),
        });
        self.cui_index.insert(key, id);
        Ok(id)
    }

    /// Adds one occurrence of `(head, tail, relation)`.
    pub fn add_triple(
        &mut self,
        head_id: usize,
        tail_id: usize,
        relation: RelationType,
    ) -> Result<usize, KgError> {
        self.add_triple_count(head_id, tail_id, relation, 1)
    }

    /// Adds `count` occurrences at once. A zero count still registers the key.
    pub fn add_triple_count(
        &mut self,
        head_id: usize,
        tail_id: usize,
        relation: RelationType,
        count: u64,
    ) -> Result<usize, KgError> {
        for id in [head_id, tail_id] {
            if id >= self.entities.len() {
                return Err(KgError::UnknownEntity(id));
            }
        }
        if head_id == tail_id && relation != RelationType::Modify {
            return Err(KgError::SelfLoop(head_id));
        }
        let key = (head_id, tail_id, relation);
        if let Some(&idx) = self.triple_index.get(&key) {
            self.triples[idx].count += count;
            return Ok(idx);
        }
        let idx = self.triples.len();
        self.triples.push(Triple {
            head_id,
            tail_id,
            relation,
            count,
        });
        self.triple_index.insert(key, idx);
        Ok(idx)
    }

    pub fn add_vision_token(
        &mut self,
        label_index: usize,
        feature: Vec<f64>,
        source_id: &str,
    ) -> Result<usize, KgError> {
        if label_index >= NUM_LABELS {
            return Err(KgError::BadLabel(label_index));
        }
        if feature.len() != self.d_vision {
            return Err(KgError::BadFeatureWidth {
                expected: self.d_vision,
                got: feature.len(),
            });
        }
        if feature.iter().any(|x| !x.is_finite()) {
            return Err(KgError::NonFinite);
        }
        let id = self.vision_tokens.len();
        self.vision_tokens.push(VisionToken {
            id,
            label_index,
            feature,
            source_id: source_id.to_string(),
        });
        Ok(id)
    }

    /// Merges every entity, triple and vision token of `other` into `self`.
    pub fn merge(&mut self, other: &KnowledgeGraph) -> Result<(), KgError> {
        let mut remap = Vec::with_capacity(other.entities.len());
        for e in &other.entities {
            remap.push(self.add_entity(&e.to_record())?);
        }
        for t in &other.triples {
            self.add_triple_count(remap[t.head_id], remap[t.tail_id], t.relation, t.count)?;
        }
        for v in &other.vision_tokens {
            self.add_vision_token(v.label_index, v.feature.clone(), &v.source_id)?;
        }
        Ok(())
    }

    pub fn stats(&self) -> GraphStats {
        let mut per_relation_counts: BTreeMap<String, usize> = RelationType::ALL
            .iter()
            .map(|r| (r.as_str().to_string(), 0))
            .collect();
        let mut per_relation_instances: BTreeMap<String, u64> = RelationType::ALL
            .iter()
            .map(|r| (r.as_str().to_string(), 0))
            .collect();
        for t in &self.triples {
            *per_relation_counts.get_mut(t.relation.as_str()).unwrap() += 1;
            *per_relation_instances.get_mut(t.relation.as_str()).unwrap() += t.count;
        }
        GraphStats {
            n_entities: self.entities.len(),
            n_triples: self.triples.len(),
            n_triple_instances: self.triples.iter().map(|t| t.count).sum(),
            n_vision_tokens: self.vision_tokens.len(),
            per_relation_counts,
            per_relation_instances,
        }
    }

    /// Number of triples touching each entity (a self-loop counts once).
    pub fn incident_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.entities.len()];
        for t in &self.triples {
            counts[t.head_id] += 1;
            if t.tail_id != t.head_id {
                counts[t.tail_id] += 1;
            }
        }
        counts
    }

    /// Graphviz rendering of at most `max_nodes` entities, picked by
    /// descending incident-triple count with ties broken by name.
    pub fn export_dot(&self, max_nodes: usize) -> String {
        let counts = self.incident_counts();
        let mut order: Vec<usize> = (0..self.entities.len()).collect();
        order.sort_by(|&a, &b| {
            counts[b]
                .cmp(&counts[a])
                .then_with(|| self.entities[a].name.cmp(&self.entities[b].name))
                .then(a.cmp(&b))
        });
        order.truncate(max_nodes);
        let selected: HashSet<usize> = order.iter().copied().collect();

        let mut out = String::from("digraph M3KG {\n");
        for &id in &order {
            let e = &self.entities[id];
            out.push_str(&format!(
                "  n{id} [label=\"{}({})\"];\n",
                dot_escape(&e.name),
                e.entity_type
            ));
        }
        for t in &self.triples {
            if selected.contains(&t.head_id) && selected.contains(&t.tail_id) {
                out.push_str(&format!(
                    "  n{} -> n{} [label=\"{}\"];\n",
                    t.head_id, t.tail_id, t.relation
                ));
            }
        }
        out.push_str("}\n");
        out
    }

    /// Makes the graph immutable and shareable across threads.
    pub fn freeze(self) -> FrozenGraph {
        FrozenGraph(Arc::new(self))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KgError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| KgError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|source| KgError::Io {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KgError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| KgError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_jsonl(BufReader::new(file))
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut line = |rec: &Record| -> std::io::Result<()> {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")
        };
        line(&Record::Header {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            d_vision: self.d_vision,
        })?;
        for e in &self.entities {
            line(&Record::Entity(e.to_record()))?;
        }
        for t in &self.triples {
            line(&Record::Triple {
                head_cui: self.entities[t.head_id].cui.clone(),
                tail_cui: self.entities[t.tail_id].cui.clone(),
                relation: t.relation.as_str().to_string(),
                count: t.count,
            })?;
        }
        for v in &self.vision_tokens {
            line(&Record::VisionToken {
                label_index: v.label_index,
                source_id: v.source_id.clone(),
                feature: v.feature.clone(),
            })?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, KgError> {
        let mut graph: Option<KnowledgeGraph> = None;
        let mut seen_triple = false;
        for (i, line) in r.lines().enumerate() {
            let lineno = i + 1;
            let err = |message: String| KgError::Parse {
                line: lineno,
                message,
            };
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            let Some(g) = graph.as_mut() else {
                match rec {
                    Record::Header {
                        format,
                        version,
                        d_vision,
                    } => {
                        if format != FORMAT_NAME {
                            return Err(err(format!("unknown format `{format}`")));
                        }
                        if version != FORMAT_VERSION {
                            return Err(KgError::SchemaVersionMismatch {
                                found: version,
                                supported: FORMAT_VERSION,
                            });
                        }
                        graph = Some(KnowledgeGraph::new(d_vision));
                        continue;
                    }
                    _ => return Err(err("first record must be the header".into())),
                }
            };
            match rec {
                Record::Header { .. } => return Err(err("duplicate header".into())),
                Record::Entity(e) => {
                    if seen_triple {
                        return Err(err("entity record after the first triple".into()));
                    }
                    g.add_entity(&e).map_err(|e| err(e.to_string()))?;
                }
                Record::Triple {
                    head_cui,
                    tail_cui,
                    relation,
                    count,
                } => {
                    seen_triple = true;
                    let relation: RelationType =
                        relation.parse().map_err(|e: KgError| err(e.to_string()))?;
                    let head = g
                        .entity_by_cui(&head_cui)
                        .ok_or_else(|| err(format!("unknown head cui `{head_cui}`")))?
                        .id;
                    let tail = g
                        .entity_by_cui(&tail_cui)
                        .ok_or_else(|| err(format!("unknown tail cui `{tail_cui}`")))?
                        .id;
                    g.add_triple_count(head, tail, relation, count)
                        .map_err(|e| err(e.to_string()))?;
                }
                Record::VisionToken {
                    label_index,
                    source_id,
                    feature,
                } => {
                    g.add_vision_token(label_index, feature, &source_id)
                        .map_err(|e| err(e.to_string()))?;
                }
            }
        }
        graph.ok_or(KgError::Parse {
            line: 1,
            message: "missing header".into(),
        })
    }
}

impl Entity {
    pub fn to_record(&self) -> EntityRecord {
        EntityRecord {
            cui: self.cui.clone(),
            name: self.name.clone(),
            entity_type: self.entity_type.as_str().to_string(),
            aliases: self.aliases.clone(),
            definition: self.definition.clone(),
            tui: self.tui.clone(),
        }
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header {
        format: String,
        version: u64,
        d_vision: usize,
    },
    Entity(EntityRecord),
    Triple {
        head_cui: String,
        tail_cui: String,
        relation: String,
        count: u64,
    },
    VisionToken {
        label_index: usize,
        source_id: String,
        feature: Vec<f64>,
    },
}

/// Immutable, cheaply clonable view of a finished graph.
#[derive(Clone, Debug)]
pub struct FrozenGraph(Arc<KnowledgeGraph>);

impl Deref for FrozenGraph {
    type Target = KnowledgeGraph;

    fn deref(&self) -> &KnowledgeGraph {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn lung() -> EntityRecord {
        EntityRecord::new("C0024109", "Lung", EntityType::Anatomy)
            .with_aliases(&["lung structure", "pulmones"])
            .with_definition(
                "Either of the pair of organs occupying the cavity of the thorax that effect the aeration of the blood.",
            )
    }

    fn small_graph() -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new(3);
        let eff = g
            .add_entity(&EntityRecord::new("C0013687", "effusion", EntityType::Disorder))
            .unwrap();
        let pl = g
            .add_entity(&EntityRecord::new("C0032225", "pleural", EntityType::Anatomy))
            .unwrap();
        let sm = g
            .add_entity(&EntityRecord::new("C0700321", "small", EntityType::Size).with_tui("T081"))
            .unwrap();
        g.add_triple(eff, pl, RelationType::LocatedAt).unwrap();
        g.add_triple(eff, pl, RelationType::LocatedAt).unwrap();
        g.add_triple(sm, eff, RelationType::Modify).unwrap();
        g.add_vision_token(10, vec![0.1, -2.5e-7, 1.0 / 3.0], "img0").unwrap();
        g
    }

    #[test]
    fn first_entity_gets_id_zero() {
        let mut g = KnowledgeGraph::new(4);
        assert_eq!(g.add_entity(&lung()).unwrap(), 0);
    }

    #[test]
    fn same_cui_merges_aliases() {
        let mut g = KnowledgeGraph::new(4);
        let a = g.add_entity(&lung()).unwrap();
        let again = EntityRecord::new("c0024109", "Lung", EntityType::Anatomy)
            .with_aliases(&["PULMONES", "lungs"]);
        let b = g.add_entity(&again).unwrap();
        assert_eq!(a, b);
        assert_eq!(g.entities().len(), 1);
        assert_eq!(g.entity(0).unwrap().aliases, vec!["lung structure", "pulmones", "lungs"]);
    }

    #[test]
    fn entity_errors() {
        let mut g = KnowledgeGraph::new(4);
        let empty = EntityRecord::new("", "x", EntityType::Concept);
        assert!(matches!(g.add_entity(&empty), Err(KgError::EmptyField("cui"))));
        let noname = EntityRecord::new("C1", "", EntityType::Concept);
        assert!(matches!(g.add_entity(&noname), Err(KgError::EmptyField("name"))));
        let mut bad = EntityRecord::new("C1", "x", EntityType::Concept);
        bad.entity_type = "Organism".into();
        assert!(matches!(g.add_entity(&bad), Err(KgError::BadEntityType(_))));
    }

    #[test]
    fn merge_predicate_hook() {
        let mut g = KnowledgeGraph::new(0);
        g.add_entity(&lung()).unwrap();
        let other = EntityRecord::new("C9999999", "lung", EntityType::Anatomy);
        let same_name = |e: &Entity, r: &EntityRecord| e.name.eq_ignore_ascii_case(&r.name);
        assert_eq!(g.add_entity_with(&other, &same_name).unwrap(), 0);
        assert_eq!(g.entities().len(), 1);
    }

    #[test]
    fn triple_counts_and_errors() {
        let mut g = KnowledgeGraph::new(0);
        let eff = g
            .add_entity(&EntityRecord::new("C1", "effusion", EntityType::Disorder))
            .unwrap();
        let pl = g
            .add_entity(&EntityRecord::new("C2", "pleural", EntityType::Anatomy))
            .unwrap();
        let idx = g.add_triple(eff, pl, RelationType::LocatedAt).unwrap();
        assert_eq!(g.triples()[idx].count, 1);
        g.add_triple(eff, pl, RelationType::LocatedAt).unwrap();
        assert_eq!(g.add_triple(eff, pl, RelationType::LocatedAt).unwrap(), idx);
        assert_eq!(g.triples()[idx].count, 3);
        assert!(matches!(
            g.add_triple(99, pl, RelationType::Modify),
            Err(KgError::UnknownEntity(99))
        ));
        assert!(matches!(
            g.add_triple(eff, eff, RelationType::LocatedAt),
            Err(KgError::SelfLoop(0))
        ));
        assert!(g.add_triple(eff, eff, RelationType::Modify).is_ok());
    }

    #[test]
    fn vision_token_validation() {
        let mut g = KnowledgeGraph::new(2);
        assert!(matches!(
            g.add_vision_token(14, vec![0.0, 0.0], "a"),
            Err(KgError::BadLabel(14))
        ));
        assert!(matches!(
            g.add_vision_token(1, vec![0.0], "a"),
            Err(KgError::BadFeatureWidth { .. })
        ));
        assert!(matches!(
            g.add_vision_token(1, vec![f64::NAN, 0.0], "a"),
            Err(KgError::NonFinite)
        ));
    }

    #[test]
    fn empty_round_trip_and_stats() {
        let g = KnowledgeGraph::new(8);
        let mut buf = Vec::new();
        g.write_jsonl(&mut buf).unwrap();
        let back = KnowledgeGraph::read_jsonl(Cursor::new(buf)).unwrap();
        assert_eq!(back, g);
        let s = g.stats();
        assert_eq!((s.n_entities, s.n_triples, s.n_triple_instances, s.n_vision_tokens), (0, 0, 0, 0));
        assert_eq!(s.per_relation_counts.len(), 3);
        assert!(s.per_relation_counts.values().all(|&c| c == 0));
    }

    #[test]
    fn small_round_trip_is_structural() {
        let g = small_graph();
        let mut buf = Vec::new();
        g.write_jsonl(&mut buf).unwrap();
        let back = KnowledgeGraph::read_jsonl(Cursor::new(buf)).unwrap();
        // deep compare written independently of PartialEq
        assert_eq!(back.entities().len(), 3);
        for (a, b) in g.entities().iter().zip(back.entities()) {
            assert_eq!(
                (a.id, &a.cui, &a.name, a.entity_type, &a.aliases, &a.definition, &a.tui),
                (b.id, &b.cui, &b.name, b.entity_type, &b.aliases, &b.definition, &b.tui)
            );
        }
        for (a, b) in g.triples().iter().zip(back.triples()) {
            assert_eq!((a.head_id, a.tail_id, a.relation, a.count), (b.head_id, b.tail_id, b.relation, b.count));
        }
        let fa: Vec<u64> = g.vision_tokens()[0].feature.iter().map(|x| x.to_bits()).collect();
        let fb: Vec<u64> = back.vision_tokens()[0].feature.iter().map(|x| x.to_bits()).collect();
        assert_eq!(fa, fb);
        assert_eq!(back, g);
    }

    #[test]
    fn stats_recount() {
        let g = small_graph();
        let s = g.stats();
        assert_eq!(s.n_entities, 3);
        assert_eq!(s.n_triples, 2);
        assert_eq!(s.n_triple_instances, 3);
        assert_eq!(s.n_vision_tokens, 1);
        assert_eq!(s.per_relation_counts["located_at"], 1);
        assert_eq!(s.per_relation_counts["modify"], 1);
        assert_eq!(s.per_relation_counts["suggestive_of"], 0);
        assert_eq!(s.per_relation_instances["located_at"], 2);
        assert_eq!(g.stats(), s);
    }

    #[test]
    fn malformed_kind_reports_line() {
        let text = "{\"kind\":\"header\",\"format\":\"m3kg\",\"version\":1,\"d_vision\":0}\n\
                    {\"kind\":\"entty\",\"cui\":\"C1\"}\n";
        match KnowledgeGraph::read_jsonl(Cursor::new(text)) {
            Err(KgError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_and_ordering_errors() {
        let text = "{\"kind\":\"header\",\"format\":\"m3kg\",\"version\":2,\"d_vision\":0}\n";
        assert!(matches!(
            KnowledgeGraph::read_jsonl(Cursor::new(text)),
            Err(KgError::SchemaVersionMismatch { found: 2, .. })
        ));
        let text = "{\"kind\":\"entity\",\"cui\":\"C1\",\"name\":\"a\",\"entity_type\":\"Anatomy\"}\n";
        assert!(matches!(
            KnowledgeGraph::read_jsonl(Cursor::new(text)),
            Err(KgError::Parse { line: 1, .. })
        ));
        let text = "{\"kind\":\"header\",\"format\":\"m3kg\",\"version\":1,\"d_vision\":0}\n\
            {\"kind\":\"entity\",\"cui\":\"C1\",\"name\":\"a\",\"entity_type\":\"Anatomy\"}\n\
            {\"kind\":\"triple\",\"head_cui\":\"C1\",\"tail_cui\":\"C2\",\"relation\":\"modify\",\"count\":1}\n";
        assert!(matches!(
            KnowledgeGraph::read_jsonl(Cursor::new(text)),
            Err(KgError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn dot_export_shapes() {
        let g = KnowledgeGraph::new(0);
        let dot = g.export_dot(10);
        assert_eq!(dot.split_whitespace().collect::<Vec<_>>(), ["digraph", "M3KG", "{", "}"]);

        let mut g = KnowledgeGraph::new(0);
        let a = g.add_entity(&EntityRecord::new("C1", "effusion", EntityType::Disorder)).unwrap();
        let b = g.add_entity(&EntityRecord::new("C2", "pleural", EntityType::Anatomy)).unwrap();
        g.add_triple(a, b, RelationType::LocatedAt).unwrap();
        let dot = g.export_dot(2);
        assert_eq!(dot.lines().filter(|l| l.contains("[label=") && !l.contains("->")).count(), 2);
        assert_eq!(dot.lines().filter(|l| l.contains("->")).count(), 1);
        assert!(dot.contains("effusion(Disorder)"));
        assert!(dot.contains("[label=\"located_at\"]"));
        let dot = g.export_dot(1);
        assert_eq!(dot.lines().filter(|l| l.contains("->")).count(), 0);
        // tie on incident count → alphabetical
        assert!(dot.contains("effusion"));
    }

    #[test]
    fn frozen_graph_is_shareable() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<FrozenGraph>();
        let frozen = small_graph().freeze();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let g = frozen.clone();
                std::thread::spawn(move || g.stats())
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), frozen.stats());
        }
    }
}
