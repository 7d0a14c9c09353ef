//! Seeded synthetic corpus: images with disease-specific patterns, templated
//! reports, activation maps and the knowledge graph implied by the reports.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Matrix;
use crate::error::PipelineError;
use crate::eval_metrics::{LabelState, LabelVector, NO_FINDING};
use crate::kg_store::{EntityRecord, EntityType, KnowledgeGraph, RelationType};
use crate::vision_path::write_pgm;

use super::corpus::{write_records, MapRecord, PairRecord};

use EntityType::*;
use RelationType::*;

/// Report used when no finding is present.
pub const NORMAL_REPORT: &str = "no acute findings .";

/// Highest number of simulated diseases (every label except No Finding).
pub const MAX_DISEASES: usize = 13;

const ENTITIES: [(&str, &str, EntityType); 32] = [
    ("widened", "SYN0001", Concept),
    ("mediastinum", "SYN0002", Anatomy),
    ("enlarged", "SYN0003", Concept),
    ("heart", "SYN0004", Anatomy),
    ("cardiomegaly", "SYN0005", Disorder),
    ("patchy", "SYN0006", Concept),
    ("opacity", "SYN0007", Disorder),
    ("right lung", "SYN0008", Anatomy),
    ("small", "SYN0009", Size),
    ("nodule", "SYN0010", Disorder),
    ("left upper lobe", "SYN0011", Anatomy),
    ("mild", "SYN0012", Size),
    ("edema", "SYN0013", Disorder),
    ("lungs", "SYN0014", Anatomy),
    ("focal", "SYN0015", Concept),
    ("consolidation", "SYN0016", Disorder),
    ("right base", "SYN0017", Anatomy),
    ("airspace disease", "SYN0018", Disorder),
    ("pneumonia", "SYN0019", Disorder),
    ("atelectasis", "SYN0020", Disorder),
    ("left base", "SYN0021", Anatomy),
    ("pneumothorax", "SYN0022", Disorder),
    ("right apex", "SYN0023", Anatomy),
    ("effusion", "SYN0024", Disorder),
    ("pleural", "SYN0025", Anatomy),
    ("thickening", "SYN0026", Disorder),
    ("healed", "SYN0027", Concept),
    ("fracture", "SYN0028", Disorder),
    ("rib", "SYN0029", Anatomy),
    ("endotracheal", "SYN0030", Concept),
    ("tube", "SYN0031", Device),
    ("trachea", "SYN0032", Anatomy),
];

type TripleSpec = (&'static str, &'static str, RelationType);

/// Sentence and triples per label index 1..=13.
const FINDINGS: [(&str, &[TripleSpec]); MAX_DISEASES] = [
    ("the mediastinum is widened .", &[("widened", "mediastinum", Modify)]),
    (
        "the heart is enlarged consistent with cardiomegaly .",
        &[("enlarged", "heart", Modify), ("enlarged", "cardiomegaly", SuggestiveOf)],
    ),
    (
        "patchy opacity in the right lung .",
        &[("patchy", "opacity", Modify), ("opacity", "right lung", LocatedAt)],
    ),
    (
        "small nodule in the left upper lobe .",
        &[("small", "nodule", Modify), ("nodule", "left upper lobe", LocatedAt)],
    ),
    ("mild edema in both lungs .", &[("mild", "edema", Modify), ("edema", "lungs", LocatedAt)]),
    (
        "focal consolidation at the right base .",
        &[("focal", "consolidation", Modify), ("consolidation", "right base", LocatedAt)],
    ),
    ("airspace disease suggestive of pneumonia .", &[("airspace disease", "pneumonia", SuggestiveOf)]),
    (
        "mild atelectasis at the left base .",
        &[("mild", "atelectasis", Modify), ("atelectasis", "left base", LocatedAt)],
    ),
    (
        "small pneumothorax at the right apex .",
        &[("small", "pneumothorax", Modify), ("pneumothorax", "right apex", LocatedAt)],
    ),
    (
        "small left pleural effusion .",
        &[("small", "effusion", Modify), ("effusion", "pleural", LocatedAt)],
    ),
    ("right pleural thickening .", &[("thickening", "pleural", LocatedAt)]),
    (
        "healed rib fracture .",
        &[("healed", "fracture", Modify), ("fracture", "rib", LocatedAt)],
    ),
    (
        "an endotracheal tube is in the trachea .",
        &[("endotracheal", "tube", Modify), ("tube", "trachea", LocatedAt)],
    ),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub seed: u64,
    pub n_pairs: usize,
    /// Image side length in pixels.
    pub grid: usize,
    pub patch: usize,
    pub n_diseases: usize,
    /// Probability that each simulated disease is present in a pair.
    pub presence: f64,
    pub d_vision: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            seed: 7,
            n_pairs: 32,
            grid: 32,
            patch: 8,
            n_diseases: 6,
            presence: 0.35,
            d_vision: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub id: String,
    pub pixels: Matrix,
    pub report: String,
    pub labels: LabelVector,
    /// `(label_index, map)` at patch-grid resolution.
    pub maps: Vec<(usize, Matrix)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub pairs: Vec<SynthPair>,
    pub kg: KnowledgeGraph,
}

/// Sentences for the present labels in label order.
pub fn report_for(labels: &[usize]) -> String {
    if labels.is_empty() {
        return NORMAL_REPORT.to_string();
    }
    labels.iter().map(|&l| FINDINGS[l - 1].0).collect::<Vec<_>>().join(" ")
}

/// Triples named by the finding sentence of `label` (1..=13).
pub fn finding_triples(label: usize) -> &'static [TripleSpec] {
    FINDINGS[label - 1].1
}

/// Patch index holding the pattern of `label` on a grid with `n_patches`
/// patches.
pub fn pattern_patch(label: usize, n_patches: usize) -> usize {
    (label - 1) * n_patches / MAX_DISEASES
}

fn quantize(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn draw_image(rng: &mut ChaCha8Rng, labels: &[usize], grid: usize, patch: usize) -> Matrix {
    let g = grid / patch;
    let mut px = Matrix::from_shape_simple_fn((grid, grid), || rng.random_range(0.0..0.1));
    for &l in labels {
        let p = pattern_patch(l, g * g);
        let (r0, c0) = ((p / g) * patch, (p % g) * patch);
        let mid = (patch as f64 - 1.0) / 2.0;
        for r in 0..patch {
            for c in 0..patch {
                let (dr, dc) = (r as f64 - mid, c as f64 - mid);
                let inside = if l % 2 == 1 {
                    (dr * dr + dc * dc).sqrt() <= patch as f64 * 0.4
                } else {
                    dr.abs() <= patch as f64 * 0.2
                };
                if inside {
                    px[[r0 + r, c0 + c]] = 0.85 + rng.random_range(0.0..0.1);
                }
            }
        }
    }
    px.mapv_inplace(quantize);
    px
}

fn entity_id(kg: &mut KnowledgeGraph, name: &str) -> Result<usize, PipelineError> {
    let &(n, cui, t) = ENTITIES
        .iter()
        .find(|(n, _, _)| *n == name)
        .ok_or_else(|| PipelineError::BadParams(format!("no entity named `{name}`")))?;
    Ok(kg.add_entity(&EntityRecord::new(cui, n, t))?)
}

pub fn synth_corpus(opts: &SynthOptions) -> Result<SynthCorpus, PipelineError> {
    if opts.n_diseases > MAX_DISEASES {
        return Err(PipelineError::BadParams(format!(
            "n_diseases must be at most {MAX_DISEASES}, got {}",
            opts.n_diseases
        )));
    }
    if opts.patch == 0 || opts.grid == 0 || opts.grid % opts.patch != 0 {
        return Err(PipelineError::BadParams(format!(
            "grid {} must be a positive multiple of patch {}",
            opts.grid, opts.patch
        )));
    }
    let n_patches = (opts.grid / opts.patch).pow(2);
    if n_patches < MAX_DISEASES {
        return Err(PipelineError::BadParams(format!(
            "grid {} with patch {} gives {n_patches} patches, need at least {MAX_DISEASES}",
            opts.grid, opts.patch
        )));
    }
    if !(0.0..=1.0).contains(&opts.presence) {
        return Err(PipelineError::BadParams(format!("presence must lie in [0, 1], got {}", opts.presence)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut kg = KnowledgeGraph::new(opts.d_vision);
    let g = opts.grid / opts.patch;
    let mut pairs = Vec::with_capacity(opts.n_pairs);
    for i in 0..opts.n_pairs {
        let labels: Vec<usize> = (1..=opts.n_diseases).filter(|_| rng.random_bool(opts.presence)).collect();
        let pixels = draw_image(&mut rng, &labels, opts.grid, opts.patch);
        let mut lv = LabelVector::absent();
        if labels.is_empty() {
            lv.0[NO_FINDING] = LabelState::Positive;
        }
        let mut maps = Vec::with_capacity(labels.len());
        for &l in &labels {
            lv.0[l] = LabelState::Positive;
            let mut m = Matrix::zeros((g, g));
            let p = pattern_patch(l, n_patches);
            m[[p / g, p % g]] = 1.0;
            maps.push((l, m));
            for &(h, t, r) in finding_triples(l) {
                let (h, t) = (entity_id(&mut kg, h)?, entity_id(&mut kg, t)?);
                kg.add_triple(h, t, r)?;
            }
        }
        pairs.push(SynthPair {
            id: format!("{i:04}"),
            pixels,
            report: report_for(&labels),
            labels: lv,
            maps,
        });
    }
    Ok(SynthCorpus { pairs, kg })
}

/// Writes `corpus.jsonl`, `kg.jsonl`, `images/` and `maps/` under `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &SynthCorpus) -> Result<(), PipelineError> {
    let dir = dir.as_ref();
    for sub in ["images", "maps"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| PipelineError::io(&p, e))?;
    }
    let mut records = Vec::with_capacity(corpus.pairs.len());
    for pair in &corpus.pairs {
        let image = format!("images/{}.pgm", pair.id);
        write_pgm(dir.join(&image), &pair.pixels)?;
        let mut maps = Vec::new();
        for (l, m) in &pair.maps {
            let path = format!("maps/{}_{l:02}.pgm", pair.id);
            write_pgm(dir.join(&path), m)?;
            maps.push(MapRecord {
                label_index: *l,
                path,
            });
        }
        records.push(PairRecord {
            id: pair.id.clone(),
            image,
            report: pair.report.clone(),
            labels: pair.labels.to_json(),
            activation_maps: maps,
        });
    }
    write_records(dir.join("corpus.jsonl"), &records)?;
    corpus.kg.save(dir.join("kg.jsonl"))?;
    Ok(())
}

/// Random graph with skewed entity popularity and Zipf-like triple counts,
/// used for fixtures and sampler tests.
pub fn synth_graph(
    seed: u64,
    n_entities: usize,
    n_triples: usize,
    n_tokens: usize,
    d_vision: usize,
) -> Result<KnowledgeGraph, PipelineError> {
    let max = n_entities * n_entities.saturating_sub(1) * 3;
    if n_triples > max / 2 {
        return Err(PipelineError::BadParams(format!(
            "{n_triples} triples is too dense for {n_entities} entities"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kg = KnowledgeGraph::new(d_vision);
    for i in 0..n_entities {
        let t = EntityType::ALL[i % EntityType::ALL.len()];
        let rec = EntityRecord::new(&format!("M{i:05}"), &format!("entity {i:04}"), t)
            .with_aliases(&[&format!("e{i}")])
            .with_definition(&format!("synthetic {} number {i}", t.as_str().to_lowercase()));
        kg.add_entity(&rec)?;
    }
    let pick = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.random();
        ((u * u) * n_entities as f64) as usize
    };
    let mut seen = HashSet::new();
    while kg.triples().len() < n_triples {
        let (h, t) = (pick(&mut rng), pick(&mut rng));
        let r = RelationType::ALL[rng.random_range(0..3)];
        if h == t || !seen.insert((h, t, r)) {
            continue;
        }
        let count = 1 + 500 / (kg.triples().len() as u64 + 1);
        kg.add_triple_count(h, t, r, count)?;
    }
    for i in 0..n_tokens {
        let label = rng.random_range(0..14);
        let feature: Vec<f64> = (0..d_vision).map(|_| rng.random_range(-1.0..1.0)).collect();
        kg.add_vision_token(label, feature, &format!("img{i:04}"))?;
    }
    Ok(kg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval_metrics::extract_labels;

    #[test]
    fn normal_base_case() {
        let c = synth_corpus(&SynthOptions {
            n_pairs: 1,
            n_diseases: 0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.pairs[0].report, NORMAL_REPORT);
        assert_eq!(c.pairs[0].labels.positives(), vec![NO_FINDING]);
        assert_eq!(c.kg.triples().len(), 0);
    }

    #[test]
    fn labeler_agrees_with_every_finding_sentence() {
        for l in 1..=MAX_DISEASES {
            let v = extract_labels(&report_for(&[l]));
            assert_eq!(v.positives(), vec![l], "label {l}");
        }
        let all: Vec<usize> = (1..=MAX_DISEASES).collect();
        assert_eq!(extract_labels(&report_for(&all)).positives(), all);
    }

    #[test]
    fn patterns_use_distinct_patches() {
        for n in [13, 16, 25] {
            let mut p: Vec<usize> = (1..=MAX_DISEASES).map(|l| pattern_patch(l, n)).collect();
            p.dedup();
            assert_eq!(p.len(), MAX_DISEASES);
            assert!(p.iter().all(|&x| x < n));
        }
    }

    #[test]
    fn rejects_bad_params() {
        let bad = |o: SynthOptions| synth_corpus(&o).is_err();
        assert!(bad(SynthOptions { n_diseases: 14, ..Default::default() }));
        assert!(bad(SynthOptions { grid: 30, ..Default::default() }));
        assert!(bad(SynthOptions { grid: 16, ..Default::default() }));
        assert!(synth_graph(1, 3, 100, 0, 4).is_err());
    }

    #[test]
    fn graph_generator_hits_requested_sizes() {
        let g = synth_graph(3, 50, 120, 5, 4).unwrap();
        let s = g.stats();
        assert_eq!((s.n_entities, s.n_triples, s.n_vision_tokens), (50, 120, 5));
        assert!(g.triples().iter().all(|t| t.count >= 1));
    }
}
