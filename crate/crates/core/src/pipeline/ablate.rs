//! Ablation sweeps: each row retrains from the base config with one axis
//! changed and scores the result.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::PipelineError;
use crate::eval_metrics::MetricReport;
use crate::graph_encoder::EncoderVariant;
use crate::kg_sampler::default_budgets;
use crate::kg_store::KnowledgeGraph;

use super::config::PipelineConfig;
use super::corpus::ReportPair;
use super::evaluate::evaluate_model;
use super::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Entity,
    Visual,
    Encoder,
    Toggles,
}

impl Sweep {
    pub const ALL: [Sweep; 4] = [Sweep::Entity, Sweep::Visual, Sweep::Encoder, Sweep::Toggles];
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sweep::Entity => "entity",
            Sweep::Visual => "visual",
            Sweep::Encoder => "encoder",
            Sweep::Toggles => "toggles",
        })
    }
}

impl FromStr for Sweep {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Sweep::ALL
            .into_iter()
            .find(|w| w.to_string() == s)
            .ok_or_else(|| format!("unknown sweep `{s}` (expected entity, visual, encoder or toggles)"))
    }
}

pub const ENTITY_BUDGETS: [usize; 5] = [100, 200, 300, 400, 500];
pub const VISUAL_COUNTS: [usize; 5] = [100, 300, 500, 700, 1000];

/// `(setting, RG, MF, DVG)`.
pub const TOGGLE_SETTINGS: [(&str, bool, bool, bool); 5] = [
    ("BASE", false, false, false),
    ("(a)", false, false, true),
    ("(b)", true, false, false),
    ("(c)", true, true, false),
    ("(d)", true, true, true),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: &str, columns: &[&str]) -> Self {
        Table {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Markdown-style pipe table under a title line.
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.len()).collect();
        for r in &self.rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let mut out = format!("{}\n", self.title);
        out.push_str(&line(&self.columns));
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }
}

/// One trained configuration and its scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub config: PipelineConfig,
    pub metrics: MetricReport,
}

fn f3(x: f64) -> String {
    format!("{x:.3}")
}

fn mark(on: bool) -> String {
    if on { "✓" } else { "-" }.to_string()
}

fn nlg4(m: &MetricReport) -> Vec<String> {
    vec![f3(m.bleu4), f3(m.rouge_l), f3(m.meteor), f3(m.cider_d)]
}

/// Configurations a sweep trains, with their row labels.
pub fn sweep_configs(sweep: Sweep, base: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
    match sweep {
        Sweep::Entity => ENTITY_BUDGETS
            .iter()
            .map(|&b| {
                let mut c = base.clone();
                c.use_graph = true;
                c.scale_budgets = default_budgets(b, base.scale_budgets.len());
                c.final_scale_index = c.scale_budgets.len() - 1;
                (b.to_string(), c)
            })
            .collect(),
        Sweep::Visual => VISUAL_COUNTS
            .iter()
            .map(|&n| {
                let mut c = base.clone();
                c.use_dvg = true;
                c.n_visual = n;
                (n.to_string(), c)
            })
            .collect(),
        Sweep::Encoder => EncoderVariant::ALL
            .iter()
            .map(|&v| {
                let mut c = base.clone();
                c.use_graph = true;
                c.use_rgcn_variant = v;
                (v.label().to_string(), c)
            })
            .collect(),
        Sweep::Toggles => TOGGLE_SETTINGS
            .iter()
            .map(|&(name, rg, mf, dvg)| {
                let mut c = base.clone();
                c.use_graph = rg;
                c.use_multiscale = mf;
                c.use_dvg = dvg;
                (name.to_string(), c)
            })
            .collect(),
    }
}

/// Trains every configuration of the sweep on `train_pairs` and scores it
/// on `eval_pairs`.
pub fn run_sweep(
    sweep: Sweep,
    base: &PipelineConfig,
    kg: &KnowledgeGraph,
    train_pairs: &[ReportPair],
    eval_pairs: &[ReportPair],
) -> Result<Vec<AblationRow>, PipelineError> {
    sweep_configs(sweep, base)
        .into_iter()
        .map(|(label, config)| {
            log::info!("ablation {sweep}: training `{label}`");
            let (model, store, _) = train(&config, kg, train_pairs)?;
            let (metrics, _) = evaluate_model(&model, &store, eval_pairs)?;
            Ok(AblationRow { label, config, metrics })
        })
        .collect()
}

/// Tables for a finished sweep. The toggle sweep yields a clinical-efficacy
/// table and a language-metric table.
pub fn tables(sweep: Sweep, rows: &[AblationRow]) -> Vec<Table> {
    let simple = |title: &str, head: &str| {
        let mut t = Table::new(title, &[head, "BLEU-4", "ROUGE-L", "METEOR", "CIDEr"]);
        for r in rows {
            let mut cells = vec![r.label.clone()];
            cells.extend(nlg4(&r.metrics));
            t.rows.push(cells);
        }
        vec![t]
    };
    match sweep {
        Sweep::Entity => simple("Entity budget of the selected scale", "#Entity"),
        Sweep::Visual => simple("Visual memory size", "Number"),
        Sweep::Encoder => simple("Graph encoder", "Encoder"),
        Sweep::Toggles => {
            let mut ce = Table::new("Components: clinical efficacy", &["Setting", "RG", "MF", "DVG", "Precision", "Recall", "F1"]);
            let mut nlg = Table::new(
                "Components: language metrics",
                &["Setting", "RG", "MF", "DVG", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "RG-L", "METEOR", "CIDEr"],
            );
            for r in rows {
                let c = &r.config;
                let head = vec![r.label.clone(), mark(c.use_graph), mark(c.use_multiscale), mark(c.use_dvg)];
                let m = &r.metrics;
                let mut a = head.clone();
                a.extend([f3(m.ce_precision), f3(m.ce_recall), f3(m.ce_f1)]);
                ce.rows.push(a);
                let mut b = head;
                b.extend([f3(m.bleu1), f3(m.bleu2), f3(m.bleu3), f3(m.bleu4), f3(m.rouge_l), f3(m.meteor), f3(m.cider_d)]);
                nlg.rows.push(b);
            }
            vec![ce, nlg]
        }
    }
}
