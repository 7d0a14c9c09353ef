use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use m3kg::kg_sampler::{build_multiscale, write_scales_jsonl};
use m3kg::kg_store::KnowledgeGraph;
use m3kg::pipeline::{
    add_vision_tokens, evaluate_files, evaluate_model, load_corpus, load_run, run_sweep, save_run, synth_corpus,
    synth_graph, tables, train_loop, write_corpus, build_vocab, Model, PipelineConfig, Sweep, SynthOptions,
};

#[derive(Parser)]
#[command(name = "m3kg", version, about = "Knowledge-graph-grounded chest X-ray report generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge graph utilities.
    #[command(subcommand)]
    Kg(KgCommand),
    /// Write a seeded synthetic corpus and its ground-truth graph.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus, or score report files.
    Evaluate(EvalArgs),
    /// Retrain along one axis and print comparison tables.
    Ablate(AblateArgs),
}

#[derive(Subcommand)]
enum KgCommand {
    /// Merge graphs and add vision tokens from a corpus's activation maps.
    Build {
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        /// Corpus whose activation maps become vision tokens.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(short = 'c', long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the multi-scale subgraphs.
    Sample {
        #[arg(long, value_delimiter = ',', default_value = "60,120,180,240,300")]
        budgets: Vec<usize>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print graph statistics as JSON.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Write a Graphviz rendering of the most frequent part of the graph.
    ExportDot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        max_nodes: usize,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    n_pairs: usize,
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 6)]
    n_diseases: usize,
    #[arg(long, default_value_t = 0.35)]
    presence: f64,
    #[arg(long, default_value_t = 64)]
    d_vision: usize,
    /// Write only a random graph of the given size to `--out`.
    #[arg(long)]
    graph_only: bool,
    #[arg(long, default_value_t = 400)]
    entities: usize,
    #[arg(long, default_value_t = 1500)]
    triples: usize,
    #[arg(long, default_value_t = 0)]
    tokens: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(short = 'c', long)]
    config: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    kg: PathBuf,
    /// Overrides `n_visual`.
    #[arg(long)]
    n_visual: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<(PipelineConfig, KnowledgeGraph, Vec<m3kg::pipeline::ReportPair>)> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(n) = self.n_visual {
            cfg.n_visual = n;
            cfg.validate()?;
        }
        let kg = KnowledgeGraph::load(&self.kg).with_context(|| format!("loading {}", self.kg.display()))?;
        let pairs = load_corpus(&self.corpus)?;
        Ok((cfg, kg, pairs))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
    /// Per-step losses as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(short = 'c', long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    n_visual: Option<usize>,
    /// Hypothesis reports, one per line.
    #[arg(long)]
    hyp: Option<PathBuf>,
    /// Reference reports, one per line.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    gold_labels: Option<PathBuf>,
    /// Also write generated reports here, one per line.
    #[arg(long)]
    hyp_out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    sweep: Sweep,
    /// Held-out corpus for scoring; defaults to the training corpus.
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    /// Write the tables as JSON as well.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn kg(cmd: KgCommand) -> Result<()> {
    match cmd {
        KgCommand::Build {
            inputs,
            corpus,
            config,
            out,
        } => {
            let mut graph = KnowledgeGraph::load(&inputs[0]).with_context(|| format!("loading {}", inputs[0].display()))?;
            for p in &inputs[1..] {
                graph.merge(&KnowledgeGraph::load(p).with_context(|| format!("loading {}", p.display()))?)?;
            }
            if let Some(c) = corpus {
                let cfg = match config {
                    Some(p) => PipelineConfig::load(p)?,
                    None => PipelineConfig::default(),
                };
                let n = add_vision_tokens(&mut graph, &load_corpus(&c)?, &cfg)?;
                log::info!("added {n} vision tokens");
            }
            graph.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&graph.stats())?);
        }
        KgCommand::Sample { budgets, input, out } => {
            let graph = KnowledgeGraph::load(&input)?;
            let ms = build_multiscale(&graph, &budgets)?;
            let mut buf = Vec::new();
            write_scales_jsonl(&graph, &ms, &mut buf)?;
            write(&out, buf)?;
            println!("node counts {:?}, total {}", ms.node_counts(), ms.n_total);
        }
        KgCommand::Stats { input } => {
            let graph = KnowledgeGraph::load(&input)?;
            println!("{}", serde_json::to_string_pretty(&graph.stats())?);
        }
        KgCommand::ExportDot { input, out, max_nodes } => {
            write(&out, KnowledgeGraph::load(&input)?.export_dot(max_nodes))?;
        }
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.graph_only {
        let g = synth_graph(a.seed, a.entities, a.triples, a.tokens, a.d_vision)?;
        g.save(&a.out)?;
        println!("{}", serde_json::to_string_pretty(&g.stats())?);
        return Ok(());
    }
    let corpus = synth_corpus(&SynthOptions {
        seed: a.seed,
        n_pairs: a.n_pairs,
        grid: a.grid,
        patch: a.patch,
        n_diseases: a.n_diseases,
        presence: a.presence,
        d_vision: a.d_vision,
    })?;
    write_corpus(&a.out, &corpus)?;
    println!("wrote {} pairs to {}", corpus.pairs.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (cfg, graph, pairs) = a.run.load()?;
    let (model, mut store) = Model::build(&cfg, &graph, build_vocab(&pairs))?;
    let examples = model.examples(&pairs);
    let report = train_loop(&model, &mut store, &examples, |_, _, _| true)?;
    log::info!(
        "node counts {:?}, final_nodes {}, memory rows {}, n_f {}",
        report.node_counts,
        report.final_nodes,
        model.memory_rows(),
        report.n_f
    );
    for s in &report.spans {
        log::info!("span {} rows {}..{}", s.stream.name(), s.start, s.end());
    }
    save_run(&a.out, &store, &model.vocab)?;
    if let Some(p) = a.log {
        let lines: String = report
            .losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{{\"step\":{i},\"loss\":{l}}}\n"))
            .collect();
        write(&p, lines)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "steps": report.losses.len(),
            "final_loss": report.losses.last(),
            "final_nodes": report.final_nodes,
            "node_counts": report.node_counts,
            "n_f": report.n_f,
            "spans": report.spans.iter().map(|s| serde_json::json!({"stream": s.stream.name(), "start": s.start, "len": s.len})).collect::<Vec<_>>(),
        })
    );
    Ok(())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let metrics = match (&a.hyp, &a.reference) {
        (Some(h), Some(r)) => evaluate_files(h, r, a.gold_labels.as_deref())?,
        (None, None) => {
            let (Some(cfg), Some(ckpt), Some(corpus), Some(kg)) = (&a.config, &a.ckpt, &a.corpus, &a.kg) else {
                bail!("evaluate needs either --hyp and --ref, or -c, --ckpt, --corpus and --kg");
            };
            let mut cfg = PipelineConfig::load(cfg)?;
            if let Some(n) = a.n_visual {
                cfg.n_visual = n;
            }
            let graph = KnowledgeGraph::load(kg)?;
            let (model, store) = load_run(ckpt, &cfg, &graph)?;
            let (metrics, hyps) = evaluate_model(&model, &store, &load_corpus(corpus)?)?;
            if let Some(p) = &a.hyp_out {
                write(p, hyps.join("\n") + "\n")?;
            }
            metrics
        }
        _ => bail!("--hyp and --ref must be given together"),
    };
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let (cfg, graph, pairs) = a.run.load()?;
    let eval_pairs = match &a.eval_corpus {
        Some(p) => load_corpus(p)?,
        None => pairs.clone(),
    };
    let rows = run_sweep(a.sweep, &cfg, &graph, &pairs, &eval_pairs)?;
    let tabs = tables(a.sweep, &rows);
    for t in &tabs {
        println!("{}", t.render());
    }
    if let Some(p) = a.json {
        write(&p, serde_json::to_string_pretty(&tabs)?)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Kg(c) => kg(c),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
    }
}
