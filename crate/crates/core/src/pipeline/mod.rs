//! Configuration, corpus handling, training, evaluation and ablation sweeps.

pub mod ablate;
pub mod config;
pub mod corpus;
pub mod evaluate;
pub mod model;
pub mod synth;
pub mod train;

pub use config::{EmbedderKind, PipelineConfig, RetrievalQuery};
pub use corpus::{load_corpus, read_records, write_records, MapRecord, PairRecord, ReportPair};
pub use model::{add_vision_tokens, build_vocab, Example, Model, ScaleInput};
pub use synth::{synth_corpus, synth_graph, write_corpus, SynthCorpus, SynthOptions, SynthPair};
pub use train::{load_run, save_run, train, train_loop, vocab_sidecar, Batcher, TrainReport};
pub use evaluate::{evaluate_files, evaluate_model};
pub use ablate::{run_sweep, sweep_configs, tables, AblationRow, Sweep, Table};
