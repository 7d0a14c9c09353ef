//! Knowledge-graph grounded chest X-ray report generation.

pub mod autodiff;
pub mod checkpoint;
pub mod crossmodal_bridge;
pub mod error;
pub mod eval_metrics;
pub mod gradcheck;
pub mod graph_encoder;
pub mod kg_sampler;
pub mod kg_store;
pub mod nn;
pub mod node_encoder;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod report_decoder;
pub mod scale_fusion;
pub mod text;
pub mod vision_path;
