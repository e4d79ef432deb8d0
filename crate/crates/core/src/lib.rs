//! Adaptive graph representation for semantic parsing on CPU: a compact
//! convolutional backbone, edge-aware projection of pixels onto class-anchored
//! graph vertices, graph reasoning and reprojection, plus the synthetic data,
//! losses, metrics and training tooling around it.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod feature_extraction;
pub mod gradcheck;
pub mod graph_projection;
pub mod graph_reasoning;
pub mod graph_reprojection;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod visuals;

pub use error::{Error, Result};
pub use model::{Ablation, LossConfig, Model, ModelConfig, ModelParams};
pub use tensor::{EdgeMap, FeatureMap, LabelMap, Tensor};
