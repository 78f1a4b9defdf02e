//! Anisotropic graph convolutional networks (AGCN) and the GCN baseline for
//! semi-supervised node classification.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense/CSR kernels and the seeded RNG
//! - [`graph`]: graphs, normalized operators, smoothness trace, k-NN graphs
//! - [`model`]: forward pass, loss and hand-written gradients
//! - [`trainer`]: Adam, early stopping, multi-run, β grid search, depth study
//! - [`augment`]: co-training / self-training label expansion
//! - [`evalstats`]: accuracy and one-way ANOVA
//! - [`data`]: dataset directories and split handling

pub mod augment;
pub mod data;
pub mod evalstats;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod trainer;

pub use data::Dataset;
pub use graph::{build_graph, knn_graph, Graph, NormalizedGraph};
pub use linalg::{CsrMatrix, Matrix, Rng};
pub use model::{DiffusionMode, ModelConfig, ModelKind, ModelState};
pub use trainer::{RunReport, TrainConfig};
