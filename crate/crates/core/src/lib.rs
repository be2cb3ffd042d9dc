//! Embedding recommender trained with graph-derived constraint losses instead
//! of explicit message passing.
//!
//! The crate covers the whole pipeline: loading and splitting interaction
//! logs ([`dataset`]), degree and co-occurrence statistics ([`graph`]), the
//! objective and its gradients ([`model`]), optimization ([`optim`],
//! [`training`]) and full-ranking evaluation ([`evaluation`]). [`oracle`] holds
//! dense reference computations used to validate the sparse paths.

pub mod dataset;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod synthetic;
pub mod training;

pub use dataset::{assemble, AssembleOptions, DatasetError, Fragment, InteractionDataset};
pub use evaluation::{evaluate, EvalReport, Split};
pub use graph::{BipartiteGraph, ConstraintWeights, CooccurrenceGraph, NeighborIndex};
pub use model::{EmbeddingModel, Objective, TrainBatch};
pub use training::{fit, FitResult, TrainConfig, Trainer};
