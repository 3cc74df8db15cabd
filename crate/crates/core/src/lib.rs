//! Forest neural network (FNN) for kinship verification.
//!
//! The model views a candidate (parent, child) pair as a forest of nine tiny
//! two-node graphs, one per facial-component embedding (whole face, eyes,
//! nose, mouth, and the four "face minus component" crops). Each graph runs a
//! stack of residual gated graph-convolution layers; layer-wise node states
//! are averaged across the forest and concatenated into one feature per
//! person. A small feed-forward head scores kinship, and a weighted bundle of
//! auxiliary losses (cross-generation gap, direction, triplet, family
//! identity, scheduled center loss) shapes the feature space during training.
//!
//! Everything runs on precomputed patch embeddings: no image decoding, no
//! GPU, no external learning framework. Gradients come from the in-crate
//! reverse-mode tape in [`graph`].

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod forest;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use data::{DatasetManifest, PairSample, PatchKind, PatchSet, Relationship};
pub use graph::{AutodiffError, Graph, Var};
pub use tensor::Tensor;
