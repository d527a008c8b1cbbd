//! A self-contained CPU engine for training attention-augmented convolutional
//! classifiers on radiograph datasets, with a reverse-mode autodiff core that
//! is verifiable through finite-difference gradient checks.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: dense tensors, the autodiff tape,
//!   and its numerical verification harness.
//! - [`bam`]: bottleneck attention (channel + spatial gates).
//! - [`model`]: the compact parallel-branch backbone, attention insertion at
//!   the three downsampling bottlenecks, and the ten-layer head.
//! - [`data`]: dataset scanning, corruption pruning, deterministic splitting,
//!   and image loading.
//! - [`optim`], [`train`]: Adam, plateau scheduling, the training loop, and
//!   checkpointing.
//! - [`metrics`], [`report`]: confusion counts, the four evaluation metrics,
//!   and report emission.
//!
//! Everything seeded is bit-reproducible: fixed seeds give identical split
//! manifests, logs, and checkpoints across runs.

pub mod bam;
pub mod data;
pub mod fixture;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod report;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod verify;

pub use graph::{Graph, Mode, NodeId};
pub use params::{ParamId, Params};
pub use tensor::{Dtype, Scalar, Tensor, TensorError};
