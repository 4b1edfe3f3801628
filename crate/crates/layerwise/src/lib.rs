//! Layer-by-layer CNN training via shallow auxiliary classification problems.
//!
//! Instead of optimizing a deep network end to end, each convolutional block is
//! trained in isolation: a disposable auxiliary classifier (a small CNN with
//! `k` hidden layers, a spatial quadrant average and a linear head) is attached
//! to the new block, the pair is optimized by SGD over activations cached from
//! the frozen prefix, and the best parameters seen along the trajectory are
//! frozen before moving on to the next block.
//!
//! The crate is organized around that loop:
//!
//! - [`kernels`] — deterministic forward/backward primitives (convolution,
//!   ReLU, quadrant averaging, linear, softmax cross-entropy, batch norm),
//!   all hand-derived and verifiable against finite differences at `f64`.
//! - [`optim`] — SGD with classic momentum and a step-decay schedule.
//! - [`gradcheck`] — the central-finite-difference oracle used to verify
//!   every backward kernel.
//! - [`arch`] — network shape descriptors, width schedules and named presets.
//! - [`params`] / [`forward`] — parameter containers and the traced
//!   forward/backward passes through a block plus its auxiliary head.
//! - [`cache`] / [`trainer`] — activation caching and the greedy per-layer
//!   training loop with identity warm starts and best-along-trajectory
//!   selection.
//! - [`probe`] — linear and shallow-CNN separability probes over cached
//!   representations.
//! - [`prune`] — filter ranking and prune-while-training with auxiliary-head
//!   fine-tuning.
//! - [`theory`] — empirical checks of progressive improvement and of the
//!   error-cascade bound for per-layer suboptimal solutions.
//! - [`data`] — CIFAR-10 / MNIST loaders, augmentation and a synthetic
//!   CIFAR-format dataset generator for self-contained runs.
//! - [`config`] / [`metrics`] / [`checkpoint`] — run configuration, the
//!   append-only metrics stream and lossless model checkpoints.

pub mod arch;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod forward;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod probe;
pub mod prune;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
