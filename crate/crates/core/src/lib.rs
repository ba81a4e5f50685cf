//! Evolutionary pruning of an MNIST MLP via population-mass selection
//! dynamics.
//!
//! Each hidden neuron of a 784-512-256-10 MLP carries a non-negative
//! population mass that gates its pre-activation. During training the
//! masses evolve under replicator-style selection dynamics driven by a
//! gradient-based contribution signal; after training, low-mass neurons
//! are hard-pruned and the accuracy-sparsity tradeoff is measured.
//!
//! Modules:
//!
//! * [`data`]       — IDX parsing, datasets, deterministic batch streams
//! * [`model`]      — the gated MLP: init, forward, manual backward, SGD
//! * [`dynamics`]   — fitness and the three selection dynamics
//! * [`pruning`]    — quantile / fixed-threshold pruning and reports
//! * [`experiment`] — the joint training loop and benchmark sweeps
//! * [`checkpoint`] — versioned binary state serialization
//! * [`gradcheck`]  — finite-difference oracle for the backward pass
//!
//! Numeric code is generic over `f32`/`f64`: training runs in `f32`, the
//! gradient checks and property tests run the same code paths in `f64`.
//! All randomness derives from a single seed through fixed ChaCha8
//! streams, so every run is bit-reproducible.

pub mod checkpoint;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod pruning;

pub use data::{Batch, Dataset, Split};
pub use dynamics::{DynamicsConfig, DynamicsKind, FitnessVector, PopulationState};
pub use error::{Error, Result};
pub use experiment::{MetricsLog, TrainConfig, TrainState};
pub use model::{ForwardTrace, Gradients, ModelDims, ModelParams, MomentumState, MNIST_DIMS};
pub use pruning::{PruneMask, PruneMode, PruneReport, PruneSpec};
