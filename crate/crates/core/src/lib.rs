//! Meta-gated neural resource allocation for interference channels whose
//! fading distribution changes episode by episode.
//!
//! An inner network proposes beamformers, an outer network produces an
//! elementwise gate over the inner output, and a dual-loop procedure trains
//! the inner network for fast adaptation and the outer network to decide
//! which inner parameters matter for each distribution. Training is
//! unsupervised: the loss is the negative weighted sum rate.
//!
//! Module map:
//! - [`math`]: tensors, reverse-mode differentiation, Adam
//! - [`channels`]: fading generators, task and test-stream assembly, dataset files
//! - [`sumrate`]: SINR, weighted sum rate and the WMMSE reference solver
//! - [`gnn`], [`cnn`]: the two gated model families
//! - [`training`]: meta-training and sequential online testing
//! - [`baselines`]: joint, mismatch, transfer, EWC and ungated comparisons
//! - [`metrics`]: trajectory similarity, variance tables, continuity matrices
//! - [`experiment`]: config files, checkpoints, artifact writers and stage runners

pub mod baselines;
pub mod channels;
pub mod cnn;
pub mod error;
pub mod experiment;
pub mod gnn;
pub mod io;
pub mod math;
pub mod metrics;
pub mod model;
pub mod sumrate;
pub mod training;

pub use error::{Error, Result};
