//! Dense tensors, reverse-mode differentiation, and optimizers.
//!
//! Complex quantities are carried as paired real blocks `[re | im]`, so
//! `|z|^2 = re^2 + im^2` is expressed with ordinary real primitives.

pub mod adam;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, adam_step_in_place, sgd_step_in_place, AdamConfig, AdamState};
pub use graph::{sigmoid, Conv2dSpec, Gradients, Graph, Var};
pub use params::{grad, BoundParams, LayoutBuilder, ParamVector, Segment};
pub use tensor::Tensor;
