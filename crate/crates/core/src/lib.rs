//! Structured channel pruning for convolutional network graphs.
//!
//! The pipeline is: load or build a [`GraphModel`], partition its channels
//! into dependency groups ([`deps`]), score and select a [`prune::PruneMask`],
//! then physically [`shrink`] the graph, inserting scatter chains where
//! residual branches keep different channels. [`exec`] is the reference
//! interpreter every equivalence claim is checked against, and [`cost`] and
//! [`energy`] account for what the pruning bought.

pub mod cost;
pub mod deps;
pub mod energy;
pub mod error;
pub mod exec;
pub mod graph;
pub mod hrnet;
pub mod kernels;
pub mod metrics;
pub mod onnx;
pub mod power;
pub mod prune;
pub mod rawtensor;
pub mod shrink;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{GraphModel, Initializer, Node, Op, OpKind};
pub use tensor::Tensor;
