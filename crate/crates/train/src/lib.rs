//! Manual-backprop training for the graphs `netshrink` prunes.
//!
//! [`net::Net`] lowers a [`netshrink::GraphModel`] (including shrunk models
//! with scatter chains) into f64 steps with hand-written backward passes.
//! [`train::train`] runs SGD with a poly schedule over the synthetic shapes
//! dataset in [`data`], optionally under a Slimming or SWD regularizer, and
//! [`pipeline`] chains training, pruning and retraining.

pub mod config;
pub mod data;
pub mod error;
pub mod net;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod train;

use std::path::{Path, PathBuf};

use netshrink::onnx::save_model;
use netshrink::GraphModel;

pub use error::{Result, TrainError};
pub use optim::OptimizerState;

/// File names of a checkpoint written by [`save_checkpoint`].
pub const CHECKPOINT_MODEL: &str = "model.onnx";
pub const CHECKPOINT_OPTIMIZER: &str = "optimizer.json";

/// Write `model.onnx` and its `optimizer.json` sidecar into `dir`.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &GraphModel, optimizer: &OptimizerState) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let m = dir.join(CHECKPOINT_MODEL);
    let o = dir.join(CHECKPOINT_OPTIMIZER);
    save_model(model, &m)?;
    optimizer.save(&o)?;
    Ok((m, o))
}
