//! SGD with momentum, the poly schedule, and the optimizer sidecar file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use netshrink::Tensor;

use crate::error::{Result, TrainError};
use crate::net::ParamMap;

pub const OPTIMIZER_FORMAT_VERSION: u32 = 1;

/// `base_lr · (1 − epoch/epochs)^power`.
pub fn poly_lr_pow(epoch: usize, epochs: usize, base_lr: f64, power: f64) -> f64 {
    assert!(epochs > 0 && epoch <= epochs, "epoch {epoch} outside 0..={epochs}");
    base_lr * (1.0 - epoch as f64 / epochs as f64).powf(power)
}

/// The quadratic poly schedule.
pub fn poly_lr(epoch: usize, epochs: usize, base_lr: f64) -> f64 {
    poly_lr_pow(epoch, epochs, base_lr, 2.0)
}

/// `v ← momentum·v + g + wd·p; p ← p − lr·v`, for every parameter in
/// `params`. Missing velocities start at zero.
pub fn sgd_step(params: &mut ParamMap, grads: &ParamMap, velocity: &mut ParamMap, lr: f64, momentum: f64, weight_decay: f64) {
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        assert_eq!(g.shape(), p.shape(), "gradient shape for `{name}`");
        let v = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Momentum buffers and progress counters, saved next to a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub format_version: u32,
    pub epochs_done: usize,
    pub steps_done: u64,
    pub velocity: BTreeMap<String, StoredTensor>,
}

impl OptimizerState {
    pub fn new(velocity: &ParamMap, epochs_done: usize, steps_done: u64) -> Self {
        Self {
            format_version: OPTIMIZER_FORMAT_VERSION,
            epochs_done,
            steps_done,
            velocity: velocity
                .iter()
                .map(|(k, v)| {
                    let t = StoredTensor {
                        shape: v.shape().to_vec(),
                        data: v.data().to_vec(),
                    };
                    (k.clone(), t)
                })
                .collect(),
        }
    }

    pub fn velocity(&self) -> Result<ParamMap> {
        self.velocity
            .iter()
            .map(|(k, t)| Ok((k.clone(), Tensor::from_vec(&t.shape, t.data.clone())?)))
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        if s.format_version != OPTIMIZER_FORMAT_VERSION {
            return Err(TrainError::config(
                "format_version",
                format!("expected {OPTIMIZER_FORMAT_VERSION}, got {}", s.format_version),
            ));
        }
        s.velocity()?;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
