//! The training loop with optional Slimming or SWD regularization.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use netshrink::deps::{build_dependency_partition, DependencyPartition};
use netshrink::metrics::ConfusionMatrix;
use netshrink::prune::{
    score_channels, select_mask, slimming_penalty, swd_apply, swd_coefficient, swd_targets, RecomputePeriod, SlimmingConfig,
    SwdConfig, SwdTarget,
};
use netshrink::{GraphModel, Tensor};

use crate::data::{augment, Dataset, Split};
use crate::error::{Result, TrainError};
use crate::net::{Mode, Net, ParamMap};
use crate::ops::{softmax_cross_entropy, IGNORE_LABEL};
use crate::optim::{poly_lr_pow, sgd_step, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Published optimizer settings with the toy epoch and batch counts.
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 40,
            batch_size: 8,
            poly_power: 2.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Published schedule: 200 epochs, batch 10.
    pub fn paper_scale() -> Self {
        Self {
            epochs: 200,
            batch_size: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::config("train.base_lr", format!("must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::config("train.momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::config("train.weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(TrainError::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::config("train.batch_size", "must be at least 1"));
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return Err(TrainError::config("train.poly_power", format!("must be >= 0, got {}", self.poly_power)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Regularizer {
    None,
    Slimming(SlimmingConfig),
    Swd(SwdConfig),
}

/// One line of the JSONL training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean pixel cross-entropy over the epoch's training batches.
    pub loss: f64,
    /// Validation mIoU after the epoch.
    pub miou: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub a_t: Option<f64>,
}

pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
        .collect()
}

pub struct TrainOutcome {
    pub net: Net,
    pub history: Vec<EpochRecord>,
    pub optimizer: OptimizerState,
    /// The SWD targeted set in force at the end of training.
    pub swd_targets: Vec<SwdTarget>,
}

impl TrainOutcome {
    pub fn model(&self) -> GraphModel {
        self.net.to_model()
    }
}

/// Validation mIoU using running statistics.
pub fn evaluate_net(net: &Net, split: &Split, n_classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(n_classes);
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(16) {
        let (x, y) = split.batch(chunk);
        let trace = net.forward(x, Mode::Eval);
        let logits = trace.logits();
        let pred = argmax_channels(logits);
        let labels: Vec<i64> = y.iter().map(|&l| l as i64).collect();
        cm.update(&pred, &labels, Some(IGNORE_LABEL as i64))?;
    }
    Ok(cm.miou()?)
}

pub fn evaluate(model: &GraphModel, data: &Dataset) -> Result<f64> {
    evaluate_net(&Net::from_model(model)?, &data.val, data.n_classes)
}

/// Class index per pixel, lowest index on ties.
pub fn argmax_channels(logits: &Tensor<f64>) -> Vec<i64> {
    let s = logits.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for px in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * hw + px] > d[(b * k + best) * hw + px] {
                    best = c;
                }
            }
            out.push(best as i64);
        }
    }
    out
}

/// Gradient of the smooth-L1 γ penalty added into `grads`; returns the
/// penalty value.
fn add_slimming(net: &Net, partition: &DependencyPartition, model: &GraphModel, cfg: &SlimmingConfig, grads: &mut ParamMap) -> f64 {
    let mut total = 0.0;
    for g in partition.prunable() {
        let bn = model.node(g.bn.as_deref().expect("prunable groups have a BN")).expect("BN node");
        let name = &bn.inputs[1];
        let (loss, grad) = slimming_penalty(net.params[name].data(), cfg.lambda, cfg.beta);
        total += loss;
        for (a, b) in grads.get_mut(name).expect("γ gradient").data_mut().iter_mut().zip(grad) {
            *a += b;
        }
    }
    total
}

fn current_targets(net: &Net, partition: &DependencyPartition, cfg: &SwdConfig) -> Result<Vec<SwdTarget>> {
    if cfg.final_rate == 0.0 {
        return Ok(Vec::new());
    }
    let model = net.to_model();
    let scores = score_channels(&model, partition)?;
    let sel = select_mask(&model, partition, &scores, cfg.final_rate, cfg.budget)?;
    Ok(swd_targets(&model, partition, &sel.mask)?)
}

/// Train `model` on `data.train`, evaluating on `data.val` after each epoch.
/// Deterministic given `config.seed`.
pub fn train(model: &GraphModel, data: &Dataset, config: &TrainConfig, reg: &Regularizer) -> Result<TrainOutcome> {
    config.validate()?;
    match reg {
        Regularizer::None => {}
        Regularizer::Slimming(c) => c.validate()?,
        Regularizer::Swd(c) => c.validate()?,
    }
    let mut net = Net::from_model(model)?;
    let partition = build_dependency_partition(model)?;
    let (h, w) = (data.train.height, data.train.width);
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = ParamMap::new();
    let mut history = Vec::new();
    let mut targets = Vec::new();
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let lr = poly_lr_pow(epoch, config.epochs, config.base_lr, config.poly_power);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut a_t = None;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            if let Regularizer::Swd(c) = reg {
                let due = match c.recompute {
                    RecomputePeriod::Epoch => bi == 0,
                    RecomputePeriod::Steps(k) => step.is_multiple_of(k as u64),
                };
                if due {
                    targets = current_targets(&net, &partition, c)?;
                }
            }
            let mut xs = Vec::with_capacity(chunk.len() * 3 * h * w);
            let mut ys = Vec::with_capacity(chunk.len() * h * w);
            for &i in chunk {
                let (img, lab) = augment(data.train.image(i), data.train.label(i), h, w, &mut rng);
                xs.extend(img.iter().map(|&v| v as f64));
                ys.extend(lab);
            }
            let x = Tensor::from_vec(&[chunk.len(), 3, h, w], xs)?;
            let trace = net.forward(x, Mode::Train);
            let (loss, dlogits, _) = softmax_cross_entropy(trace.logits(), &ys);
            if !loss.is_finite() {
                let node = net.first_non_finite(&trace).unwrap_or_else(|| net.logits_name().to_string());
                return Err(TrainError::Diverged { epoch, node, history });
            }
            let mut grads = net.backward(&trace, dlogits);
            net.update_running_stats(&trace);
            if let Regularizer::Slimming(c) = reg {
                add_slimming(&net, &partition, model, c, &mut grads);
            }
            sgd_step(&mut net.params, &grads, &mut velocity, lr, config.momentum, config.weight_decay);
            step += 1;
            if let Regularizer::Swd(c) = reg {
                let a = swd_coefficient(step, total_steps, c.a_min, c.a_max);
                swd_apply(&mut net.params, &targets, a, config.weight_decay, lr)?;
                a_t = Some(a);
            }
            loss_sum += loss;
        }
        let miou = evaluate_net(&net, &data.val, data.n_classes)?;
        history.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / steps_per_epoch as f64,
            miou,
            a_t,
        });
    }
    Ok(TrainOutcome {
        optimizer: OptimizerState::new(&velocity, config.epochs, step),
        net,
        history,
        swd_targets: targets,
    })
}
