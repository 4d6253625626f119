//! End-to-end Slimming and SWD pruning pipelines.

use serde::Serialize;

use netshrink::cost::count_params;
use netshrink::deps::build_dependency_partition;
use netshrink::prune::{
    score_channels, select_mask, select_mask_with, BudgetKind, MaskFile, SelectOptions, Selection, SlimmingConfig, SwdConfig,
};
use netshrink::shrink::{expand, shrink, ShrinkReport};
use netshrink::GraphModel;

use crate::data::Dataset;
use crate::error::Result;
use crate::train::{evaluate, train, EpochRecord, Regularizer, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub rate: f64,
    pub achieved_fraction: f64,
    pub achievable: bool,
    pub params: u64,
    /// Validation mIoU of the shrunk model, before and after fine-tuning.
    pub miou_pruned: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineReport {
    pub method: String,
    pub params_before: u64,
    /// mIoU after the (possibly penalized) initial training.
    pub miou_trained: f64,
    pub steps: Vec<StepReport>,
    pub params_after: u64,
    /// mIoU after the LR-rewind retrain.
    pub miou_final: f64,
    pub shrink: ShrinkReport,
    pub history: Vec<EpochRecord>,
    pub retrain_history: Vec<EpochRecord>,
}

pub struct PipelineOutcome {
    /// The shrunk model after retraining.
    pub model: GraphModel,
    pub mask: MaskFile,
    pub report: PipelineReport,
}

/// Seed for the k-th training phase of a pipeline.
fn phase_seed(config: &TrainConfig, k: u64) -> TrainConfig {
    TrainConfig {
        seed: config.seed.wrapping_add(k.wrapping_mul(0x9e37_79b9)),
        ..config.clone()
    }
}

/// Shrink `model` at `rate` of the given budget, with no training.
pub fn prune_once(model: &GraphModel, rate: f64, budget: BudgetKind) -> Result<(GraphModel, Selection, ShrinkReport)> {
    let p = build_dependency_partition(model)?;
    let scores = score_channels(model, &p)?;
    let sel = select_mask(model, &p, &scores, rate, budget)?;
    let out = shrink(model, &p, &sel.mask)?;
    Ok((out.model, sel, out.report))
}

/// Penalized training, then `n_steps` rounds of select → shrink →
/// fine-tune at linearly increasing rates, then an LR-rewind retrain.
pub fn run_slimming_pipeline(model: &GraphModel, data: &Dataset, config: &TrainConfig, slim: &SlimmingConfig) -> Result<PipelineOutcome> {
    slim.validate()?;
    let trained = train(model, data, config, &Regularizer::Slimming(slim.clone()))?;
    let mut full = trained.model();
    let miou_trained = trained.history.last().map_or(0.0, |r| r.miou);
    let partition = build_dependency_partition(&full)?;
    let params_before = count_params(&full).headline;

    let mut prior = None;
    let mut steps = Vec::new();
    let mut last = None;
    for (k, rate) in slim.step_rates().into_iter().enumerate() {
        let scores = score_channels(&full, &partition)?;
        let opts = SelectOptions {
            prior: prior.as_ref(),
            ..SelectOptions::default()
        };
        let sel = select_mask_with(&full, &partition, &scores, rate, slim.budget, &opts)?;
        let out = shrink(&full, &partition, &sel.mask)?;
        let miou_pruned = evaluate(&out.model, data)?;
        let tuned = if slim.finetune_epochs > 0 {
            let cfg = TrainConfig {
                epochs: slim.finetune_epochs,
                ..phase_seed(config, k as u64 + 1)
            };
            train(&out.model, data, &cfg, &Regularizer::None)?.model()
        } else {
            out.model.clone()
        };
        steps.push(StepReport {
            step: k + 1,
            rate,
            achieved_fraction: sel.achieved_fraction,
            achievable: sel.achievable,
            params: count_params(&tuned).headline,
            miou_pruned,
            miou: evaluate(&tuned, data)?,
        });
        full = expand(&full, &tuned, &out.slices)?;
        prior = Some(sel.mask.clone());
        last = Some((tuned, sel, out.report));
    }
    let (pruned, sel, report) = last.expect("at least one step");
    let retrained = train(&pruned, data, &phase_seed(config, 100), &Regularizer::None)?;
    let model = retrained.model();
    Ok(PipelineOutcome {
        report: PipelineReport {
            method: "slimming".into(),
            params_before,
            miou_trained,
            steps,
            params_after: count_params(&model).headline,
            miou_final: retrained.history.last().map_or(0.0, |r| r.miou),
            shrink: report,
            history: trained.history,
            retrain_history: retrained.history,
        },
        mask: MaskFile::from_selection(&sel),
        model,
    })
}

/// Training under SWD, a single prune at the final rate, then an LR-rewind
/// retrain.
pub fn run_swd_pipeline(model: &GraphModel, data: &Dataset, config: &TrainConfig, swd: &SwdConfig) -> Result<PipelineOutcome> {
    swd.validate()?;
    let trained = train(model, data, config, &Regularizer::Swd(swd.clone()))?;
    let full = trained.model();
    let miou_trained = trained.history.last().map_or(0.0, |r| r.miou);
    let params_before = count_params(&full).headline;
    let (pruned, sel, report) = prune_once(&full, swd.final_rate, swd.budget)?;
    let miou_pruned = evaluate(&pruned, data)?;
    let step = StepReport {
        step: 1,
        rate: swd.final_rate,
        achieved_fraction: sel.achieved_fraction,
        achievable: sel.achievable,
        params: count_params(&pruned).headline,
        miou_pruned,
        miou: miou_pruned,
    };
    let retrained = train(&pruned, data, &phase_seed(config, 100), &Regularizer::None)?;
    let model = retrained.model();
    Ok(PipelineOutcome {
        report: PipelineReport {
            method: "swd".into(),
            params_before,
            miou_trained,
            steps: vec![step],
            params_after: count_params(&model).headline,
            miou_final: retrained.history.last().map_or(0.0, |r| r.miou),
            shrink: report,
            history: trained.history,
            retrain_history: retrained.history,
        },
        mask: MaskFile::from_selection(&sel),
        model,
    })
}
