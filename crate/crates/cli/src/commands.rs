use std::path::Path;

use serde::{Deserialize, Serialize};

use netshrink::cost::{cost_report, count_macs, count_params};
use netshrink::deps::build_dependency_partition;
use netshrink::energy::{
    estimate_energy, mean_abs_rel_error, parse_calibration_csv, select_series, shipped_calibration, EnergyModel,
};
use netshrink::graph::{infer_shapes, to_debug_json, BnInit, DebugOptions};
use netshrink::hrnet::{build_hrnet_lite, build_hrnet_lite_with, HrnetLiteSpec};
use netshrink::power::{integrate_energy, parse_tegrastats, IntegrateOptions};
use netshrink::prune::{score_channels, select_mask, BudgetKind, MaskFile};
use netshrink::shrink::{masked_oracle, shrink, verify_equivalence, Equivalence, ShrinkReport};
use netshrink::GraphModel;
use netshrink_train::config::{RegularizerKind, RunConfig};
use netshrink_train::data::generate_dataset;
use netshrink_train::pipeline::{run_slimming_pipeline, run_swd_pipeline};
use netshrink_train::train::{history_jsonl, train as train_model};

use crate::error::{CliError, Result};
use crate::manifest::{ensure_dir, Run};
use crate::{
    BudgetArg, BuildArgs, CostArgs, DumpArgs, EnergyArgs, MethodArg, PowerArgs, PruneArgs, RegularizerArg, TrainArgs,
    VerifyArgs,
};

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

/// Print a report and, when `out` is given, write it with a manifest.
fn emit(mut run: Run, out: Option<&Path>, name: &str, value: &impl Serialize) -> Result<()> {
    print_json(value);
    if let Some(dir) = out {
        ensure_dir(dir)?;
        run.write_json(dir, name, value)?;
        run.finish(dir)?;
    }
    Ok(())
}

pub fn build(a: BuildArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let mut run = Run::start("build", &a, seed);
    let spec = HrnetLiteSpec {
        width: a.width,
        blocks: a.blocks,
        n_classes: a.classes,
        batch: a.batch,
        height: a.height,
        width_px: a.width_px,
        seed,
        ..HrnetLiteSpec::default()
    };
    let init = if a.random_bn { BnInit::Random } else { BnInit::Identity };
    let model = build_hrnet_lite_with(&spec, init)?;
    ensure_dir(&a.out)?;
    let path = run.write_model(&a.out, "model.onnx", &model)?;
    run.set_config(serde_json::json!({ "args": &a, "spec": &spec }));
    run.finish(&a.out)?;
    println!("{}: {} params", path.display(), count_params(&model).headline);
    Ok(())
}

fn load_run_config(run: &mut Run, a: &TrainArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::from_json(&run.read_text(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(r) = a.regularizer {
        cfg.regularizer = match r {
            RegularizerArg::None => RegularizerKind::None,
            RegularizerArg::Slimming => RegularizerKind::Slimming,
            RegularizerArg::Swd => RegularizerKind::Swd,
        };
    }
    if let Some(p) = a.final_rate {
        cfg.swd.final_rate = p;
        cfg.slimming.final_rate = p;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.pipeline |= a.pipeline;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.dataset.seed = s;
        cfg.model.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut run = Run::start("train", &a, seed.unwrap_or(0));
    let cfg = load_run_config(&mut run, &a, seed)?;
    run = Run::start("train", serde_json::json!({ "args": &a, "config": &cfg }), cfg.train.seed);
    if let Some(path) = &a.config {
        run.input(path);
    }
    let data = generate_dataset(&cfg.dataset)?;
    let model = build_hrnet_lite(&cfg.model)?;
    let out = a.out.as_path();
    ensure_dir(out)?;
    run.write_json(out, "config.json", &cfg)?;
    if cfg.pipeline {
        let result = match cfg.regularizer {
            RegularizerKind::Slimming => run_slimming_pipeline(&model, &data, &cfg.train, &cfg.slimming)?,
            RegularizerKind::Swd => run_swd_pipeline(&model, &data, &cfg.train, &cfg.swd)?,
            RegularizerKind::None => unreachable!("validated config"),
        };
        run.write_model(out, "model.onnx", &result.model)?;
        run.write(out, "history.jsonl", history_jsonl(&result.report.history))?;
        run.write(out, "retrain_history.jsonl", history_jsonl(&result.report.retrain_history))?;
        run.write(out, "mask.json", result.mask.to_json() + "\n")?;
        run.write_json(out, "report.json", &result.report)?;
        run.finish(out)?;
        println!(
            "{}: params {} -> {}, mIoU {:.4} -> {:.4}",
            result.report.method,
            result.report.params_before,
            result.report.params_after,
            result.report.miou_trained,
            result.report.miou_final
        );
    } else {
        let outcome = train_model(&model, &data, &cfg.train, &cfg.regularizer())?;
        run.write_model(out, "model.onnx", &outcome.model())?;
        run.write(out, "history.jsonl", history_jsonl(&outcome.history))?;
        run.write_json(out, "optimizer.json", &outcome.optimizer)?;
        run.finish(out)?;
        if let Some(last) = outcome.history.last() {
            println!("epoch {}: loss {:.4}, mIoU {:.4}", last.epoch, last.loss, last.miou);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PruneReport {
    method: MethodArg,
    budget_kind: BudgetKind,
    target: f64,
    achieved_fraction: f64,
    achievable: bool,
    params_before: u64,
    params_after: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    shrink: Option<ShrinkReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    equivalence: Option<Equivalence>,
}

pub fn prune(a: PruneArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let mut run = Run::start("prune", &a, seed);
    let model = run.load_model(&a.model)?;
    let p = build_dependency_partition(&model)?;
    let scores = score_channels(&model, &p)?;
    let budget = match a.budget {
        BudgetArg::Params => BudgetKind::ParameterFraction,
        BudgetArg::Channels => BudgetKind::ChannelFraction,
    };
    let sel = select_mask(&model, &p, &scores, a.target, budget)?;
    ensure_dir(&a.out)?;
    run.write(&a.out, "mask.json", MaskFile::from_selection(&sel).to_json() + "\n")?;

    let (result, shrink_report, equivalence) = match a.method {
        MethodArg::Full => {
            let out = shrink(&model, &p, &sel.mask)?;
            let eq = verify_equivalence(&model, &p, &sel.mask, &out.model, a.n, a.tol, seed)?;
            let mut report = out.report;
            report.max_rel_err = Some(eq.max_rel_err);
            run.write_model(&a.out, "shrunk.onnx", &out.model)?;
            (out.model, Some(report), Some(eq))
        }
        MethodArg::MaskOnly => {
            let masked = masked_oracle(&model, &p, &sel.mask)?;
            run.write_model(&a.out, "masked.onnx", &masked)?;
            (masked, None, None)
        }
    };
    let params_after = shrink_report.as_ref().map_or(count_params(&result).headline, |r| r.params_after);
    let report = PruneReport {
        method: a.method,
        budget_kind: budget,
        target: a.target,
        achieved_fraction: sel.achieved_fraction,
        achievable: sel.achievable,
        params_before: count_params(&model).headline,
        params_after,
        shrink: shrink_report,
        equivalence,
    };
    run.write_json(&a.out, "report.json", &report)?;
    run.finish(&a.out)?;
    println!(
        "removed {:.4} of {} (target {}), params {} -> {}",
        sel.achieved_fraction,
        match budget {
            BudgetKind::ParameterFraction => "parameters",
            BudgetKind::ChannelFraction => "channels",
        },
        a.target,
        report.params_before,
        report.params_after
    );
    if let Some(eq) = &report.equivalence {
        if !eq.passed {
            return Err(CliError::Verification(format!("max rel err {:e} > tol {:e}", eq.max_rel_err, eq.tol)));
        }
    }
    if !sel.achievable {
        return Err(CliError::Unachievable {
            target: a.target,
            achieved: sel.achieved_fraction,
        });
    }
    Ok(())
}

pub fn verify(a: VerifyArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let mut run = Run::start("verify", &a, seed);
    let original = run.load_model(&a.original)?;
    let mask = MaskFile::from_json(&run.read_text(&a.mask)?)?.mask();
    let p = build_dependency_partition(&original)?;
    p.check_mask(&mask)?;
    run.input(&a.shrunk);
    let eq = netshrink::onnx::load_model(&a.shrunk)
        .and_then(|shrunk| verify_equivalence(&original, &p, &mask, &shrunk, a.n, a.tol, seed))
        .map_err(|e| CliError::Verification(format!("{}: {e}", a.shrunk.display())))?;
    emit(run, a.out.as_deref(), "verify.json", &eq)?;
    if !eq.passed {
        return Err(CliError::Verification(format!("max rel err {:e} > tol {:e}", eq.max_rel_err, eq.tol)));
    }
    Ok(())
}

fn at_shape(model: GraphModel, shape: Option<&[usize]>) -> Result<GraphModel> {
    Ok(match shape {
        Some(s) => infer_shapes(&model, s)?,
        None => model,
    })
}

pub fn cost(a: CostArgs, seed: Option<u64>) -> Result<()> {
    let mut run = Run::start("cost", &a, seed.unwrap_or(0));
    let shape = a.input_shape.as_deref();
    let model = at_shape(run.load_model(&a.model)?, shape)?;
    let baseline = match &a.baseline {
        Some(b) => Some(at_shape(run.load_model(b)?, shape)?),
        None => None,
    };
    let report = cost_report(&model, baseline.as_ref())?;
    emit(run, a.out.as_deref(), "cost.json", &report)
}

#[derive(Serialize, Deserialize)]
struct Calibration {
    model: EnergyModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    holdout: Option<Holdout>,
}

#[derive(Serialize, Deserialize)]
struct Holdout {
    series: String,
    n_points: usize,
    mean_abs_rel_error: f64,
}

#[derive(Serialize)]
struct Estimate {
    macs: u64,
    baseline_macs: u64,
    mac_fraction: f64,
    energy_joules: f64,
    calibration: EnergyModel,
}

pub fn energy(a: EnergyArgs, seed: Option<u64>) -> Result<()> {
    let mut run = Run::start("energy", &a, seed.unwrap_or(0));
    let points = match a.calibrate.as_ref().and_then(|p| p.as_ref()) {
        Some(csv) => parse_calibration_csv(&run.read_text(csv)?)?,
        None => shipped_calibration(),
    };
    let fit = |points| EnergyModel::calibrate(points, &a.series, &a.resolution);
    if a.calibrate.is_some() {
        let model = fit(&points)?;
        let holdout = a.holdout.as_ref().map(|series| {
            let pts = select_series(&points, series, &a.resolution);
            Holdout {
                series: series.clone(),
                n_points: pts.len(),
                mean_abs_rel_error: mean_abs_rel_error(&model, &pts),
            }
        });
        eprintln!(
            "alpha {:.6} J, b {:.6} J, R² {:.4} over {} points",
            model.slope, model.intercept, model.r_squared, model.n_points
        );
        return emit(run, a.out.as_deref(), "energy_model.json", &Calibration { model, holdout });
    }
    let (Some(target), Some(baseline)) = (&a.estimate, &a.baseline) else {
        return Err(CliError::Config("--estimate needs --baseline".into()));
    };
    let calibration = match &a.model_file {
        Some(path) => {
            let text = run.read_text(path)?;
            serde_json::from_str::<Calibration>(&text)
                .map(|c| c.model)
                .or_else(|_| serde_json::from_str::<EnergyModel>(&text))
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => fit(&points)?,
    };
    let macs = count_macs(&run.load_model(target)?)?.total;
    let baseline_macs = count_macs(&run.load_model(baseline)?)?.total;
    let energy_joules = estimate_energy(macs, baseline_macs, &calibration)?;
    let report = Estimate {
        macs,
        baseline_macs,
        mac_fraction: macs as f64 / baseline_macs as f64,
        energy_joules,
        calibration,
    };
    emit(run, a.out.as_deref(), "energy_estimate.json", &report)
}

pub fn power(a: PowerArgs, seed: Option<u64>) -> Result<()> {
    let mut run = Run::start("power", &a, seed.unwrap_or(0));
    let text = run.read_text(&a.log)?;
    let trace = parse_tegrastats(&text, &a.rail, a.period)?;
    let opts = IntegrateOptions {
        window: a.window.as_ref().map(|w| (w[0], w[1])),
        n_inferences: a.inferences,
        idle_mw: a.idle_mw,
    };
    let report = integrate_energy(&trace, &opts)?;
    emit(run, a.out.as_deref(), "power.json", &report)
}

pub fn dump(a: DumpArgs, seed: Option<u64>) -> Result<()> {
    let mut run = Run::start("dump", &a, seed.unwrap_or(0));
    let model = run.load_model(&a.model)?;
    let partition = if a.partition { Some(build_dependency_partition(&model)?) } else { None };
    let text = to_debug_json(
        &model,
        &DebugOptions {
            include_values: a.values,
            partition: partition.as_ref(),
        },
    );
    println!("{text}");
    if let Some(dir) = &a.out {
        ensure_dir(dir)?;
        run.write(dir, "dump.json", text + "\n")?;
        run.finish(dir)?;
    }
    Ok(())
}
