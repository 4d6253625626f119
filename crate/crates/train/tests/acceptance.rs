//! Acceptance run: one line per criterion, every gating criterion at its
//! stated tolerance. Criterion 12 is reported but does not gate.

mod common;
#[path = "../../core/tests/common/mod.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::time::Instant;

use netshrink::cost::{count_macs, count_macs_at, count_params};
use netshrink::deps::{build_dependency_partition, DependencyPartition};
use netshrink::energy::{mean_abs_rel_error, select_series, shipped_calibration, EnergyModel};
use netshrink::exec::{execute, random_inputs};
use netshrink::graph::{BnInit, ConvAttrs, GraphBuilder, OpKind};
use netshrink::hrnet::{build_hrnet_lite, build_hrnet_lite_with, HrnetLiteSpec};
use netshrink::power::{integrate_energy, parse_tegrastats, IntegrateOptions, DEFAULT_RAIL};
use netshrink::prune::{
    score_channels, select_mask, swd_coefficient, BudgetKind, PruneMask, SwdConfig, PARAM_BUDGET_TOLERANCE,
};
use netshrink::shrink::{shrink, verify_equivalence};
use netshrink::synth::{corpus, generate, random_mask, Family};
use netshrink::GraphModel;
use netshrink_train::data::{generate_dataset, SyntheticDatasetSpec};
use netshrink_train::optim::poly_lr;
use netshrink_train::pipeline::run_swd_pipeline;
use netshrink_train::train::{train, Regularizer, TrainConfig};

use oracles::{expected_macs, headline_recount, live_channels, max_rel_err, mismatched_add_inputs, silenced};

const CORPUS_SIZE: usize = 120;
const CORPUS_SEED: u64 = 31_337;
const EQ_TOL: f64 = 1e-5;
const EQ_INPUTS: u64 = 10;

struct Outcome {
    id: u32,
    gating: bool,
    passed: bool,
    detail: String,
}

fn outcome(id: u32, passed: bool, detail: String) -> Outcome {
    Outcome {
        id,
        gating: true,
        passed,
        detail,
    }
}

/// Shrink under `mask` and check against both the library check and the
/// locally silenced oracle. Returns the worst relative error seen.
fn equivalence_error(model: &GraphModel, p: &DependencyPartition, mask: &PruneMask, seed: u64) -> f64 {
    let out = shrink(model, p, mask).unwrap();
    let eq = verify_equivalence(model, p, mask, &out.model, EQ_INPUTS as usize, EQ_TOL, seed).unwrap();
    let oracle = silenced(model, mask);
    let mut worst = eq.max_rel_err;
    for k in 0..EQ_INPUTS {
        let x = random_inputs(model, seed.wrapping_mul(1000).wrapping_add(k));
        let a = execute(&out.model, &x).unwrap().outputs;
        let b = execute(&oracle, &x).unwrap().outputs;
        worst = worst.max(max_rel_err(&a, &b));
    }
    worst
}

fn shrink_equivalence(graphs: &[(Family, GraphModel)]) -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut families = std::collections::BTreeSet::new();
    for (i, (family, model)) in graphs.iter().enumerate() {
        families.insert(format!("{family:?}"));
        let p = build_dependency_partition(model).unwrap();
        worst = worst.max(equivalence_error(model, &p, &random_mask(&p, i as u64), i as u64));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        1,
        graphs.len() >= 100 && families.len() == 5 && worst <= EQ_TOL && secs <= 120.0,
        format!("{} graphs, {} families, max rel err {worst:.2e}, {secs:.1}s", graphs.len(), families.len()),
    )
}

fn scatter_minimality(graphs: &[(Family, GraphModel)]) -> Outcome {
    let (mut ok, mut with, mut without) = (true, 0, 0);
    for (i, (_, model)) in graphs.iter().enumerate() {
        let p = build_dependency_partition(model).unwrap();
        let mask = random_mask(&p, i as u64);
        let expected = mismatched_add_inputs(model, &live_channels(model, &mask));
        let out = shrink(model, &p, &mask).unwrap();
        let total: usize = expected.values().sum();
        ok &= out.model.count_kind(OpKind::ScatterND) == total;
        for (add, n) in &expected {
            let prefix = format!("{add}.scatter");
            let chains = out
                .model
                .nodes
                .iter()
                .filter(|x| x.kind() == OpKind::ScatterND && x.name.starts_with(&prefix))
                .count();
            ok &= chains == *n;
        }
        if total == 0 {
            without += 1;
        } else {
            with += 1;
        }
    }
    outcome(
        2,
        ok && with > 0 && without > 0,
        format!("{without} graphs with coinciding survivors, {with} with mismatches"),
    )
}

fn gradient_suite() -> Outcome {
    let checks = common::gradient_suite(12);
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = checks.iter().filter(|c| c.max_rel_err > common::FD_TOL).map(|c| c.op).collect();
    outcome(
        3,
        failing.is_empty() && checks.len() == common::OPS.len() && checks.iter().all(|c| c.shapes >= 20),
        format!(
            "{} ops x {} shapes, step {:e}, worst rel err {worst:.2e}, failing {failing:?}",
            checks.len(),
            common::SHAPES_PER_OP,
            common::FD_STEP
        ),
    )
}

/// Per-layer count of the HRNet-lite layout: (in, out, kernel, has BN).
fn hrnet_hand_count(w: u64, blocks: u64, classes: u64, cin: u64) -> u64 {
    let mut layers: Vec<(u64, u64, u64, bool)> = vec![(cin, w, 3, true)];
    for _ in 0..blocks {
        layers.extend([(w, w, 3, true), (w, w, 3, true)]);
    }
    layers.push((w, 2 * w, 3, true));
    for _ in 0..blocks {
        layers.extend([(w, w, 3, true), (w, w, 3, true), (2 * w, 2 * w, 3, true), (2 * w, 2 * w, 3, true)]);
    }
    layers.extend([(2 * w, w, 1, true), (w, 2 * w, 3, true), (3 * w, classes, 1, false)]);
    layers
        .into_iter()
        .map(|(i, o, k, bn)| o * i * k * k + if bn { 2 * o } else { o })
        .sum()
}

fn counting_fixtures() -> Outcome {
    let conv = |bn: bool| {
        let mut b = GraphBuilder::new("fixture", &[1, 3, 64, 128], 0);
        let x = b.input();
        let mut y = b.conv(&x, 16, ConvAttrs::square(3, 1, 1), true);
        if bn {
            y = b.batch_norm(&y);
        }
        b.output(&y);
        b.finish().unwrap()
    };
    let plain = conv(false);
    let with_bn = conv(true);
    let params = count_params(&plain).headline;
    let macs = count_macs_at(&plain, &[1, 3, 64, 128]).unwrap().total;
    let bn_params = count_params(&with_bn).headline;
    let hrnet = build_hrnet_lite(&HrnetLiteSpec::default()).unwrap();
    let hr = count_params(&hrnet).headline;
    let hand = hrnet_hand_count(8, 2, 4, 3);
    outcome(
        4,
        params == 448 && macs == 3_538_944 && bn_params == 480 && hr == hand && hr == HrnetLiteSpec::default().param_count(),
        format!("conv {params} params / {macs} MACs, conv+BN {bn_params}, HRNet-lite {hr} (hand {hand})"),
    )
}

fn mac_convention(graphs: &[(Family, GraphModel)]) -> Outcome {
    let mut bad = 0;
    let mut scattered = 0;
    for (i, (_, model)) in graphs.iter().enumerate() {
        let p = build_dependency_partition(model).unwrap();
        let mask = random_mask(&p, i as u64);
        let out = shrink(model, &p, &mask).unwrap();
        let macs = count_macs(&out.model).unwrap();
        let scatter_macs: u64 = macs
            .per_node
            .iter()
            .filter(|(n, _)| out.model.node(n).unwrap().kind() != OpKind::Conv)
            .map(|(_, m)| *m)
            .sum();
        scattered += (out.model.count_kind(OpKind::ScatterND) > 0) as usize;
        if scatter_macs != 0 || macs.total != expected_macs(model, &live_channels(model, &mask)) {
            bad += 1;
        }
    }
    outcome(5, bad == 0, format!("{} graphs ({scattered} with scatter), {bad} mismatches", graphs.len()))
}

fn energy_calibration() -> Outcome {
    let cal = shipped_calibration();
    let m = EnergyModel::calibrate(&cal, "swd", "512x1024").unwrap();
    let mare = mean_abs_rel_error(&m, &select_series(&cal, "slimming", "512x1024"));
    outcome(
        6,
        m.r_squared >= 0.95 && mare <= 0.15,
        format!("R² {:.4}, hold-out mean abs rel error {:.2}%", m.r_squared, 100.0 * mare),
    )
}

fn schedules() -> Outcome {
    let lr = poly_lr(100, 200, 0.01);
    let lo = swd_coefficient(0, 200, 0.1, 1e10);
    let hi = swd_coefficient(200, 200, 0.1, 1e10);
    let mid = swd_coefficient(100, 200, 0.1, 1e10);
    let geo = (0.1f64 * 1e10).sqrt();
    let mid_err = (mid - geo).abs() / geo;
    outcome(
        7,
        lr == 0.0025 && lo == 0.1 && hi == 1e10 && mid_err <= 1e-9,
        format!("poly_lr {lr}, a(0) {lo}, a(T) {hi:e}, midpoint rel err {mid_err:.1e}"),
    )
}

fn toy_model(seed: u64) -> GraphModel {
    build_hrnet_lite(&HrnetLiteSpec {
        height: 16,
        width_px: 16,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn toy_data(seed: u64) -> netshrink_train::data::Dataset {
    generate_dataset(&SyntheticDatasetSpec {
        seed,
        ..SyntheticDatasetSpec::small()
    })
    .unwrap()
}

fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

/// (targeted / untargeted mean |γ|, shrink equivalence error) for one seed.
fn annihilation_run(seed: u64) -> (f64, f64) {
    let out = train(&toy_model(seed), &toy_data(seed), &toy_config(seed), &Regularizer::Swd(SwdConfig::toy(0.5))).unwrap();
    let targeted: BTreeMap<&str, Vec<usize>> = out.swd_targets.iter().fold(BTreeMap::new(), |mut m, t| {
        m.entry(t.bn_scale.as_str()).or_default().push(t.channel);
        m
    });
    let (mut on, mut off) = (Vec::new(), Vec::new());
    let p0 = build_dependency_partition(out.net.template()).unwrap();
    for g in p0.prunable() {
        let bn = out.net.template().node(g.bn.as_deref().unwrap()).unwrap();
        let scale = &bn.inputs[1];
        let hit = targeted.get(scale.as_str());
        for (c, v) in out.net.params[scale].data().iter().enumerate() {
            if hit.is_some_and(|h| h.contains(&c)) { &mut on } else { &mut off }.push(v.abs());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let ratio = if on.is_empty() { f64::INFINITY } else { mean(&on) / mean(&off) };

    let model = out.model();
    let p = build_dependency_partition(&model).unwrap();
    let scores = score_channels(&model, &p).unwrap();
    let sel = select_mask(&model, &p, &scores, 0.5, BudgetKind::ParameterFraction).unwrap();
    (ratio, equivalence_error(&model, &p, &sel.mask, 900 + seed))
}

fn swd_annihilation() -> Outcome {
    let runs: Vec<(f64, f64)> =
        std::thread::scope(|s| (0..3).map(|seed| s.spawn(move || annihilation_run(seed))).collect::<Vec<_>>().into_iter().map(|h| h.join().unwrap()).collect());
    let passed = runs.iter().filter(|(r, e)| *r < 1e-6 && *e <= EQ_TOL).count();
    let detail = runs
        .iter()
        .map(|(r, e)| format!("ratio {r:.1e} eq {e:.1e}"))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(8, passed == 3, format!("{passed}/3 seeds: {detail}"))
}

fn collapse_guard() -> Outcome {
    let mut models: Vec<GraphModel> = corpus(40, 99).into_iter().map(|(_, m)| m).collect();
    models.push(build_hrnet_lite_with(&HrnetLiteSpec::default(), BnInit::Random).unwrap());
    let mut failures = 0;
    for (i, model) in models.iter().enumerate() {
        let p = build_dependency_partition(model).unwrap();
        let scores = score_channels(model, &p).unwrap();
        let sel = select_mask(model, &p, &scores, 0.99, BudgetKind::ChannelFraction).unwrap();
        let alive = p.prunable().all(|g| !sel.mask.kept[&g.id].is_empty());
        let out = shrink(model, &p, &sel.mask).unwrap();
        let runs = out.model.validated().is_ok() && execute(&out.model, &random_inputs(&out.model, i as u64)).is_ok();
        failures += (!alive || !runs) as usize;
    }
    outcome(9, failures == 0, format!("{} graphs at 0.99, {failures} collapsed or failed to run", models.len()))
}

/// Removed fraction after every prefix of the removal order, re-derived
/// independently: ascending |γ|, ties by (group, channel), never emptying a
/// group.
fn prefix_fractions(model: &GraphModel, p: &DependencyPartition) -> Vec<f64> {
    let mut order: Vec<(f64, String, usize)> = Vec::new();
    for g in p.prunable() {
        let bn = model.node(g.bn.as_deref().unwrap()).unwrap();
        let gamma = model.float_param(&bn.inputs[1]).unwrap();
        order.extend(gamma.data().iter().enumerate().map(|(c, v)| ((*v as f64).abs(), g.id.clone(), c)));
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut left: BTreeMap<String, usize> = p.prunable().map(|g| (g.id.clone(), g.channels)).collect();
    let before = headline_recount(model) as f64;
    let mut mask = PruneMask::keep_all(p);
    let mut out = vec![0.0];
    for (_, g, c) in order {
        let l = left.get_mut(&g).unwrap();
        if *l == 1 {
            continue;
        }
        *l -= 1;
        mask.kept.get_mut(&g).unwrap().retain(|&k| k != c);
        out.push(1.0 - headline_recount(&shrink(model, p, &mask).unwrap().model) as f64 / before);
    }
    out
}

fn budget_accuracy() -> Outcome {
    let (mut within, mut nearest_ok, mut bad) = (0, 0, 0);
    for i in 0..20u64 {
        let model = if i % 2 == 0 {
            let spec = HrnetLiteSpec {
                width: 6 + 2 * (i as usize % 4),
                height: 16,
                width_px: 16,
                seed: 50 + i,
                ..Default::default()
            };
            build_hrnet_lite_with(&spec, BnInit::Random).unwrap()
        } else {
            generate(Family::RandomDag, 700 + i)
        };
        let target = 0.05 + 0.045 * i as f64;
        let p = build_dependency_partition(&model).unwrap();
        let scores = score_channels(&model, &p).unwrap();
        let sel = select_mask(&model, &p, &scores, target, BudgetKind::ParameterFraction).unwrap();
        let out = shrink(&model, &p, &sel.mask).unwrap();
        let removed = 1.0 - headline_recount(&out.model) as f64 / headline_recount(&model) as f64;
        let err = (removed - target).abs();
        let reported = (removed - sel.achieved_fraction).abs() < 1e-12;
        if err <= PARAM_BUDGET_TOLERANCE {
            within += 1;
            bad += (!reported || !sel.achievable) as usize;
        } else {
            let nearest = prefix_fractions(&model, &p).into_iter().map(|f| (f - target).abs()).fold(f64::INFINITY, f64::min);
            let ok = reported && !sel.achievable && (err - nearest).abs() < 1e-12;
            nearest_ok += ok as usize;
            bad += !ok as usize;
        }
    }
    outcome(
        10,
        bad == 0,
        format!("20 graphs: {within} within ±0.5pp, {nearest_ok} at nearest achievable, {bad} wrong"),
    )
}

fn power_arithmetic() -> Outcome {
    let constant = "RAM 1/2MB VDD_GPU_SOC 1000mW/1000mW\n".repeat(10);
    let r1 = integrate_energy(&parse_tegrastats(&constant, DEFAULT_RAIL, 1.0).unwrap(), &IntegrateOptions::default()).unwrap();
    let mirrored = "CPU [1%] VDD_GPU_SOC 2771.487mW/2771.487mW VDD_CPU_CV 0mW/0mW\n".repeat(1000);
    let opts = IntegrateOptions {
        n_inferences: Some(1000),
        ..Default::default()
    };
    let r2 = integrate_energy(&parse_tegrastats(&mirrored, DEFAULT_RAIL, 1.0).unwrap(), &opts).unwrap();
    outcome(
        11,
        r1.total_j == 10.0 && r2.per_inference_j == Some(2.771487),
        format!("constant {} J, per inference {:?} J", r1.total_j, r2.per_inference_j),
    )
}

/// (baseline mIoU, SWD-pruned-and-retrained mIoU) for one seed.
fn trend_run(seed: u64) -> (f64, f64) {
    let seed = 40 + seed;
    let (model, data, cfg) = (toy_model(seed), toy_data(seed), toy_config(seed));
    let base = train(&model, &data, &cfg, &Regularizer::None).unwrap();
    let swd = run_swd_pipeline(&model, &data, &cfg, &SwdConfig::toy(0.5)).unwrap();
    (base.history.last().unwrap().miou, swd.report.miou_final)
}

fn qualitative_trend() -> Outcome {
    let runs: Vec<(f64, f64)> =
        std::thread::scope(|s| (0..3).map(|seed| s.spawn(move || trend_run(seed))).collect::<Vec<_>>().into_iter().map(|h| h.join().unwrap()).collect());
    let loss: f64 = runs.iter().map(|(b, s)| 100.0 * (b - s)).sum::<f64>() / 3.0;
    let detail = runs
        .iter()
        .map(|(b, s)| format!("{:.1}->{:.1}", 100.0 * b, 100.0 * s))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome {
        id: 12,
        gating: false,
        passed: loss <= 5.0,
        detail: format!("mean loss {loss:.2} mIoU points at 50% params ({detail})"),
    }
}

#[test]
fn acceptance() {
    let graphs = corpus(CORPUS_SIZE, CORPUS_SEED);
    let outcomes = [
        shrink_equivalence(&graphs),
        scatter_minimality(&graphs),
        gradient_suite(),
        counting_fixtures(),
        mac_convention(&graphs),
        energy_calibration(),
        schedules(),
        swd_annihilation(),
        collapse_guard(),
        budget_accuracy(),
        power_arithmetic(),
        qualitative_trend(),
    ];
    for o in &outcomes {
        let verdict = match (o.passed, o.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (informational)",
        };
        println!("criterion {:>2}: {verdict} - {}", o.id, o.detail);
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| o.gating && !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
