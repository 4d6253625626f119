//! End-to-end runs of the `netshrink` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn netshrink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netshrink"))
        .args(args)
        .env_remove("NETSHRINK_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json_stdout(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn json_file(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 16×16 HRNet-lite with random BatchNorm, so channel scores differ.
fn toy_model(dir: &Path) -> PathBuf {
    let out = dir.join("toy");
    ok(netshrink(&["build", "--out", s(&out), "--height", "16", "--width-px", "16", "--random-bn", "--seed", "3"]));
    out.join("model.onnx")
}

fn small_config(dir: &Path, train: &str) -> PathBuf {
    let path = dir.join("run.json");
    let text = format!(
        r#"{{"train": {train}, "dataset": {{"height": 16, "width": 16, "train_samples": 8, "val_samples": 4}},
            "model": {{"height": 16, "width_px": 16}}}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn default_toy_config_trains() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(netshrink(&["train", "--out", s(&out), "--epochs", "1"]));
    for f in ["model.onnx", "history.jsonl", "optimizer.json", "config.json", "train.manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let m = json_file(out.join("train.manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["config"]["dataset"]["height"], 64);
    assert!(m["outputs"].as_array().unwrap().len() >= 4);
    assert!(m["tool_version"].is_string() && m["wall_time_s"].as_f64().unwrap() >= 0.0);
    let history = fs::read_to_string(out.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);
    assert!(!history.contains("a_t"));
}

#[test]
fn negative_learning_rate_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#"{"base_lr": -0.01}"#);
    let o = netshrink(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.base_lr"));
    let o = netshrink(&["train", "--config", s(&dir.path().join("missing.json")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 4);
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let o = netshrink(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn swd_history_has_coefficient_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#"{"epochs": 2}"#);
    let out = dir.path().join("run");
    ok(netshrink(&["train", "--config", s(&cfg), "--out", s(&out), "--regularizer", "swd", "--final-rate", "0.5"]));
    let history = fs::read_to_string(out.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    for line in history.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["a_t"].as_f64().unwrap() >= 0.1);
    }
}

#[test]
fn pipeline_writes_pruned_model_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#"{"epochs": 1}"#);
    let out = dir.path().join("run");
    ok(netshrink(&[
        "train", "--config", s(&cfg), "--out", s(&out), "--regularizer", "swd", "--final-rate", "0.5", "--pipeline",
    ]));
    let report = json_file(out.join("report.json"));
    assert_eq!(report["method"], "swd");
    assert!(report["params_after"].as_u64().unwrap() < report["params_before"].as_u64().unwrap());
    assert!(out.join("mask.json").is_file() && out.join("retrain_history.jsonl").is_file());
}

#[test]
fn zero_target_is_identity_without_scatter() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let out = dir.path().join("p0");
    ok(netshrink(&["prune", "--model", s(&model), "--target", "0", "--out", s(&out)]));
    let report = json_file(out.join("report.json"));
    assert_eq!(report["shrink"]["scatter_nodes"], 0);
    assert_eq!(report["params_after"], report["params_before"]);
    let a = netshrink::onnx::load_model(&model).unwrap();
    let b = netshrink::onnx::load_model(out.join("shrunk.onnx")).unwrap();
    assert!(a.structurally_eq(&b));
}

#[test]
fn half_parameter_budget_is_met_by_recount() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let out = dir.path().join("p50");
    let o = netshrink(&["prune", "--model", s(&model), "--target", "0.5", "--budget", "params", "--out", s(&out)]);
    let report = json_file(out.join("report.json"));
    let before = netshrink::cost::count_params(&netshrink::onnx::load_model(&model).unwrap()).headline;
    let after = netshrink::cost::count_params(&netshrink::onnx::load_model(out.join("shrunk.onnx")).unwrap()).headline;
    let removed = 1.0 - after as f64 / before as f64;
    assert!((removed - report["achieved_fraction"].as_f64().unwrap()).abs() < 1e-12);
    if (removed - 0.5).abs() <= 0.005 {
        assert_eq!(code(&o), 0);
        assert_eq!(report["achievable"], true);
    } else {
        assert_eq!(code(&o), 3);
    }
    assert!(report["equivalence"]["passed"].as_bool().unwrap());
}

#[test]
fn unachievable_budget_exits_3_with_nearest() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let out = dir.path().join("p995");
    let o = netshrink(&["prune", "--model", s(&model), "--target", "0.995", "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nearest achievable"));
    let report = json_file(out.join("report.json"));
    assert_eq!(report["achievable"], false);
    assert!(report["achieved_fraction"].as_f64().unwrap() < 0.99);
    assert!(out.join("shrunk.onnx").is_file() && out.join("prune.manifest.json").is_file());
}

#[test]
fn extreme_channel_target_keeps_min_channels_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let out = dir.path().join("p99");
    // Min-keep caps the removable fraction, so this is also an unachievable budget.
    let o = netshrink(&["prune", "--model", s(&model), "--target", "0.99", "--budget", "channels", "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    let mask = json_file(out.join("mask.json"));
    assert!(mask["groups"].as_object().unwrap().values().all(|k| !k.as_array().unwrap().is_empty()));
    let shrunk = netshrink::onnx::load_model(out.join("shrunk.onnx")).unwrap();
    netshrink::exec::execute(&shrunk, &netshrink::exec::random_inputs(&shrunk, 0)).unwrap();
}

#[test]
fn mask_only_keeps_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let out = dir.path().join("mask");
    ok(netshrink(&["prune", "--model", s(&model), "--target", "0.3", "--budget", "channels", "--method", "mask-only", "--out", s(&out)]));
    let a = netshrink::onnx::load_model(&model).unwrap();
    let b = netshrink::onnx::load_model(out.join("masked.onnx")).unwrap();
    assert_eq!(a.nodes.len(), b.nodes.len());
    assert!(a.initializers.iter().zip(&b.initializers).all(|(x, y)| x.1.shape() == y.1.shape()));
    assert!(!out.join("shrunk.onnx").exists());
}

#[test]
fn verify_passes_matching_triple_and_fails_corrupted() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let out = dir.path().join("p");
    ok(netshrink(&["prune", "--model", s(&model), "--target", "0.4", "--budget", "channels", "--out", s(&out)]));
    let (mask, shrunk) = (out.join("mask.json"), out.join("shrunk.onnx"));
    let args = |shrunk: &Path| {
        vec!["verify", "--original", s(&model), "--mask", s(&mask), "--shrunk", s(shrunk)]
            .into_iter()
            .map(str::to_string)
            .collect::<Vec<_>>()
    };
    let run = |shrunk: &Path| {
        let a = args(shrunk);
        netshrink(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let good = ok(run(&shrunk));
    let report = json_stdout(&good);
    assert_eq!(report["passed"], true);
    assert_eq!(report["n_inputs"], 100);

    // Truncated file.
    let bytes = fs::read(&shrunk).unwrap();
    let truncated = dir.path().join("truncated.onnx");
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&run(&truncated)), 1);

    // Valid file with one weight flipped.
    let mut m = netshrink::onnx::load_model(&shrunk).unwrap();
    let conv = m.nodes.iter().find(|n| n.kind() == netshrink::OpKind::Conv).unwrap().inputs[1].clone();
    m.float_param_mut(&conv).unwrap().data_mut()[0] += 1.0;
    let tampered = dir.path().join("tampered.onnx");
    netshrink::onnx::save_model(&m, &tampered).unwrap();
    let o = run(&tampered);
    assert_eq!(code(&o), 1);
    assert_eq!(json_stdout(&o)["passed"], false);
}

#[test]
fn cost_matches_library_and_reports_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let out = dir.path().join("p");
    ok(netshrink(&["prune", "--model", s(&model), "--target", "0.5", "--budget", "channels", "--out", s(&out)]));
    let m = netshrink::onnx::load_model(&model).unwrap();
    let plain = json_stdout(&ok(netshrink(&["cost", "--model", s(&model)])));
    assert_eq!(plain["params"], netshrink::cost::count_params(&m).headline);
    assert_eq!(plain["macs"], netshrink::cost::count_macs(&m).unwrap().total);
    assert!(plain.get("mac_fraction").is_none());
    let big = json_stdout(&ok(netshrink(&["cost", "--model", s(&model), "--input-shape", "1,3,64,128"])));
    assert_eq!(big["macs"].as_u64().unwrap(), 32 * plain["macs"].as_u64().unwrap());
    let shrunk = out.join("shrunk.onnx");
    let rel = json_stdout(&ok(netshrink(&["cost", "--model", s(&shrunk), "--baseline", s(&model)])));
    assert!(rel["mac_fraction"].as_f64().unwrap() < 1.0);
    assert!(rel["param_fraction"].as_f64().unwrap() < 1.0);
}

#[test]
fn energy_calibrates_and_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let cal = ok(netshrink(&["energy", "--calibrate", "--holdout", "slimming", "--out", s(dir.path())]));
    let v = json_stdout(&cal);
    assert!(v["model"]["r_squared"].as_f64().unwrap() >= 0.95);
    assert!(v["holdout"]["mean_abs_rel_error"].as_f64().unwrap() <= 0.15);
    assert!(String::from_utf8_lossy(&cal.stderr).contains("alpha"));

    let model = toy_model(dir.path());
    let out = dir.path().join("p");
    ok(netshrink(&["prune", "--model", s(&model), "--target", "0.5", "--budget", "channels", "--out", s(&out)]));
    let est = json_stdout(&ok(netshrink(&[
        "energy",
        "--estimate",
        s(&out.join("shrunk.onnx")),
        "--baseline",
        s(&model),
        "--model-file",
        s(&dir.path().join("energy_model.json")),
    ])));
    let j = est["energy_joules"].as_f64().unwrap();
    assert!(j.is_finite() && j > 0.0);
    assert_eq!(est["calibration"]["series"], "swd");
    let o = netshrink(&["energy", "--estimate", s(&model)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn power_integrates_constant_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("tegrastats.log");
    fs::write(&log, "RAM 1/2MB VDD_GPU_SOC 1000mW/1000mW\n".repeat(10)).unwrap();
    let out = dir.path().join("power");
    let v = json_stdout(&ok(netshrink(&["power", "--log", s(&log), "--inferences", "4", "--out", s(&out)])));
    assert_eq!(v["total_j"], 10.0);
    assert_eq!(v["per_inference_j"], 2.5);
    assert_eq!(v["rail"], "VDD_GPU_SOC");
    assert!(out.join("power.json").is_file() && out.join("power.manifest.json").is_file());
    fs::write(&log, "nothing here\n").unwrap();
    assert_eq!(code(&netshrink(&["power", "--log", s(&log)])), 2);
}

#[test]
fn dump_shows_scatter_and_index_shape() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let m = netshrink::onnx::load_model(&model).unwrap();
    let p = netshrink::deps::build_dependency_partition(&m).unwrap();
    // Keep three channels on one input of the first residual Add.
    let mut mask = netshrink::prune::PruneMask::keep_all(&p);
    let g = p.adds[0].inputs.iter().find(|g| mask.kept.contains_key(*g)).cloned().unwrap();
    mask.kept.insert(g, vec![0, 2, 4]);
    let shrunk = netshrink::shrink::shrink(&m, &p, &mask).unwrap().model;
    let path = dir.path().join("shrunk.onnx");
    netshrink::onnx::save_model(&shrunk, &path).unwrap();

    let v = json_stdout(&ok(netshrink(&["dump", "--model", s(&path), "--partition"])));
    assert_eq!(v["format_version"], 1);
    let nodes = v["nodes"].as_array().unwrap();
    let scatter = nodes.iter().find(|n| n["op"] == "ScatterND").expect("ScatterND node");
    let idx = scatter["inputs"][1].as_str().unwrap();
    let param = v["parameters"].as_array().unwrap().iter().find(|p| p["name"] == idx).unwrap();
    assert_eq!(param["shape"], serde_json::json!([3, 1]));
    assert_eq!(param["dtype"], "int64");
    assert!(param.get("values").is_none());
}

#[test]
fn reruns_with_same_seed_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        Command::new(env!("CARGO_BIN_EXE_netshrink"))
            .args(["prune", "--model", s(&model), "--target", "0.3", "--budget", "channels", "--out", s(&out)])
            .env("NETSHRINK_SEED", seed)
            .output()
            .unwrap();
        out
    };
    let (a, b, c) = (run("a", "5"), run("b", "5"), run("c", "6"));
    for f in ["mask.json", "shrunk.onnx"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    let manifest = |dir: &Path| {
        let mut m = json_file(dir.join("prune.manifest.json"));
        m["config"].as_object_mut().unwrap().remove("out");
        m
    };
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["seed"], 5);
    for key in ["command", "config", "seed", "tool_version"] {
        assert_eq!(ma[key], mb[key], "{key}");
    }
    assert_eq!(json_file(c.join("prune.manifest.json"))["seed"], 6);

    let build = |name: &str| {
        let out = dir.path().join(name);
        ok(netshrink(&["build", "--out", s(&out), "--height", "16", "--width-px", "16", "--random-bn", "--seed", "9"]));
        fs::read(out.join("model.onnx")).unwrap()
    };
    assert_eq!(build("m1"), build("m2"));
}

#[test]
fn missing_model_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = netshrink(&["cost", "--model", s(&dir.path().join("nope.onnx"))]);
    assert_eq!(code(&o), 4);
    let o = netshrink(&["prune", "--model", "x.onnx"]);
    assert_eq!(code(&o), 2, "usage errors share the config exit code");
}
