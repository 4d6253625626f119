//! Regenerate the fuzz seed corpus: `cargo run --example fuzz_seeds -- fuzz/corpus`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use netshrink::deps::build_dependency_partition;
use netshrink::energy::{CALIBRATION_CSV, MIOU_CSV};
use netshrink::exec::Value;
use netshrink::graph::BnInit;
use netshrink::hrnet::{build_hrnet_lite_with, HrnetLiteSpec};
use netshrink::onnx::encode_model;
use netshrink::prune::{score_channels, select_mask, BudgetKind, MaskFile, PruneMask};
use netshrink::shrink::shrink;
use netshrink::synth::corpus;
use netshrink::{rawtensor, Tensor};
use netshrink_train::config::RunConfig;
use netshrink_train::OptimizerState;

fn put(root: &Path, target: &str, name: &str, bytes: impl AsRef<[u8]>) {
    let dir = root.join(target);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(name), bytes).unwrap();
}

fn main() {
    let root = std::env::args().nth(1).unwrap_or_else(|| "fuzz/corpus".into());
    let root = Path::new(&root);

    let spec = HrnetLiteSpec {
        width: 4,
        blocks: 1,
        height: 8,
        width_px: 8,
        ..Default::default()
    };
    let hrnet = build_hrnet_lite_with(&spec, BnInit::Random).unwrap();
    let p = build_dependency_partition(&hrnet).unwrap();
    put(root, "onnx_decode", "hrnet_lite", encode_model(&hrnet).unwrap());
    let mut mask = PruneMask::keep_all(&p);
    let g = p.adds[0].inputs.iter().find(|g| mask.kept.contains_key(*g)).cloned().unwrap();
    mask.kept.insert(g, vec![0, 2]);
    let scattered = shrink(&hrnet, &p, &mask).unwrap().model;
    put(root, "onnx_decode", "hrnet_lite_scatter", encode_model(&scattered).unwrap());
    for (i, (family, m)) in corpus(5, 1).into_iter().enumerate() {
        put(root, "onnx_decode", &format!("{family:?}_{i}").to_lowercase(), encode_model(&m).unwrap());
    }

    let scores = score_channels(&hrnet, &p).unwrap();
    for (name, target, kind) in [
        ("params_half", 0.5, BudgetKind::ParameterFraction),
        ("channels_tenth", 0.1, BudgetKind::ChannelFraction),
    ] {
        let sel = select_mask(&hrnet, &p, &scores, target, kind).unwrap();
        put(root, "mask_json", name, MaskFile::from_selection(&sel).to_json());
    }

    let line = "RAM 2107/31919MB (lfb 6757x4MB) CPU [2%@1190] EMC_FREQ 0% GR3D_FREQ 0% VDD_GPU_SOC 6149mW/6149mW VDD_CPU_CV 0mW/0mW\n";
    put(root, "tegrastats", "plain", line.repeat(4));
    put(
        root,
        "tegrastats",
        "timestamped",
        "10-15-2026 11:40:50 RAM 1/2MB VDD_GPU_SOC 2771.487mW/2771.487mW\n10-15-2026 11:40:51 RAM 1/2MB VDD_GPU_SOC 1000mW/1885mW\n",
    );

    put(root, "calibration_csv", "shipped", CALIBRATION_CSV);
    put(root, "calibration_csv", "minimal", "mac_fraction,energy_joules,series,resolution\n1.0,2.771487,swd,512x1024\n0.0858,0.552862,swd,512x1024\n");
    put(root, "calibration_csv", "miou_series", MIOU_CSV);

    let f = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap();
    put(root, "raw_tensor", "f32", rawtensor::encode(&Value::F32(f)));
    let idx = Tensor::from_vec(&[3, 1], vec![0i64, 2, 5]).unwrap();
    put(root, "raw_tensor", "i64_index", rawtensor::encode(&Value::I64(idx)));

    put(root, "train_config", "empty", "{}");
    put(root, "train_config", "small", RunConfig::small().to_json());
    let mut swd = RunConfig::small();
    swd.regularizer = netshrink_train::config::RegularizerKind::Swd;
    swd.pipeline = true;
    put(root, "train_config", "swd_pipeline", swd.to_json());

    let vel: BTreeMap<String, Tensor<f64>> = [("conv.w".to_string(), Tensor::from_vec(&[2, 1], vec![0.25, -1.5]).unwrap())].into();
    let state = OptimizerState::new(&vel, 2, 16);
    put(root, "optimizer_state", "small", serde_json::to_string_pretty(&state).unwrap());
}
