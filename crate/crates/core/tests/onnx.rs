//! ONNX serialization: round trips, and cross-checks against the reference
//! `onnx` checker and onnxruntime when a Python installation provides them.

use std::path::Path;
use std::process::Command;

use netshrink::deps::build_dependency_partition;
use netshrink::exec::{execute, random_inputs, Value};
use netshrink::graph::OpKind;
use netshrink::hrnet::{build_hrnet_lite_with, HrnetLiteSpec};
use netshrink::graph::BnInit;
use netshrink::onnx::{decode_model, encode_model, load_model, save_model};
use netshrink::rawtensor;
use netshrink::shrink::shrink;
use netshrink::synth::{corpus, random_mask};
use netshrink::GraphModel;

/// Originals and their shrunk versions, so scatter chains are included.
fn models() -> Vec<GraphModel> {
    let mut out = Vec::new();
    for (i, (_, m)) in corpus(30, 11).into_iter().enumerate() {
        let p = build_dependency_partition(&m).unwrap();
        let s = shrink(&m, &p, &random_mask(&p, i as u64)).unwrap().model;
        out.push(m);
        out.push(s);
    }
    let hr = build_hrnet_lite_with(&HrnetLiteSpec { height: 16, width_px: 16, ..Default::default() }, BnInit::Random).unwrap();
    out.push(hr);
    out
}

#[test]
fn round_trip_is_structural_identity() {
    let ms = models();
    assert!(ms.iter().any(|m| m.count_kind(OpKind::ScatterND) > 0));
    for m in &ms {
        let bytes = encode_model(m).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert!(back.structurally_eq(m), "{}", m.name);
        for (k, v) in &m.initializers {
            assert!(back.initializers[k].bits_eq(v), "{k}");
        }
        // Byte-stable on a second pass.
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }
}

#[test]
fn save_and_load_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = &models()[1];
    let path = dir.path().join("m.onnx");
    save_model(m, &path).unwrap();
    assert!(load_model(&path).unwrap().structurally_eq(m));
    assert!(load_model(dir.path().join("missing.onnx")).is_err());
}

const CHECK_SCRIPT: &str = r#"
import struct, sys, pathlib
import numpy as np
import onnx, onnxruntime as ort

def read(p):
    b = pathlib.Path(p).read_bytes()
    assert b[:4] == b"NSRT"
    dtype = {1: np.float32, 7: np.int64}[b[5]]
    rank = struct.unpack_from("<I", b, 8)[0]
    dims = struct.unpack_from("<%dQ" % rank, b, 12)
    return np.frombuffer(b[12 + 8 * rank:], dtype=dtype).reshape(dims)

def write(p, a):
    code = 1 if a.dtype == np.float32 else 7
    head = b"NSRT" + bytes([1, code, 0, 0]) + struct.pack("<I", a.ndim) + struct.pack("<%dQ" % a.ndim, *a.shape)
    pathlib.Path(p).write_bytes(head + np.ascontiguousarray(a).tobytes())

root = pathlib.Path(sys.argv[1])
opts = ort.SessionOptions()
opts.graph_optimization_level = ort.GraphOptimizationLevel.ORT_DISABLE_ALL
for model in sorted(root.glob("*.onnx")):
    onnx.checker.check_model(onnx.load(str(model)), full_check=True)
    sess = ort.InferenceSession(str(model), opts, providers=["CPUExecutionProvider"])
    feeds = {i.name: read(root / (model.stem + ".in." + i.name)) for i in sess.get_inputs()}
    names = [o.name for o in sess.get_outputs()]
    for n, v in zip(names, sess.run(names, feeds)):
        write(root / (model.stem + ".out." + n), v)
print("checked", len(list(root.glob("*.onnx"))))
"#;

fn python_available() -> bool {
    Command::new("python3")
        .args(["-c", "import onnx, onnxruntime, numpy"])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-4 * (1.0 + y.abs()))
}

#[test]
fn external_checker_and_runtime_agree() {
    if !python_available() {
        println!("skipped: python3 with onnx and onnxruntime not found");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let ms = models();
    let mut expected = Vec::new();
    for (i, m) in ms.iter().enumerate() {
        let stem = format!("m{i:03}");
        save_model(m, dir.path().join(format!("{stem}.onnx"))).unwrap();
        let x = random_inputs(m, i as u64);
        for (name, t) in &x {
            let bytes = rawtensor::encode(&Value::F32(t.clone()));
            std::fs::write(dir.path().join(format!("{stem}.in.{name}")), bytes).unwrap();
        }
        expected.push((stem, execute(m, &x).unwrap().outputs));
    }
    let script = dir.path().join("check.py");
    std::fs::write(&script, CHECK_SCRIPT).unwrap();
    let out = Command::new("python3").arg(&script).arg(dir.path()).output().unwrap();
    assert!(
        out.status.success(),
        "checker failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for (stem, outputs) in expected {
        for (name, ours) in outputs {
            let theirs = rawtensor::decode(&std::fs::read(Path::new(dir.path()).join(format!("{stem}.out.{name}"))).unwrap()).unwrap();
            assert_eq!(ours.shape(), theirs.shape(), "{stem} {name}");
            match (&ours, &theirs) {
                (Value::F32(_), Value::F32(_)) => {
                    assert!(close(&ours.to_f64_vec(), &theirs.to_f64_vec()), "{stem} {name}")
                }
                (Value::I64(a), Value::I64(b)) => {
                    let agree = a.data().iter().zip(b.data()).filter(|(x, y)| x == y).count();
                    // Near-ties between logits may legitimately flip.
                    assert!(agree as f64 >= 0.99 * a.len() as f64, "{stem} {name}: {agree}/{}", a.len());
                }
                _ => panic!("{stem} {name}: dtype mismatch"),
            }
        }
    }
}
