#![no_main]

use libfuzzer_sys::fuzz_target;
use netshrink::onnx::{decode_model, encode_model};

fuzz_target!(|data: &[u8]| {
    let Ok(model) = decode_model(data) else { return };
    let bytes = encode_model(&model).expect("decoded model re-encodes");
    let again = decode_model(&bytes).expect("re-encoded model decodes");
    assert!(again.structurally_eq(&model));
    let _ = netshrink::deps::build_dependency_partition(&model);
    let _ = netshrink::cost::count_macs(&model);
});
