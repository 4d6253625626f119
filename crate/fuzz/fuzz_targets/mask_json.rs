#![no_main]

use libfuzzer_sys::fuzz_target;
use netshrink::prune::MaskFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(mask) = MaskFile::from_json(text) else { return };
    let back = MaskFile::from_json(&mask.to_json()).expect("mask round-trips");
    assert_eq!(back, mask);
});
