#![no_main]

use libfuzzer_sys::fuzz_target;
use netshrink::rawtensor::{decode, encode};

fuzz_target!(|data: &[u8]| {
    let Ok(value) = decode(data) else { return };
    let bytes = encode(&value);
    let again = decode(&bytes).expect("re-encoded tensor decodes");
    assert_eq!(again.shape(), value.shape());
    assert_eq!(encode(&again), bytes);
});
