#![no_main]

use libfuzzer_sys::fuzz_target;
use netshrink_train::OptimizerState;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(state) = OptimizerState::from_json(text) else { return };
    let _ = state.velocity();
});
