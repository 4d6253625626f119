#![no_main]

use libfuzzer_sys::fuzz_target;
use netshrink_train::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(config) = RunConfig::from_json(text) else { return };
    let back = RunConfig::from_json(&config.to_json()).expect("valid config round-trips");
    assert_eq!(back, config);
});
