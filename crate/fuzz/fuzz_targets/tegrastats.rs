#![no_main]

use libfuzzer_sys::fuzz_target;
use netshrink::power::{integrate_energy, parse_tegrastats, IntegrateOptions, DEFAULT_RAIL};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let Ok(trace) = parse_tegrastats(&text, DEFAULT_RAIL, 1.0) else { return };
    if let Ok(report) = integrate_energy(&trace, &IntegrateOptions::default()) {
        assert!(report.total_j >= 0.0 && report.total_j.is_finite());
        assert_eq!(report.samples, trace.samples.len());
    }
});
