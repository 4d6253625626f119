#![no_main]

use libfuzzer_sys::fuzz_target;
use netshrink::energy::{fit_energy_model, parse_calibration_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(points) = parse_calibration_csv(text) else { return };
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.mac_fraction, p.energy_joules)).collect();
    let _ = fit_energy_model(&xy);
});
