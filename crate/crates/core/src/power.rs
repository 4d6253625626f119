//! tegrastats log parsing and power integration.

use chrono::NaiveDateTime;
use regex::Regex;
use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_RAIL: &str = "VDD_GPU_SOC";
pub const DEFAULT_PERIOD_S: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerSample {
    pub t: f64,
    pub mw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerTrace {
    pub rail: String,
    pub period_s: f64,
    pub samples: Vec<PowerSample>,
    /// Lines that did not carry the rail.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub total_j: f64,
    pub per_inference_j: Option<f64>,
    pub samples: usize,
    pub rail: String,
}

#[derive(Clone, Debug, Default)]
pub struct IntegrateOptions {
    /// Inclusive `[t0, t1]` in trace seconds.
    pub window: Option<(f64, f64)>,
    pub n_inferences: Option<u64>,
    /// Subtracted from every sample (clamped at zero). Off by default.
    pub idle_mw: Option<f64>,
}

const TIMESTAMP_FORMAT: &str = "%m-%d-%Y %H:%M:%S";

/// Extract the instantaneous reading of `rail` from each line of the form
/// `... <RAIL> <inst>mW/<avg>mW ...`. Readings may carry up to three
/// decimals (whole microwatts). Lines starting with an
/// `MM-DD-YYYY HH:MM:SS` stamp get real timestamps, otherwise samples are
/// spaced `period_s` apart. Timestamps must be all present or all absent.
pub fn parse_tegrastats(text: &str, rail: &str, period_s: f64) -> Result<PowerTrace> {
    if !(period_s > 0.0 && period_s.is_finite()) {
        return Err(Error::InvalidArgument(format!("sampling period must be positive, got {period_s}")));
    }
    let re = Regex::new(&format!(r"(?:^|\s){}\s+(\d+(?:\.\d+)?)(?:mW)?/(\d+(?:\.\d+)?)(?:mW)?", regex::escape(rail)))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let stamp = Regex::new(r"^\s*(\d{2}-\d{2}-\d{4} \d{2}:\d{2}:\d{2})").expect("static regex");
    let mut samples = Vec::new();
    let mut skipped = 0;
    let mut stamped = None;
    let mut t0 = None;
    for line in text.lines() {
        let Some(c) = re.captures(line) else {
            skipped += 1;
            continue;
        };
        let mw = parse_milliwatts(&c[1])?;
        let ts = match stamp.captures(line) {
            Some(s) => Some(
                NaiveDateTime::parse_from_str(&s[1], TIMESTAMP_FORMAT)
                    .map_err(|e| Error::Parse(format!("bad timestamp `{}`: {e}", &s[1])))?,
            ),
            None => None,
        };
        match stamped {
            None => stamped = Some(ts.is_some()),
            Some(s) if s != ts.is_some() => {
                return Err(Error::Parse("log mixes timestamped and untimestamped lines".into()));
            }
            _ => {}
        }
        let t = match ts {
            Some(ts) => {
                let base = *t0.get_or_insert(ts);
                (ts - base).num_milliseconds() as f64 / 1000.0
            }
            None => samples.len() as f64 * period_s,
        };
        if let Some(prev) = samples.last().map(|s: &PowerSample| s.t) {
            if t <= prev {
                return Err(Error::Parse(format!("timestamps not strictly increasing at t={t}")));
            }
        }
        samples.push(PowerSample { t, mw });
    }
    if samples.is_empty() {
        return Err(Error::Parse(format!("0 lines matched rail `{rail}` ({skipped} lines skipped)")));
    }
    Ok(PowerTrace {
        rail: rail.to_string(),
        period_s,
        samples,
        skipped,
    })
}

fn parse_milliwatts(text: &str) -> Result<f64> {
    let bad = || Error::Parse(format!("power reading `{text}` is not a whole number of microwatts"));
    let (int, frac) = text.split_once('.').unwrap_or((text, ""));
    if frac.len() > 3 {
        return Err(bad());
    }
    let uw = format!("{int}{frac:0<3}").parse::<u64>().map_err(|_| bad())?;
    if uw > 1 << 53 {
        return Err(bad());
    }
    Ok(uw as f64 / 1000.0)
}

fn microwatts(mw: f64) -> u128 {
    (mw * 1000.0).round().max(0.0) as u128
}

/// Rectangle rule: each sample in the window contributes `mW · period`.
/// Power is summed exactly in whole microwatts, so repeated readings do not
/// accumulate rounding error.
pub fn integrate_energy(trace: &PowerTrace, opts: &IntegrateOptions) -> Result<EnergyReport> {
    if trace.samples.is_empty() {
        return Err(Error::InvalidArgument("empty power trace".into()));
    }
    if trace.samples.iter().any(|s| !(s.mw >= 0.0 && s.mw.is_finite())) {
        return Err(Error::InvalidArgument("power samples must be finite and non-negative".into()));
    }
    let in_window = |t: f64| opts.window.is_none_or(|(a, b)| t >= a && t <= b);
    let idle = microwatts(opts.idle_mw.unwrap_or(0.0));
    let mut n = 0;
    let mut uw_sum: u128 = 0;
    for s in trace.samples.iter().filter(|s| in_window(s.t)) {
        uw_sum += microwatts(s.mw).saturating_sub(idle);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("integration window contains no samples".into()));
    }
    let uw_s = uw_sum as f64 * trace.period_s;
    let total_j = uw_s / 1e6;
    let per_inference_j = match opts.n_inferences {
        Some(0) => return Err(Error::InvalidArgument("n_inferences must be positive".into())),
        Some(k) => Some(uw_s / (1e6 * k as f64)),
        None => None,
    };
    Ok(EnergyReport {
        total_j,
        per_inference_j,
        samples: n,
        rail: trace.rail.clone(),
    })
}
