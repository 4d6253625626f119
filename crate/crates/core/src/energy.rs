//! Affine energy model over the fraction of baseline convolution MACs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measured energy of pruned networks, one row per point.
pub const CALIBRATION_CSV: &str = include_str!("../data/calibration.csv");
/// Accuracy of the same pruned networks.
pub const MIOU_CSV: &str = include_str!("../data/miou_series.csv");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub mac_fraction: f64,
    pub energy_joules: f64,
    pub series: String,
    pub resolution: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    /// Joules per unit of MAC fraction.
    pub slope: f64,
    /// Joules at zero MACs.
    pub intercept: f64,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
    pub n_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<String>,
}

/// Ordinary least-squares line through `(mac_fraction, joules)` points.
pub fn fit_energy_model(points: &[(f64, f64)]) -> Result<EnergyModel> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("need at least two calibration points".into()));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidArgument("calibration points must be finite".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("calibration x values are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = points.iter().map(|p| p.1 - (slope * p.0 + intercept)).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(EnergyModel {
        slope,
        intercept,
        r_squared,
        residuals,
        n_points: points.len(),
        series: None,
        resolution: None,
    })
}

impl EnergyModel {
    pub fn predict(&self, mac_fraction: f64) -> f64 {
        self.slope * mac_fraction + self.intercept
    }

    /// Fit on one shipped `(series, resolution)` slice.
    pub fn calibrate(points: &[CalibrationPoint], series: &str, resolution: &str) -> Result<Self> {
        let sel = select_series(points, series, resolution);
        let mut m = fit_energy_model(&sel)?;
        m.series = Some(series.to_string());
        m.resolution = Some(resolution.to_string());
        Ok(m)
    }
}

/// `(mac_fraction, joules)` of one series at one resolution.
pub fn select_series(points: &[CalibrationPoint], series: &str, resolution: &str) -> Vec<(f64, f64)> {
    points
        .iter()
        .filter(|p| p.series == series && p.resolution == resolution)
        .map(|p| (p.mac_fraction, p.energy_joules))
        .collect()
}

/// Predicted joules for a model with `macs` against a baseline of
/// `baseline_macs`.
pub fn estimate_energy(macs: u64, baseline_macs: u64, model: &EnergyModel) -> Result<f64> {
    if baseline_macs == 0 {
        return Err(Error::InvalidArgument("baseline MAC count must be positive".into()));
    }
    Ok(model.predict(macs as f64 / baseline_macs as f64))
}

/// Mean of `|pred − y| / |y|` over the points.
pub fn mean_abs_rel_error(model: &EnergyModel, points: &[(f64, f64)]) -> f64 {
    points.iter().map(|&(x, y)| (model.predict(x) - y).abs() / y.abs()).sum::<f64>() / points.len() as f64
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

/// Parse `mac_fraction,energy_joules,series,resolution` rows; lines starting
/// with `#` are comments.
pub fn parse_calibration_csv(text: &str) -> Result<Vec<CalibrationPoint>> {
    let mut rdr = csv_reader(text);
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let expected = ["mac_fraction", "energy_joules", "series", "resolution"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse(format!("expected header {}", expected.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<CalibrationPoint>().enumerate() {
        let p = row.map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))?;
        if !p.mac_fraction.is_finite() || !p.energy_joules.is_finite() || p.energy_joules < 0.0 {
            return Err(Error::Parse(format!("row {}: values must be finite and energy non-negative", i + 1)));
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err(Error::Parse("calibration file has no rows".into()));
    }
    Ok(out)
}

pub fn shipped_calibration() -> Vec<CalibrationPoint> {
    parse_calibration_csv(CALIBRATION_CSV).expect("shipped calibration parses")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouPoint {
    pub pruned_params_pct: f64,
    pub pruned_ops_pct: f64,
    pub miou: f64,
    pub series: String,
}

pub fn shipped_miou_series() -> Vec<MiouPoint> {
    csv_reader(MIOU_CSV)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .expect("shipped mIoU series parses")
}
