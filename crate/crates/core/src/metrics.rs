//! Segmentation metrics.

use serde::Serialize;

use crate::error::{Error, Result};

/// `K×K` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    /// Tally one batch. Pixels whose label equals `ignore` are skipped.
    pub fn update(&mut self, predictions: &[i64], labels: &[i64], ignore: Option<i64>) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let k = self.n_classes as i64;
        for (&p, &l) in predictions.iter().zip(labels) {
            if Some(l) == ignore {
                continue;
            }
            if !(0..k).contains(&l) || !(0..k).contains(&p) {
                return Err(Error::InvalidArgument(format!("class out of range: label {l}, prediction {p}")));
            }
            self.counts[l as usize * self.n_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` for classes absent from both truth and
    /// predictions.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.n_classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.n_classes).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over present classes.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::InvalidArgument("empty evaluation set".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Per-class IoU and their mean over classes present in truth or prediction.
pub fn miou(predictions: &[i64], labels: &[i64], n_classes: usize, ignore: Option<i64>) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.update(predictions, labels, ignore)?;
    let m = cm.miou()?;
    Ok((cm.iou(), m))
}
