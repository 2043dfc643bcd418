//! Segmentation scores of index fields against ground truth.

use serde::{Deserialize, Serialize};

use crate::container::sha256_hex;
use crate::error::{Error, Result};
use crate::grid::IndexField;

pub const THRESHOLD: f64 = 0.5;

fn check_pair(pred: &IndexField, truth: &IndexField) -> Result<()> {
    if pred.grid != truth.grid {
        return Err(Error::shape("prediction and truth live on different grids"));
    }
    Ok(())
}

/// `|P ∩ T| / |P ∪ T|` of the thresholded masks; 1 when both are empty.
pub fn iou(pred: &IndexField, truth: &IndexField, threshold: f64) -> Result<f64> {
    check_pair(pred, truth)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, t) in pred.mask(threshold).into_iter().zip(truth.mask(threshold)) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2|P ∩ T| / (|P| + |T|)`; 1 when both are empty.
pub fn dice(pred: &IndexField, truth: &IndexField, threshold: f64) -> Result<f64> {
    check_pair(pred, truth)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (p, t) in pred.mask(threshold).into_iter().zip(truth.mask(threshold)) {
        inter += (p && t) as usize;
        total += p as usize + t as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Fraction of nodes whose thresholded labels agree.
pub fn accuracy(pred: &IndexField, truth: &IndexField, threshold: f64) -> Result<f64> {
    check_pair(pred, truth)?;
    let hits = pred.mask(threshold).into_iter().zip(truth.mask(threshold)).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.values.len() as f64)
}

pub fn mse(pred: &IndexField, truth: &IndexField) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.values.iter().zip(&truth.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample: usize,
    pub iou: f64,
    pub dice: f64,
    pub accuracy: f64,
    pub mse: f64,
}

impl EvalRow {
    pub fn score(sample: usize, pred: &IndexField, truth: &IndexField) -> Result<Self> {
        Ok(Self {
            sample,
            iou: iou(pred, truth, THRESHOLD)?,
            dice: dice(pred, truth, THRESHOLD)?,
            accuracy: accuracy(pred, truth, THRESHOLD)?,
            mse: mse(pred, truth)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Population standard deviation.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub config_digest: String,
    pub iou: Summary,
    pub dice: Summary,
    pub accuracy: Summary,
    pub mse: Summary,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(label: &str, config_digest: &str, rows: Vec<EvalRow>) -> Self {
        Self {
            label: label.to_string(),
            config_digest: config_digest.to_string(),
            iou: Summary::of(rows.iter().map(|r| r.iou)),
            dice: Summary::of(rows.iter().map(|r| r.dice)),
            accuracy: Summary::of(rows.iter().map(|r| r.accuracy)),
            mse: Summary::of(rows.iter().map(|r| r.mse)),
            rows,
        }
    }

    pub fn evaluate(label: &str, config_digest: &str, pairs: &[(IndexField, IndexField)]) -> Result<Self> {
        let rows = pairs.iter().enumerate().map(|(k, (p, t))| EvalRow::score(k, p, t)).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_rows(label, config_digest, rows))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the serialized report; stable because every float is
    /// written with round-trip precision.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}
