//! Competition metric: `0.5 · mean F1 + 0.5 · total accuracy`, where the F1
//! mean is unweighted over AUs and accuracy counts every binary decision of
//! the `n × 12` prediction matrix.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::AuLabels;
use crate::error::{Error, Result};
use crate::face::{DEFAULT_AU_NAMES, NUM_AUS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_au_f1: Vec<f64>,
    pub mean_f1: f64,
    pub total_accuracy: f64,
    pub competition_metric: f64,
}

pub fn competition_metric(mean_f1: f64, total_accuracy: f64) -> f64 {
    0.5 * mean_f1 + 0.5 * total_accuracy
}

impl EvalReport {
    pub fn from_parts(per_au_f1: Vec<f64>, total_accuracy: f64) -> Self {
        let mean_f1 = per_au_f1.iter().sum::<f64>() / per_au_f1.len() as f64;
        EvalReport {
            competition_metric: competition_metric(mean_f1, total_accuracy),
            per_au_f1,
            mean_f1,
            total_accuracy,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// F1 with the `0/0 := 0` convention.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

/// Binarizes at `decision_threshold` (`p >= t` counts as present) and scores.
pub fn evaluate(predictions: &[[f64; NUM_AUS]], labels: &[AuLabels], decision_threshold: f64) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::validation("cannot evaluate an empty prediction set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} prediction rows vs {} label rows",
            predictions.len(),
            labels.len()
        )));
    }
    if !(decision_threshold > 0.0 && decision_threshold < 1.0) {
        return Err(Error::domain(format!("decision threshold {decision_threshold} not in (0,1)")));
    }
    let mut tp = [0usize; NUM_AUS];
    let mut fp = [0usize; NUM_AUS];
    let mut fn_ = [0usize; NUM_AUS];
    let mut correct = 0usize;
    for (p, y) in predictions.iter().zip(labels) {
        for i in 0..NUM_AUS {
            let pred = p[i] >= decision_threshold;
            let truth = y[i] == 1;
            match (pred, truth) {
                (true, true) => tp[i] += 1,
                (true, false) => fp[i] += 1,
                (false, true) => fn_[i] += 1,
                (false, false) => {}
            }
            correct += (pred == truth) as usize;
        }
    }
    let per_au_f1 = (0..NUM_AUS).map(|i| f1_score(tp[i], fp[i], fn_[i])).collect();
    let acc = correct as f64 / (predictions.len() * NUM_AUS) as f64;
    Ok(EvalReport::from_parts(per_au_f1, acc))
}

fn header() -> String {
    DEFAULT_AU_NAMES.join(",")
}

/// Prediction matrix as CSV: a header of AU names, then `n` rows of 12
/// decimals printed at full round-trip precision.
pub fn write_predictions(path: &Path, preds: &[[f64; NUM_AUS]]) -> Result<()> {
    let mut s = header();
    s.push('\n');
    for row in preds {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &[AuLabels]) -> Result<()> {
    let mut s = header();
    s.push('\n');
    for row in labels {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if cells.len() != NUM_AUS {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("expected {NUM_AUS} columns, got {}", cells.len()),
            });
        }
        rows.push((n + 1, cells));
    }
    Ok(rows)
}

pub fn read_predictions(path: &Path) -> Result<Vec<[f64; NUM_AUS]>> {
    read_rows(path)?
        .into_iter()
        .map(|(line, cells)| {
            let mut row = [0.0; NUM_AUS];
            for (r, c) in row.iter_mut().zip(&cells) {
                *r = c.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("{c:?} is not a number"),
                })?;
                if !(0.0..=1.0).contains(r) {
                    return Err(Error::validation(format!("line {line}: probability {r} outside [0,1]")));
                }
            }
            Ok(row)
        })
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<AuLabels>> {
    read_rows(path)?
        .into_iter()
        .map(|(line, cells)| {
            let mut row = [0u8; NUM_AUS];
            for (r, c) in row.iter_mut().zip(&cells) {
                *r = match c.as_str() {
                    "0" => 0,
                    "1" => 1,
                    _ => return Err(Error::validation(format!("line {line}: label {c:?} outside {{0,1}}"))),
                };
            }
            Ok(row)
        })
        .collect()
}
