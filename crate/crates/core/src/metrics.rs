//! Calibration metrics over equal-width confidence bins.
//!
//! Bin `i` covers `[i/B, (i+1)/B)`; the last bin is closed at 1.0. A report
//! whose predictions all land in a single bin is flagged degenerate (single
//! bin collapse): its ECE and Brier values are still computed but should not
//! be compared against other runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no predictions")]
    EmptyInput,
    #[error("predictions and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("number of bins must be at least 1")]
    ZeroBins,
    #[error("prediction {0} is outside [0, 1]")]
    OutOfRange(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: usize,
    pub ece: f64,
    pub brier: f64,
    pub bin_coverage: usize,
    pub degenerate: bool,
    pub bins: Vec<ReliabilityBin>,
}

fn bin_edge(i: usize, bins: usize) -> f64 {
    i as f64 / bins as f64
}

/// Bin index of a prediction in `[0, 1]`, consistent with the `i / B` edges.
pub fn bin_index(p: f64, bins: usize) -> usize {
    let mut idx = ((p * bins as f64).floor() as usize).min(bins - 1);
    if idx + 1 < bins && p >= bin_edge(idx + 1, bins) {
        idx += 1;
    } else if idx > 0 && p < bin_edge(idx, bins) {
        idx -= 1;
    }
    idx
}

fn check(predictions: &[f64], labels: Option<&[bool]>, bins: usize) -> Result<(), MetricsError> {
    if bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(labels) = labels {
        if labels.len() != predictions.len() {
            return Err(MetricsError::LengthMismatch(predictions.len(), labels.len()));
        }
    }
    if let Some(&p) = predictions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(MetricsError::OutOfRange(p));
    }
    Ok(())
}

#[derive(Clone, Copy, Default)]
struct BinAccumulator {
    count: usize,
    confidence_sum: f64,
    correct: usize,
}

fn accumulate(predictions: &[f64], labels: &[bool], bins: usize) -> Vec<BinAccumulator> {
    let mut acc = vec![BinAccumulator::default(); bins];
    for (&p, &y) in predictions.iter().zip(labels) {
        let b = &mut acc[bin_index(p, bins)];
        b.count += 1;
        b.confidence_sum += p;
        b.correct += usize::from(y);
    }
    acc
}

fn ece_from(acc: &[BinAccumulator], n: usize) -> f64 {
    acc.iter()
        .filter(|b| b.count > 0)
        .map(|b| {
            let c = b.count as f64;
            (c / n as f64) * (b.correct as f64 / c - b.confidence_sum / c).abs()
        })
        .sum()
}

pub fn ece(predictions: &[f64], labels: &[bool], bins: usize) -> Result<f64, MetricsError> {
    check(predictions, Some(labels), bins)?;
    Ok(ece_from(&accumulate(predictions, labels, bins), predictions.len()))
}

pub fn brier(predictions: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check(predictions, Some(labels), 1)?;
    let sum: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - if y { 1.0 } else { 0.0 }).powi(2))
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Number of non-empty bins.
pub fn bin_coverage(predictions: &[f64], bins: usize) -> Result<usize, MetricsError> {
    check(predictions, None, bins)?;
    let mut seen = vec![false; bins];
    for &p in predictions {
        seen[bin_index(p, bins)] = true;
    }
    Ok(seen.into_iter().filter(|&s| s).count())
}

pub fn reliability_table(
    predictions: &[f64],
    labels: &[bool],
    bins: usize,
) -> Result<EvaluationReport, MetricsError> {
    check(predictions, Some(labels), bins)?;
    let n = predictions.len();
    let acc = accumulate(predictions, labels, bins);
    let bin_rows: Vec<ReliabilityBin> = acc
        .iter()
        .enumerate()
        .map(|(index, b)| {
            let (mean_confidence, accuracy) = if b.count > 0 {
                let c = b.count as f64;
                (b.confidence_sum / c, b.correct as f64 / c)
            } else {
                (0.0, 0.0)
            };
            ReliabilityBin {
                index,
                lower: bin_edge(index, bins),
                upper: bin_edge(index + 1, bins),
                count: b.count,
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    let bin_coverage = acc.iter().filter(|b| b.count > 0).count();
    Ok(EvaluationReport {
        n,
        ece: ece_from(&acc, n),
        brier: brier(predictions, labels)?,
        bin_coverage,
        degenerate: bin_coverage == 1,
        bins: bin_rows,
    })
}

impl EvaluationReport {
    /// Per-bin CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,lower,upper,count,mean_confidence,accuracy\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.index, b.lower, b.upper, b.count, b.mean_confidence, b.accuracy
            ));
        }
        out
    }
}
