//! Sequence-level and fine-grained confidence scores over token probabilities.
//!
//! Five scores are provided:
//!
//! | kind      | definition                                                      |
//! |-----------|-----------------------------------------------------------------|
//! | `sl_norm` | geometric mean of the token probabilities                       |
//! | `avg`     | arithmetic mean                                                 |
//! | `min`     | smallest token probability                                      |
//! | `low_k`   | mean of the `K` smallest probabilities, `K` chosen by Kneedle    |
//! | `attn_w`  | mean probability of the `K` tokens with the largest rollout-weighted uncertainty |
//!
//! For the two knee-based scores `K` is the 1-based knee count, and any
//! sequence of at most two tokens uses `K = 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kneedle::{kneedle_concave_increasing, kneedle_convex_decreasing};
use crate::trace::GenerationTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfidenceError {
    #[error("token probability sequence is empty")]
    EmptySequence,
    #[error("attention is required for attn_w but is not available")]
    MissingAttention,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown score kind {0:?}")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    SlNorm,
    Avg,
    Min,
    LowK,
    AttnW,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 5] = [
        ScoreKind::SlNorm,
        ScoreKind::Avg,
        ScoreKind::Min,
        ScoreKind::LowK,
        ScoreKind::AttnW,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::SlNorm => "sl_norm",
            ScoreKind::Avg => "avg",
            ScoreKind::Min => "min",
            ScoreKind::LowK => "low_k",
            ScoreKind::AttnW => "attn_w",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = ConfidenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ConfidenceError::UnknownKind(s.to_string()))
    }
}

/// A raw (or calibrated) confidence score attached to a trace id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub kind: ScoreKind,
    pub score: f64,
}

fn non_empty(probs: &[f64]) -> Result<(), ConfidenceError> {
    if probs.is_empty() {
        Err(ConfidenceError::EmptySequence)
    } else {
        Ok(())
    }
}

/// Length-normalized sequence likelihood, computed in log space. Any zero
/// probability yields exactly 0.
pub fn score_sl_norm(probs: &[f64]) -> Result<f64, ConfidenceError> {
    non_empty(probs)?;
    if probs.iter().any(|&p| p == 0.0) {
        return Ok(0.0);
    }
    let mean_log = probs.iter().map(|p| p.ln()).sum::<f64>() / probs.len() as f64;
    // geometric mean lies between the minimum and the arithmetic mean
    Ok(mean_log.exp().clamp(minimum(probs), arithmetic_mean(probs)))
}

pub fn score_avg(probs: &[f64]) -> Result<f64, ConfidenceError> {
    non_empty(probs)?;
    Ok(arithmetic_mean(probs))
}

pub fn score_min(probs: &[f64]) -> Result<f64, ConfidenceError> {
    non_empty(probs)?;
    Ok(minimum(probs))
}

fn minimum(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Mean clamped to the value range, which summation rounding can leave.
fn arithmetic_mean(probs: &[f64]) -> f64 {
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mean(probs).clamp(minimum(probs), max)
}

fn sorted_ascending(probs: &[f64]) -> Vec<f64> {
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
}

/// Knee count on the ascending probability curve.
pub fn low_k_count(probs: &[f64]) -> usize {
    kneedle_concave_increasing(&sorted_ascending(probs)).k
}

/// Lowest-K token probability with a Kneedle-selected `K`.
pub fn score_low_k(probs: &[f64]) -> Result<f64, ConfidenceError> {
    non_empty(probs)?;
    let sorted = sorted_ascending(probs);
    let k = kneedle_concave_increasing(&sorted).k;
    Ok(mean(&sorted[..k]).clamp(sorted[0], arithmetic_mean(probs)))
}

/// Lowest-K token probability with a caller-chosen `K` (clamped to `1..=T`).
pub fn score_low_k_with_k(probs: &[f64], k: usize) -> Result<f64, ConfidenceError> {
    non_empty(probs)?;
    let sorted = sorted_ascending(probs);
    let k = k.clamp(1, sorted.len());
    if k == sorted.len() {
        return Ok(arithmetic_mean(probs));
    }
    Ok(mean(&sorted[..k]).clamp(sorted[0], arithmetic_mean(probs)))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Dense row-major square matrix used for rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ConfidenceError> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(ConfidenceError::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &SquareMatrix) -> SquareMatrix {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * n..(k + 1) * n];
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        SquareMatrix { n, data: out }
    }
}

/// Row-normalized `0.5 * A + 0.5 * I`.
fn residual_mix(layer: &[Vec<f64>], t: usize) -> Result<SquareMatrix, ConfidenceError> {
    if layer.len() != t {
        return Err(ConfidenceError::DimensionMismatch(format!(
            "layer has {} rows, expected {t}",
            layer.len()
        )));
    }
    let mut m = SquareMatrix::from_rows(layer)?;
    for i in 0..t {
        let row = &mut m.data[i * t..(i + 1) * t];
        for (j, v) in row.iter_mut().enumerate() {
            *v = 0.5 * *v + if i == j { 0.5 } else { 0.0 };
        }
        let sum: f64 = row.iter().sum();
        if sum > 0.0 && sum != 1.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Ok(m)
}

/// Attention rollout `Ã_L · … · Ã_1` over a stack of `T x T` layers.
pub fn rollout(attention: &[Vec<Vec<f64>>]) -> Result<SquareMatrix, ConfidenceError> {
    let first = attention
        .first()
        .ok_or_else(|| ConfidenceError::DimensionMismatch("attention has no layers".into()))?;
    let t = first.len();
    let mut acc = residual_mix(first, t)?;
    for layer in &attention[1..] {
        acc = residual_mix(layer, t)?.matmul(&acc);
    }
    Ok(acc)
}

/// `w_t = 1 + Σ_{j ≥ t} Ã[j][t]`: rollout attention received from the token
/// itself and every later position.
pub fn attention_weights(rollout: &SquareMatrix) -> Vec<f64> {
    let n = rollout.size();
    (0..n)
        .map(|t| 1.0 + (t..n).map(|j| rollout.get(j, t)).sum::<f64>())
        .collect()
}

/// Positions selected by the attention-weighted uncertainty ranking, in
/// ranking order (largest weighted uncertainty first).
pub fn attn_w_selection(probs: &[f64], weights: &[f64]) -> Result<Vec<usize>, ConfidenceError> {
    non_empty(probs)?;
    if weights.len() != probs.len() {
        return Err(ConfidenceError::DimensionMismatch(format!(
            "{} weights for {} tokens",
            weights.len(),
            probs.len()
        )));
    }
    let uncertainty: Vec<f64> = probs
        .iter()
        .zip(weights)
        .map(|(p, w)| w * (1.0 - p))
        .collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable: equal uncertainties keep ascending token order
    order.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]));
    let ranked: Vec<f64> = order.iter().map(|&i| uncertainty[i]).collect();
    let k = kneedle_convex_decreasing(&ranked).k;
    order.truncate(k);
    Ok(order)
}

pub fn score_attn_w(probs: &[f64], weights: &[f64]) -> Result<f64, ConfidenceError> {
    let selected = attn_w_selection(probs, weights)?;
    Ok(selected.iter().map(|&i| probs[i]).sum::<f64>() / selected.len() as f64)
}

/// Computes one score kind for a trace.
pub fn score_trace(trace: &GenerationTrace, kind: ScoreKind) -> Result<f64, ConfidenceError> {
    let probs = &trace.token_probs;
    match kind {
        ScoreKind::SlNorm => score_sl_norm(probs),
        ScoreKind::Avg => score_avg(probs),
        ScoreKind::Min => score_min(probs),
        ScoreKind::LowK => score_low_k(probs),
        ScoreKind::AttnW => {
            let attention = trace
                .attention
                .as_ref()
                .ok_or(ConfidenceError::MissingAttention)?;
            let weights = attention_weights(&rollout(attention)?);
            score_attn_w(probs, &weights)
        }
    }
}
