//! Binary correctness targets: exact match, edit progress and checks passed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::GenerationTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrectnessError {
    #[error("ground-truth code is missing")]
    MissingGroundTruth,
    #[error("submitted code already equals the ground truth; edit progress is undefined")]
    SubmittedEqualsTruth,
    #[error("label {0:?} is missing")]
    MissingLabel(String),
    #[error("unknown correctness metric {0:?}")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Em,
    EpPlus,
    Cp,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Em => "em",
            Metric::EpPlus => "ep_plus",
            Metric::Cp => "cp",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = CorrectnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "em" => Ok(Metric::Em),
            "ep_plus" | "ep-plus" => Ok(Metric::EpPlus),
            "cp" => Ok(Metric::Cp),
            other => Err(CorrectnessError::UnknownMetric(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub metric: Metric,
    pub correct: bool,
    /// Raw edit progress; present only for `ep_plus`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ep_value: Option<f64>,
}

/// Trims and collapses every whitespace run (space, tab, CR, LF) to one space.
fn collapse_whitespace(text: &str) -> String {
    text.split([' ', '\t', '\n', '\r'])
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whitespace-insensitive equality.
pub fn exact_match(generated: &str, ground_truth: &str) -> bool {
    collapse_whitespace(generated) == collapse_whitespace(ground_truth)
}

/// Character-level Levenshtein distance with unit costs, using a single
/// rolling row over the shorter string.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, lc) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, sc) in short.iter().enumerate() {
            let above = row[j + 1];
            let substitute = diag + usize::from(lc != sc);
            row[j + 1] = substitute.min(above + 1).min(row[j] + 1);
            diag = above;
        }
    }
    row[short.len()]
}

/// Share of the submitted-to-truth edit distance closed by the candidate.
/// Equals 1 for a perfect candidate and may be negative.
pub fn edit_progress(
    submitted: &str,
    candidate: &str,
    ground_truth: &str,
) -> Result<f64, CorrectnessError> {
    let baseline = levenshtein(submitted, ground_truth);
    if baseline == 0 {
        return Err(CorrectnessError::SubmittedEqualsTruth);
    }
    let remaining = levenshtein(candidate, ground_truth);
    Ok((baseline as f64 - remaining as f64) / baseline as f64)
}

/// Strictly positive edit progress.
pub fn ep_plus(ep: f64) -> bool {
    ep > 0.0
}

/// Derives the requested correctness label for one trace. `cp` reads the
/// trace's `"cp"` label.
pub fn label_trace(trace: &GenerationTrace, metric: Metric) -> Result<LabeledSample, CorrectnessError> {
    let (correct, ep_value) = match metric {
        Metric::Em => {
            let truth = trace
                .ground_truth_code
                .as_deref()
                .ok_or(CorrectnessError::MissingGroundTruth)?;
            (exact_match(&trace.generated_code, truth), None)
        }
        Metric::EpPlus => {
            let truth = trace
                .ground_truth_code
                .as_deref()
                .ok_or(CorrectnessError::MissingGroundTruth)?;
            let ep = edit_progress(&trace.submitted_code, &trace.generated_code, truth)?;
            (ep_plus(ep), Some(ep))
        }
        Metric::Cp => {
            let passed = trace
                .labels
                .get("cp")
                .copied()
                .ok_or_else(|| CorrectnessError::MissingLabel("cp".into()))?;
            (passed, None)
        }
    };
    Ok(LabeledSample {
        id: trace.id.clone(),
        metric,
        correct,
        ep_value,
    })
}
