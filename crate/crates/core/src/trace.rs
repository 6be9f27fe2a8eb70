//! Trace data model and the JSONL ingest format.
//!
//! A trace file holds one [`GenerationTrace`] per line. Every record is
//! validated on load: probabilities must lie in `[0, 1]`, attention stacks
//! must be causal and row-stochastic, and all embeddings in one file must share
//! a dimension. Unknown keys are tolerated and reported through `log::warn!`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row-sum tolerance for raw attention matrices.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Largest magnitude accepted for an entry above the diagonal.
const CAUSAL_TOLERANCE: f64 = 1e-12;

const KNOWN_KEYS: &[&str] = &[
    "id",
    "submitted_code",
    "ground_truth_code",
    "generated_code",
    "token_probs",
    "attention",
    "embedding",
    "labels",
];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace {id}: {reason}")]
    Validation { id: String, reason: String },
    #[error("duplicate trace id {0:?}")]
    DuplicateId(String),
}

/// One code-revision sample together with the generation signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub id: String,
    pub submitted_code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_code: Option<String>,
    pub generated_code: String,
    /// Conditional probability of each generated token.
    pub token_probs: Vec<f64>,
    /// Head-averaged attention, one `T x T` matrix per layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub labels: BTreeMap<String, bool>,
}

impl GenerationTrace {
    pub fn len(&self) -> usize {
        self.token_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_probs.is_empty()
    }

    /// Checks the per-record invariants, returning the first violation.
    pub fn validate(&self) -> Result<(), TraceError> {
        let fail = |reason: String| TraceError::Validation {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(fail("empty id".into()));
        }
        if self.token_probs.is_empty() {
            return Err(fail("token_probs must contain at least one entry".into()));
        }
        if let Some(t) = self
            .token_probs
            .iter()
            .position(|p| !p.is_finite() || !(0.0..=1.0).contains(p))
        {
            return Err(fail(format!(
                "probability out of range at token {t}: {}",
                self.token_probs[t]
            )));
        }
        if let Some(reason) = attention_violation(self) {
            return Err(fail(reason));
        }
        if let Some(e) = &self.embedding {
            if e.is_empty() {
                return Err(fail("embedding is empty".into()));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(fail("embedding contains a non-finite value".into()));
            }
        }
        Ok(())
    }
}

/// Returns true iff the attention invariants hold. Traces without attention
/// pass vacuously.
pub fn validate_attention(trace: &GenerationTrace) -> bool {
    attention_violation(trace).is_none()
}

fn attention_violation(trace: &GenerationTrace) -> Option<String> {
    let layers = trace.attention.as_ref()?;
    let t = trace.token_probs.len();
    if layers.is_empty() {
        return Some("attention has no layers".into());
    }
    for (l, layer) in layers.iter().enumerate() {
        if layer.len() != t {
            return Some(format!(
                "attention layer {l} has {} rows, expected {t}",
                layer.len()
            ));
        }
        for (i, row) in layer.iter().enumerate() {
            if row.len() != t {
                return Some(format!(
                    "attention layer {l} row {i} has {} columns, expected {t}",
                    row.len()
                ));
            }
            let mut sum = 0.0;
            for (j, &a) in row.iter().enumerate() {
                if !a.is_finite() || a < 0.0 {
                    return Some(format!("attention layer {l} entry ({i},{j}) is negative"));
                }
                if j > i {
                    if a > CAUSAL_TOLERANCE {
                        return Some(format!(
                            "attention layer {l} entry ({i},{j}) above the diagonal is nonzero"
                        ));
                    }
                } else {
                    sum += a;
                }
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Some(format!(
                    "attention layer {l} row {i} sums to {sum}, expected 1"
                ));
            }
        }
    }
    None
}

/// Summary counts over a loaded trace file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFileStats {
    pub count: usize,
    pub embedding_dim: Option<usize>,
    pub has_attention_count: usize,
    /// Traces with at least one token probability of exactly zero.
    pub zero_prob_count: usize,
}

impl TraceFileStats {
    pub fn from_traces(traces: &[GenerationTrace]) -> Self {
        Self {
            count: traces.len(),
            embedding_dim: traces
                .iter()
                .find_map(|t| t.embedding.as_ref().map(Vec::len)),
            has_attention_count: traces.iter().filter(|t| t.attention.is_some()).count(),
            zero_prob_count: traces
                .iter()
                .filter(|t| t.token_probs.iter().any(|&p| p == 0.0))
                .count(),
        }
    }
}

/// Parses and validates JSONL trace records from a reader. Blank lines are
/// skipped; line numbers in diagnostics are 1-based.
pub fn read_traces<R: BufRead>(reader: R) -> Result<Vec<GenerationTrace>, TraceError> {
    let mut traces = Vec::new();
    let mut seen = HashSet::new();
    let mut embedding_dim: Option<(usize, String)> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        if let Some(obj) = value.as_object() {
            for key in obj.keys().filter(|k| !KNOWN_KEYS.contains(&k.as_str())) {
                log::warn!("line {line_no}: ignoring unknown key {key:?}");
            }
        }
        let trace: GenerationTrace =
            serde_json::from_value(value).map_err(|e| TraceError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        trace.validate()?;
        if let Some(e) = &trace.embedding {
            match &embedding_dim {
                None => embedding_dim = Some((e.len(), trace.id.clone())),
                Some((d, first)) if *d != e.len() => {
                    return Err(TraceError::Validation {
                        id: trace.id.clone(),
                        reason: format!(
                            "embedding dimension {} differs from {d} (first seen on {first})",
                            e.len()
                        ),
                    });
                }
                Some(_) => {}
            }
        }
        if !seen.insert(trace.id.clone()) {
            return Err(TraceError::DuplicateId(trace.id));
        }
        traces.push(trace);
    }
    Ok(traces)
}

pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<GenerationTrace>, TraceError> {
    let file = File::open(path)?;
    read_traces(BufReader::new(file))
}

pub fn write_traces<W: Write>(mut writer: W, traces: &[GenerationTrace]) -> std::io::Result<()> {
    for trace in traces {
        serde_json::to_writer(&mut writer, trace)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
