//! Feature construction and density clustering for local calibration.
//!
//! A feature vector is the PCA projection of an embedding followed by the raw
//! confidence score, with every dimension z-scored using training statistics.
//! Clusters come from HDBSCAN over these vectors; new points inherit the label
//! of their nearest training point.

mod hdbscan;
mod projection;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hdbscan::{core_distances, euclidean, hdbscan, labels_from_mst, minimum_spanning_tree, mutual_reachability, MstEdge};
pub use projection::{fit_projection, Projection};

pub type FeatureVector = Vec<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("degenerate data: {0}")]
    DegenerateData(&'static str),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("too few points: {found} available, {required} required")]
    TooFewPoints { found: usize, required: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Per-dimension mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..dim)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                // spread at rounding-noise level counts as constant
                if sd <= 1e-12 * mean[j].abs().max(1.0) {
                    0.0
                } else {
                    sd
                }
            })
            .collect();
        Standardization { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| if *s == 0.0 { 0.0 } else { (x - m) / s })
            .collect()
    }
}

fn raw_features(projection: &Projection, embeddings: &[Vec<f64>], scores: &[f64]) -> Result<Vec<Vec<f64>>, ClusterError> {
    if embeddings.len() != scores.len() {
        return Err(ClusterError::DimensionMismatch { expected: embeddings.len(), found: scores.len() });
    }
    embeddings
        .iter()
        .zip(scores)
        .map(|(e, &s)| {
            let mut f = projection.project(e)?;
            f.push(s);
            Ok(f)
        })
        .collect()
}

/// Builds training features and the standardization fitted on them.
pub fn fit_features(
    projection: &Projection,
    embeddings: &[Vec<f64>],
    scores: &[f64],
) -> Result<(Standardization, Vec<FeatureVector>), ClusterError> {
    let raw = raw_features(projection, embeddings, scores)?;
    let standardization = Standardization::fit(&raw);
    let features = raw.iter().map(|r| standardization.apply(r)).collect();
    Ok((standardization, features))
}

/// Builds features for new points with stored training statistics.
pub fn build_features(
    projection: &Projection,
    standardization: &Standardization,
    embeddings: &[Vec<f64>],
    scores: &[f64],
) -> Result<Vec<FeatureVector>, ClusterError> {
    let expected = projection.n + 1;
    if standardization.mean.len() != expected {
        return Err(ClusterError::DimensionMismatch { expected, found: standardization.mean.len() });
    }
    Ok(raw_features(projection, embeddings, scores)?
        .iter()
        .map(|r| standardization.apply(r))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub n_clusters: usize,
    pub training_features: Vec<FeatureVector>,
    /// Cluster id per training point, `-1` for noise.
    pub labels: Vec<i64>,
}

impl ClusterModel {
    pub fn new(min_cluster_size: usize, min_samples: usize, training_features: Vec<FeatureVector>, labels: Vec<i64>) -> Self {
        let n_clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
        ClusterModel { min_cluster_size, min_samples, n_clusters, training_features, labels }
    }

    pub fn assign(&self, feature: &[f64]) -> i64 {
        assign(self, feature)
    }
}

/// Label of the nearest training point (lowest index on ties), or `-1` for
/// an empty model.
pub fn assign(model: &ClusterModel, feature: &[f64]) -> i64 {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in model.training_features.iter().enumerate() {
        let d: f64 = t.iter().zip(feature).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map_or(-1, |(i, _)| model.labels[i])
}
