//! Local Platt scaling: one calibrator per density cluster, with a backoff
//! for outliers and under-supported clusters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{
    self, build_features, core_distances, fit_features, fit_projection, labels_from_mst, minimum_spanning_tree,
    ClusterError, ClusterModel, FeatureVector, Projection, Standardization,
};
use crate::metrics::{self, EvaluationReport, MetricsError};
use crate::platt::{fit_global, GlobalCalibrator, PlattError};

/// Members of each class a cluster needs before it gets its own calibrator.
pub const MIN_CLASS_SUPPORT: usize = 10;
pub const DEFAULT_PROJECTION_DIM: usize = 20;
pub const DEFAULT_L2: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalError {
    #[error("embeddings are required for every sample")]
    MissingEmbeddings,
    #[error("inputs differ in length")]
    LengthMismatch,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Platt(#[from] PlattError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("every grid combination was skipped")]
    NoViableCombination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackoffPolicy {
    Global,
    Uncalibrated,
}

impl fmt::Display for BackoffPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackoffPolicy::Global => "global",
            BackoffPolicy::Uncalibrated => "uncalibrated",
        })
    }
}

impl FromStr for BackoffPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(BackoffPolicy::Global),
            "uncalibrated" => Ok(BackoffPolicy::Uncalibrated),
            other => Err(format!("unknown backoff policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalHyper {
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub backoff: BackoffPolicy,
    pub n: usize,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEnsemble {
    pub projection: Projection,
    pub standardization: Standardization,
    #[serde(flatten)]
    pub clusters: ClusterModel,
    pub per_cluster: BTreeMap<i64, GlobalCalibrator>,
    pub backoff_clusters: Vec<i64>,
    pub backoff: BackoffPolicy,
    pub fallback: GlobalCalibrator,
    pub hyper: LocalHyper,
}

/// Scores, labels and embeddings for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub embeddings: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn check(&self) -> Result<(), LocalError> {
        if self.labels.len() != self.scores.len() {
            return Err(LocalError::LengthMismatch);
        }
        if self.embeddings.len() != self.scores.len() || self.embeddings.iter().any(Vec::is_empty) {
            return Err(LocalError::MissingEmbeddings);
        }
        Ok(())
    }
}

struct FeatureSpace {
    projection: Projection,
    standardization: Standardization,
    features: Vec<FeatureVector>,
}

fn feature_space(data: &Dataset, n: usize) -> Result<FeatureSpace, LocalError> {
    let projection = fit_projection(&data.embeddings, n)?;
    let (standardization, features) = fit_features(&projection, &data.embeddings, &data.scores)?;
    Ok(FeatureSpace { projection, standardization, features })
}

fn assemble(data: &Dataset, space: &FeatureSpace, labels: Vec<i64>, hyper: LocalHyper) -> Result<LocalEnsemble, LocalError> {
    let clusters = ClusterModel::new(hyper.min_cluster_size, hyper.min_samples, space.features.clone(), labels);
    let mut per_cluster = BTreeMap::new();
    let mut backoff_clusters = Vec::new();
    for k in 0..clusters.n_clusters as i64 {
        let (scores, labels): (Vec<f64>, Vec<bool>) = clusters
            .labels
            .iter()
            .zip(data.scores.iter().zip(&data.labels))
            .filter(|(&l, _)| l == k)
            .map(|(_, (&s, &y))| (s, y))
            .unzip();
        let positives = labels.iter().filter(|&&y| y).count();
        if positives < MIN_CLASS_SUPPORT || labels.len() - positives < MIN_CLASS_SUPPORT {
            backoff_clusters.push(k);
        } else {
            per_cluster.insert(k, fit_global(&scores, &labels, hyper.l2)?);
        }
    }
    let fallback = fit_global(&data.scores, &data.labels, hyper.l2)?;
    Ok(LocalEnsemble {
        projection: space.projection.clone(),
        standardization: space.standardization.clone(),
        clusters,
        per_cluster,
        backoff_clusters,
        backoff: hyper.backoff,
        fallback,
        hyper,
    })
}

pub fn fit_local(data: &Dataset, hyper: LocalHyper) -> Result<LocalEnsemble, LocalError> {
    data.check()?;
    let space = feature_space(data, hyper.n)?;
    let model = cluster::hdbscan(&space.features, hyper.min_cluster_size, hyper.min_samples)?;
    assemble(data, &space, model.labels, hyper)
}

impl LocalEnsemble {
    /// Calibrated probability for an already-built feature vector.
    fn predict_feature(&self, score: f64, feature: &[f64]) -> f64 {
        let k = self.clusters.assign(feature);
        match self.per_cluster.get(&k) {
            Some(cal) => cal.predict(score),
            None => match self.backoff {
                BackoffPolicy::Global => self.fallback.predict(score),
                BackoffPolicy::Uncalibrated => score,
            },
        }
    }

    pub fn predict(&self, score: f64, embedding: &[f64]) -> Result<f64, LocalError> {
        let f = build_features(&self.projection, &self.standardization, &[embedding.to_vec()], &[score])?;
        Ok(self.predict_feature(score, &f[0]))
    }

    /// Batch prediction; output order matches input order.
    pub fn predict_many(&self, scores: &[f64], embeddings: &[Vec<f64>]) -> Result<Vec<f64>, LocalError> {
        if scores.len() != embeddings.len() {
            return Err(LocalError::LengthMismatch);
        }
        let features = build_features(&self.projection, &self.standardization, embeddings, scores)?;
        Ok(features
            .par_iter()
            .zip(scores.par_iter())
            .map(|(f, &s)| self.predict_feature(s, f))
            .collect())
    }
}

pub fn predict_local(ens: &LocalEnsemble, score: f64, embedding: &[f64]) -> Result<f64, LocalError> {
    ens.predict(score, embedding)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub min_cluster_size: Vec<usize>,
    pub min_samples: Vec<usize>,
    pub backoff: Vec<BackoffPolicy>,
    pub n: usize,
    pub l2: f64,
    pub bins: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            min_cluster_size: (50..=150).step_by(25).collect(),
            min_samples: (5..=80).step_by(15).collect(),
            backoff: vec![BackoffPolicy::Global, BackoffPolicy::Uncalibrated],
            n: DEFAULT_PROJECTION_DIM,
            l2: DEFAULT_L2,
            bins: metrics::DEFAULT_BINS,
        }
    }
}

impl Grid {
    /// Combinations in iteration order: min_cluster_size outermost, backoff innermost.
    pub fn combinations(&self) -> Vec<LocalHyper> {
        let mut out = Vec::new();
        for &min_cluster_size in &self.min_cluster_size {
            for &min_samples in &self.min_samples {
                for &backoff in &self.backoff {
                    out.push(LocalHyper { min_cluster_size, min_samples, backoff, n: self.n, l2: self.l2 });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub index: usize,
    pub hyper: LocalHyper,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_coverage: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_clusters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_index: usize,
    pub best_hyper: LocalHyper,
    pub best_report: EvaluationReport,
    pub table: Vec<GridEntry>,
}

/// Lexicographic preference: lower ECE, then lower Brier, then higher coverage.
fn better(a: &EvaluationReport, b: &EvaluationReport) -> bool {
    a.ece
        .total_cmp(&b.ece)
        .then(a.brier.total_cmp(&b.brier))
        .then(b.bin_coverage.cmp(&a.bin_coverage))
        .is_lt()
}

/// Fits every grid combination on `train`, evaluates on `valid` and returns
/// the lexicographic winner with the full table in grid order.
pub fn grid_search(train: &Dataset, valid: &Dataset, grid: &Grid) -> Result<GridResult, LocalError> {
    let combos = grid.combinations();
    if combos.is_empty() {
        return Err(LocalError::EmptyGrid);
    }
    train.check()?;
    valid.check()?;
    let space = feature_space(train, grid.n)?;

    let mut sample_values = grid.min_samples.clone();
    sample_values.sort_unstable();
    sample_values.dedup();
    let msts: BTreeMap<usize, Vec<cluster::MstEdge>> = sample_values
        .par_iter()
        .map(|&ms| {
            let core = core_distances(&space.features, ms);
            (ms, minimum_spanning_tree(&space.features, &core))
        })
        .collect();

    let n = train.len();
    let outcomes: Vec<Result<Option<(EvaluationReport, usize)>, LocalError>> = combos
        .par_iter()
        .map(|hyper| {
            if hyper.min_cluster_size < 2 || hyper.min_samples < 1 {
                return Err(ClusterError::InvalidParameter("grid values out of range").into());
            }
            if n < hyper.min_cluster_size {
                return Ok(None);
            }
            let labels = labels_from_mst(n, &msts[&hyper.min_samples], hyper.min_cluster_size);
            let ens = assemble(train, &space, labels, *hyper)?;
            let preds = ens.predict_many(&valid.scores, &valid.embeddings)?;
            let report = metrics::reliability_table(&preds, &valid.labels, grid.bins)?;
            Ok(Some((report, ens.clusters.n_clusters)))
        })
        .collect();

    let mut table = Vec::with_capacity(combos.len());
    let mut best: Option<(usize, EvaluationReport)> = None;
    for (index, (hyper, outcome)) in combos.iter().zip(outcomes).enumerate() {
        let entry = match outcome? {
            None => GridEntry {
                index,
                hyper: *hyper,
                ece: None,
                brier: None,
                bin_coverage: None,
                n_clusters: None,
                skipped: Some(format!("too few points: {n} available, {} required", hyper.min_cluster_size)),
            },
            Some((report, n_clusters)) => {
                let entry = GridEntry {
                    index,
                    hyper: *hyper,
                    ece: Some(report.ece),
                    brier: Some(report.brier),
                    bin_coverage: Some(report.bin_coverage),
                    n_clusters: Some(n_clusters),
                    skipped: None,
                };
                if best.as_ref().is_none_or(|(_, b)| better(&report, b)) {
                    best = Some((index, report));
                }
                entry
            }
        };
        table.push(entry);
    }
    let (best_index, best_report) = best.ok_or(LocalError::NoViableCombination)?;
    Ok(GridResult { best_index, best_hyper: combos[best_index], best_report, table })
}
