use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::ClusterError;

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-10;

/// Linear projection onto the leading principal components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub method: String,
    pub mean: Vec<f64>,
    /// One orthonormal row per retained component.
    pub components: Vec<Vec<f64>>,
    pub n: usize,
    pub explained_variance: Vec<f64>,
}

impl Projection {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, ClusterError> {
        if x.len() != self.mean.len() {
            return Err(ClusterError::DimensionMismatch {
                expected: self.mean.len(),
                found: x.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect())
    }
}

fn check_dims(embeddings: &[Vec<f64>]) -> Result<usize, ClusterError> {
    let dim = embeddings.first().map_or(0, Vec::len);
    if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
        return Err(ClusterError::DimensionMismatch { expected: dim, found: bad.len() });
    }
    if dim == 0 {
        return Err(ClusterError::DegenerateData("embeddings have zero dimensions"));
    }
    Ok(dim)
}

/// Principal components of the centred embeddings, keeping
/// `min(n, D, samples - 1, rank)` of them in order of explained variance.
/// Each component is oriented so its largest-magnitude coordinate is positive.
pub fn fit_projection(embeddings: &[Vec<f64>], n: usize) -> Result<Projection, ClusterError> {
    if n == 0 {
        return Err(ClusterError::InvalidParameter("projection dimension must be at least 1"));
    }
    if embeddings.len() < 2 {
        return Err(ClusterError::TooFewPoints { found: embeddings.len(), required: 2 });
    }
    let dim = check_dims(embeddings)?;
    let samples = embeddings.len();

    let mut mean = vec![0.0; dim];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= samples as f64;
    }
    let centred = DMatrix::from_fn(samples, dim, |i, j| embeddings[i][j] - mean[j]);
    let denom = (samples - 1) as f64;

    // eigenpairs of the covariance, computed through whichever side is smaller
    let (values, vectors) = if dim <= samples {
        let cov = centred.transpose() * &centred / denom;
        let eig = SymmetricEigen::new(cov);
        (eig.eigenvalues, eig.eigenvectors)
    } else {
        let gram = &centred * centred.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let mut vecs = centred.transpose() * &eig.eigenvectors;
        for (j, mut col) in vecs.column_iter_mut().enumerate() {
            let norm = col.norm();
            if eig.eigenvalues[j] > 0.0 && norm > 0.0 {
                col /= norm;
            }
        }
        (eig.eigenvalues, vecs)
    };

    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let largest = values[order[0]];
    if largest <= 0.0 {
        return Err(ClusterError::DegenerateData("all embeddings are identical"));
    }
    let rank = order.iter().filter(|&&i| values[i] > RANK_TOLERANCE * largest).count();
    let keep = n.min(dim).min(samples - 1).min(rank);

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(keep);
    let mut explained_variance = Vec::with_capacity(keep);
    for &i in order.iter().take(keep) {
        let mut c: Vec<f64> = vectors.column(i).iter().copied().collect();
        // re-orthonormalize against earlier components
        for prev in &components {
            let dot: f64 = prev.iter().zip(&c).map(|(a, b)| a * b).sum();
            for (x, p) in c.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut c {
            *x /= norm;
        }
        let pivot = c
            .iter()
            .enumerate()
            .fold(0, |best, (j, x)| if x.abs() > c[best].abs() { j } else { best });
        if c[pivot] < 0.0 {
            for x in &mut c {
                *x = -*x;
            }
        }
        components.push(c);
        explained_variance.push(values[i]);
    }

    Ok(Projection {
        method: "pca".to_string(),
        mean,
        components,
        n: keep,
        explained_variance,
    })
}
