//! Descriptive statistics over token probabilities and confidence scores.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("input is empty")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
}

/// Separation between the score distributions of correct and incorrect samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub w1: f64,
    pub tau_b: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

/// Population skewness; zero when the sequence has no spread.
pub fn sample_skewness(values: &[f64]) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    // a rounded mean would otherwise leave tiny equal deviations
    if values.iter().all(|&v| v == values[0]) {
        return Ok(0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(0.0);
    }
    Ok(values.iter().map(|v| ((v - mean) / sd).powi(3)).sum::<f64>() / n)
}

/// Lower median: the element at index `(n - 1) / 2` of the sorted values.
pub fn lower_median(values: &[f64]) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[(sorted.len() - 1) / 2])
}

/// Median of per-sequence skewness.
pub fn median_skewness<'a, I>(sequences: I) -> Result<f64, StatsError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let skews = sequences
        .into_iter()
        .map(sample_skewness)
        .collect::<Result<Vec<_>, _>>()?;
    lower_median(&skews)
}

/// 1-D Wasserstein-1 distance between two empirical distributions, as the
/// integral of `|F(x) - G(x)|`.
pub fn wasserstein1(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.is_empty() || ys.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);

    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        let gap = (i as f64 / na - j as f64 / nb).abs();
        total += gap * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Number of tied pairs within runs of equal adjacent values.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort that returns the number of inversions (strictly decreasing pairs).
fn count_inversions(values: &mut [f64], scratch: &mut [f64]) -> u64 {
    let n = values.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (left, right) = values.split_at_mut(mid);
        let (sl, sr) = scratch.split_at_mut(mid);
        count_inversions(left, sl) + count_inversions(right, sr)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if values[j] < values[i] {
            scratch[k] = values[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            scratch[k] = values[i];
            i += 1;
        }
        k += 1;
    }
    scratch[k..k + mid - i].copy_from_slice(&values[i..mid]);
    k += mid - i;
    scratch[k..k + n - j].copy_from_slice(&values[j..n]);
    values.copy_from_slice(&scratch[..n]);
    swaps
}

/// Kendall's tau-b between two real variables, O(n log n) (Knight's method).
pub fn kendall_tau_b_pairs(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(StatsError::DegenerateInput("fewer than two observations"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(StatsError::DegenerateInput("NaN in input"));
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => a.1.total_cmp(&b.1),
        o => o,
    });

    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ties_x = tied_pairs(&xs);
    let ties_xy = tied_pairs(&pairs);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut scratch = vec![0.0; n];
    let swaps = count_inversions(&mut ys, &mut scratch);
    let ties_y = tied_pairs(&ys);

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    if ties_x == n0 || ties_y == n0 {
        return Err(StatsError::DegenerateInput("one variable is constant"));
    }
    // n_c - n_d over pairs untied in both variables
    let s = n0 as i128 - ties_x as i128 - ties_y as i128 + ties_xy as i128 - 2 * swaps as i128;
    let denom = ((n0 - ties_x) as f64 * (n0 - ties_y) as f64).sqrt();
    Ok(s as f64 / denom)
}

/// Kendall's tau-b between scores and binary labels (cast to 0/1).
pub fn kendall_tau_b(scores: &[f64], labels: &[bool]) -> Result<f64, StatsError> {
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    kendall_tau_b_pairs(scores, &y)
}

/// W1 between correct/incorrect score distributions plus tau-b against labels.
pub fn separation(scores: &[f64], labels: &[bool]) -> Result<SeparationReport, StatsError> {
    if scores.len() != labels.len() {
        return Err(StatsError::LengthMismatch(scores.len(), labels.len()));
    }
    let (correct, incorrect): (Vec<(f64, bool)>, Vec<(f64, bool)>) = scores
        .iter()
        .copied()
        .zip(labels.iter().copied())
        .partition(|&(_, l)| l);
    let correct: Vec<f64> = correct.into_iter().map(|p| p.0).collect();
    let incorrect: Vec<f64> = incorrect.into_iter().map(|p| p.0).collect();
    Ok(SeparationReport {
        w1: wasserstein1(&correct, &incorrect)?,
        tau_b: kendall_tau_b(scores, labels)?,
        n_correct: correct.len(),
        n_incorrect: incorrect.len(),
    })
}
