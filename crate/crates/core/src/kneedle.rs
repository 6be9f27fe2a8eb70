//! Offline Kneedle knee detection with zero sensitivity.
//!
//! Both curves are normalized to the unit square (`x_i = i / (n - 1)`, `y`
//! min-max scaled) and the knee is the global argmax of the distance from the
//! reference diagonal. No smoothing is applied: inputs are short sorted
//! arrays, for which the smoothing pass does not move the global maximum.
//! Ties resolve to the smallest index and flat curves give `k = 1`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KneeResult {
    /// Number of leading points up to and including the knee (`1..=n`).
    pub k: usize,
    /// Normalized deviation at the knee.
    pub deviation: f64,
}

impl KneeResult {
    const DEGENERATE: KneeResult = KneeResult { k: 1, deviation: 0.0 };
}

/// Knee of an ascending, concave curve: maximizes `y'_i - x_i`.
pub fn kneedle_concave_increasing(y: &[f64]) -> KneeResult {
    knee(y, 1.0)
}

/// Knee of a descending, convex curve: maximizes `(1 - x_i) - y'_i`.
pub fn kneedle_convex_decreasing(y: &[f64]) -> KneeResult {
    knee(y, -1.0)
}

/// `orientation` is `1` for concave-increasing and `-1` for convex-decreasing.
/// Candidates are compared exactly, so equal deviations always resolve to
/// the smaller index regardless of rounding.
fn knee(y: &[f64], orientation: f64) -> KneeResult {
    let n = y.len();
    if n <= 2 {
        return KneeResult::DEGENERATE;
    }
    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return KneeResult::DEGENERATE;
    }
    let span = (n - 1) as f64;
    let mut best = 0;
    for i in 1..n {
        if exceeds(y, i, best, span, orientation, lo, hi) {
            best = i;
        }
    }
    let range = hi - lo;
    let x = best as f64 / span;
    let y_norm = (y[best] - lo) / range;
    let deviation = if orientation > 0.0 { y_norm - x } else { (1.0 - x) - y_norm };
    KneeResult { k: best + 1, deviation }
}

/// Whether point `i` deviates strictly more than point `j`. Scaled by
/// `(n - 1) * (hi - lo)` the difference of the two deviations is
/// `orientation * (n - 1) * (y_i - y_j) - (i - j) * (hi - lo)`, a sum of four
/// products whose sign is evaluated without rounding error.
fn exceeds(y: &[f64], i: usize, j: usize, span: f64, orientation: f64, lo: f64, hi: f64) -> bool {
    let steps = i as f64 - j as f64;
    let mut terms = Vec::with_capacity(8);
    for (a, b) in [
        (orientation * span, y[i]),
        (-orientation * span, y[j]),
        (-steps, hi),
        (steps, lo),
    ] {
        let (p, e) = two_product(a, b);
        terms.push(p);
        terms.push(e);
    }
    exact_sign(&terms) > 0
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_product(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Sign of an exact sum, accumulated as a non-overlapping expansion whose
/// largest nonzero component carries the sign.
fn exact_sign(terms: &[f64]) -> i8 {
    let mut expansion: Vec<f64> = Vec::with_capacity(terms.len());
    for &t in terms {
        let mut q = t;
        for h in expansion.iter_mut() {
            let (s, e) = two_sum(q, *h);
            *h = e;
            q = s;
        }
        expansion.push(q);
    }
    match expansion.iter().rev().find(|&&c| c != 0.0) {
        Some(&c) if c > 0.0 => 1,
        Some(_) => -1,
        None => 0,
    }
}
