//! Global Platt scaling: a univariate logistic regression from raw score to
//! probability of correctness.
//!
//! The objective is the mean negative log-likelihood plus `l2 / (2n) * w^2`
//! (the intercept is not penalized). It is minimized with a damped Newton
//! iteration, which is deterministic and reaches the unique optimum of this
//! strictly convex two-parameter problem in a handful of steps. Single-class
//! training data yields a constant predictor instead of an error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bounds applied to the constant rate of a degenerate calibrator.
pub const RATE_CLAMP: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlattError {
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("at least two samples are required, got {0}")]
    EmptyInput(usize),
    #[error("l2 strength must be finite and non-negative, got {0}")]
    InvalidL2(f64),
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub n: usize,
    pub n_positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalCalibrator {
    pub w: f64,
    pub beta: f64,
    /// Constant rate used instead of the sigmoid when training labels were single-class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<f64>,
    pub l2: f64,
    pub train_meta: TrainMeta,
}

impl GlobalCalibrator {
    pub fn predict(&self, score: f64) -> f64 {
        match self.degenerate {
            Some(rate) => rate,
            None => sigmoid(self.w * score + self.beta),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate.is_some()
    }
}

pub fn predict_global(cal: &GlobalCalibrator, score: f64) -> f64 {
    cal.predict(score)
}

/// Penalized mean negative log-likelihood and its gradient `(d/dw, d/dbeta)`.
pub fn objective(scores: &[f64], labels: &[bool], l2: f64, w: f64, beta: f64) -> (f64, [f64; 2]) {
    let n = scores.len() as f64;
    let (mut loss, mut gw, mut gb) = (0.0, 0.0, 0.0);
    for (&s, &y) in scores.iter().zip(labels) {
        let z = w * s + beta;
        let y = if y { 1.0 } else { 0.0 };
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        gw += r * s;
        gb += r;
    }
    (
        loss / n + 0.5 * l2 / n * w * w,
        [gw / n + l2 / n * w, gb / n],
    )
}

fn hessian(scores: &[f64], l2: f64, w: f64, beta: f64) -> [f64; 3] {
    let n = scores.len() as f64;
    let (mut hww, mut hwb, mut hbb) = (0.0, 0.0, 0.0);
    for &s in scores {
        let p = sigmoid(w * s + beta);
        let v = p * (1.0 - p);
        hww += v * s * s;
        hwb += v * s;
        hbb += v;
    }
    [hww / n + l2 / n, hwb / n, hbb / n]
}

fn check_inputs(scores: &[f64], labels: &[bool], l2: f64) -> Result<(), PlattError> {
    if scores.len() != labels.len() {
        return Err(PlattError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.len() < 2 {
        return Err(PlattError::EmptyInput(scores.len()));
    }
    if !l2.is_finite() || l2 < 0.0 {
        return Err(PlattError::InvalidL2(l2));
    }
    Ok(())
}

fn clamped_rate(n_positive: usize, n: usize) -> f64 {
    (n_positive as f64 / n as f64).clamp(RATE_CLAMP, 1.0 - RATE_CLAMP)
}

/// Fits a calibrator starting from `w = 0` and the log-odds of the label rate.
pub fn fit_global(scores: &[f64], labels: &[bool], l2: f64) -> Result<GlobalCalibrator, PlattError> {
    check_inputs(scores, labels, l2)?;
    let n_positive = labels.iter().filter(|&&l| l).count();
    let rate = clamped_rate(n_positive, labels.len());
    fit_global_from(scores, labels, l2, (0.0, (rate / (1.0 - rate)).ln()))
}

/// Fits a calibrator from an explicit `(w, beta)` starting point.
pub fn fit_global_from(
    scores: &[f64],
    labels: &[bool],
    l2: f64,
    init: (f64, f64),
) -> Result<GlobalCalibrator, PlattError> {
    check_inputs(scores, labels, l2)?;
    let n = labels.len();
    let n_positive = labels.iter().filter(|&&l| l).count();
    let train_meta = TrainMeta { n, n_positive };
    if n_positive == 0 || n_positive == n {
        return Ok(GlobalCalibrator {
            w: 0.0,
            beta: 0.0,
            degenerate: Some(clamped_rate(n_positive, n)),
            l2,
            train_meta,
        });
    }

    let (mut w, mut beta) = init;
    let (mut loss, mut grad) = objective(scores, labels, l2, w, beta);
    for _ in 0..MAX_ITERATIONS {
        if grad[0].hypot(grad[1]) < GRADIENT_TOLERANCE {
            break;
        }
        let [hww, hwb, hbb] = hessian(scores, l2, w, beta);
        let det = hww * hbb - hwb * hwb;
        let mut step = if det > 1e-300 && det.is_finite() {
            [
                -(hbb * grad[0] - hwb * grad[1]) / det,
                -(hww * grad[1] - hwb * grad[0]) / det,
            ]
        } else {
            [-grad[0], -grad[1]]
        };
        // fall back to steepest descent if the Newton direction is not a descent direction
        if step[0] * grad[0] + step[1] * grad[1] >= 0.0 {
            step = [-grad[0], -grad[1]];
        }
        let slope = step[0] * grad[0] + step[1] * grad[1];

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let (cw, cb) = (w + t * step[0], beta + t * step[1]);
            let (closs, cgrad) = objective(scores, labels, l2, cw, cb);
            if closs <= loss + 1e-4 * t * slope {
                w = cw;
                beta = cb;
                loss = closs;
                grad = cgrad;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    Ok(GlobalCalibrator {
        w,
        beta,
        degenerate: None,
        l2,
        train_meta,
    })
}
