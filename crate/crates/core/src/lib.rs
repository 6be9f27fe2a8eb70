//! Confidence scoring and calibration for code-revision generation traces.
//!
//! The crate covers the full path from raw traces to calibrated
//! probabilities: token-level confidence scores ([`confidence`]), binary
//! correctness targets ([`correctness`]), global and cluster-local Platt
//! scaling ([`platt`], [`local`]) and calibration metrics ([`metrics`]).

pub mod cluster;
pub mod confidence;
pub mod correctness;
pub mod kneedle;
pub mod local;
pub mod metrics;
pub mod platt;
pub mod stats;
pub mod synth;
pub mod trace;
