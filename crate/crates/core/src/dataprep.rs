//! Data preparation applied before analytics see a datapoint:
//! pseudonymization, gap imputation, clock synchronization and per-day
//! aggregation.

use std::ops::Range;

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::error::{ErrorCode, HgError, Result};
use crate::ids::{base32_lower, EntityKind, SubjectId, TestId};

/// Deterministic pseudonym for `raw_id` under a study-scoped secret salt:
/// `sub_` + base32 of the first 16 bytes of HMAC-SHA-256(salt, raw_id).
pub fn pseudonymize(salt: &[u8], raw_id: &str) -> SubjectId {
    let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(salt).expect("hmac accepts any key");
    mac.update(raw_id.as_bytes());
    let digest = mac.finalize().into_bytes();
    SubjectId(format!(
        "{}_{}",
        EntityKind::Subject.prefix(),
        base32_lower(&digest[..16])
    ))
}

/// A timestamped scalar; time in integer milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t_ms: i64,
    pub value: f64,
}

impl Sample {
    pub fn new(t_ms: i64, value: f64) -> Self {
        Self { t_ms, value }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputePolicy {
    Linear,
    Hold,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImputeConfig {
    pub rate_hz: f64,
    pub policy: ImputePolicy,
    /// Gaps longer than this are never filled; they split the series.
    pub max_gap_ms: i64,
}

impl ImputeConfig {
    pub fn new(rate_hz: f64, policy: ImputePolicy) -> Self {
        Self {
            rate_hz,
            policy,
            max_gap_ms: 5_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputedSample {
    pub t_ms: i64,
    pub value: f64,
    pub imputed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedSeries {
    pub samples: Vec<ImputedSample>,
    /// Contiguous runs of `samples`, split at gaps longer than `max_gap_ms`.
    pub segments: Vec<Range<usize>>,
}

/// Fills missing samples relative to the nominal rate.
///
/// A gap is an interval `dt > 1.5 / rate_hz`; it is filled with
/// `round(dt * rate) - 1` evenly spaced samples unless it exceeds
/// `max_gap_ms` or the policy is `Drop`. Observed samples pass through
/// unchanged.
pub fn impute_gaps(series: &[Sample], cfg: &ImputeConfig) -> Result<ImputedSeries> {
    if series.is_empty() {
        return Err(HgError::new(ErrorCode::EmptyInput, "empty series"));
    }
    if !(cfg.rate_hz.is_finite() && cfg.rate_hz > 0.0) {
        return Err(HgError::validation("rate_hz must be > 0"));
    }
    if series.windows(2).any(|w| w[1].t_ms <= w[0].t_ms) {
        return Err(HgError::validation("timestamps must be strictly increasing"));
    }
    let gap_threshold_ms = 1.5 * 1000.0 / cfg.rate_hz;
    let mut samples = Vec::with_capacity(series.len());
    let mut segments = Vec::new();
    let mut seg_start = 0;
    let observed = |s: &Sample| ImputedSample {
        t_ms: s.t_ms,
        value: s.value,
        imputed: false,
    };
    samples.push(observed(&series[0]));
    for w in series.windows(2) {
        let (a, b) = (w[0], w[1]);
        let dt = b.t_ms - a.t_ms;
        if dt as f64 > gap_threshold_ms {
            if dt > cfg.max_gap_ms {
                segments.push(seg_start..samples.len());
                seg_start = samples.len();
            } else if cfg.policy != ImputePolicy::Drop {
                let missing = ((dt as f64 * cfg.rate_hz / 1000.0).round() as i64 - 1).max(1);
                for k in 1..=missing {
                    let t_ms = a.t_ms + (k as f64 * dt as f64 / (missing + 1) as f64).round() as i64;
                    let value = match cfg.policy {
                        ImputePolicy::Linear => {
                            let frac = (t_ms - a.t_ms) as f64 / dt as f64;
                            a.value + (b.value - a.value) * frac
                        }
                        _ => a.value,
                    };
                    samples.push(ImputedSample {
                        t_ms,
                        value,
                        imputed: true,
                    });
                }
            }
        }
        samples.push(observed(&b));
    }
    segments.push(seg_start..samples.len());
    Ok(ImputedSeries { samples, segments })
}

/// Shifts each stream by minus its clock offset so all streams share the
/// server's UTC timeline. Intervals within a stream are preserved exactly.
pub fn synchronize(streams: &[(Vec<Sample>, i64)]) -> Vec<Vec<Sample>> {
    streams
        .iter()
        .map(|(samples, offset_ms)| {
            samples
                .iter()
                .map(|s| Sample::new(s.t_ms - offset_ms, s.value))
                .collect()
        })
        .collect()
}

/// A scalar result of one test for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject_id: SubjectId,
    pub test_id: TestId,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

/// Count, mean, min and max of one subject's scalar results for one test.
pub fn aggregate(observations: &[Observation]) -> Result<Aggregate> {
    let Some(first) = observations.first() else {
        return Ok(Aggregate {
            count: 0,
            mean: None,
            min: None,
            max: None,
        });
    };
    if observations
        .iter()
        .any(|o| o.test_id != first.test_id || o.subject_id != first.subject_id)
    {
        return Err(HgError::new(
            ErrorCode::MixedInput,
            "observations span more than one subject or test",
        ));
    }
    let values: Vec<f64> = observations.iter().map(|o| o.value).collect();
    Ok(Aggregate {
        count: values.len(),
        mean: Some(compensated_sum(&values) / values.len() as f64),
        min: values.iter().copied().reduce(f64::min),
        max: values.iter().copied().reduce(f64::max),
    })
}

/// Neumaier summation.
pub(crate) fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}
