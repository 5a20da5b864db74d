use serde::{Deserialize, Serialize};

use crate::AnalyticError;
use crate::stats::{mean, percentile_sorted, population_std, sorted};

/// Step durations of one walking episode and their successive differences.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSeries {
    pub step_durations: Vec<f64>,
    pub diffs: Vec<f64>,
}

impl StepSeries {
    pub fn new(step_durations: Vec<f64>) -> Self {
        let diffs = step_durations.windows(2).map(|w| w[1] - w[0]).collect();
        Self {
            step_durations,
            diffs,
        }
    }

    /// Durations from step sample indices, each difference taken in whole
    /// samples before dividing by the rate.
    pub fn from_indices(indices: &[usize], rate_hz: f64) -> Self {
        Self::new(
            indices
                .windows(2)
                .map(|w| (w[1] - w[0]) as f64 / rate_hz)
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub p5: f64,
    pub p25: f64,
    pub p75: f64,
    pub p95: f64,
    pub iqr: f64,
}

impl SeriesStats {
    pub const NAMES: [&'static str; 10] = [
        "mean", "std", "min", "max", "median", "p5", "p25", "p75", "p95", "iqr",
    ];

    /// `None` for an empty series.
    pub fn of(values: &[f64]) -> Option<Self> {
        let s = sorted(values);
        let p = |q| percentile_sorted(&s, q);
        let (p25, p75) = (p(0.25)?, p(0.75)?);
        Some(Self {
            mean: mean(values)?,
            std: population_std(values)?,
            min: *s.first()?,
            max: *s.last()?,
            median: p(0.5)?,
            p5: p(0.05)?,
            p25,
            p75,
            p95: p(0.95)?,
            iqr: p75 - p25,
        })
    }

    pub fn to_array(&self) -> [f64; 10] {
        [
            self.mean, self.std, self.min, self.max, self.median, self.p5, self.p25, self.p75,
            self.p95, self.iqr,
        ]
    }

    /// `min <= p5 <= p25 <= median <= p75 <= p95 <= max`
    pub fn is_ordered(&self) -> bool {
        let chain = [
            self.min, self.p5, self.p25, self.median, self.p75, self.p95, self.max,
        ];
        chain.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Twenty gait features: ten statistics over step durations and ten over
/// their successive differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TugFeatures {
    pub step_durations: SeriesStats,
    pub diffs: SeriesStats,
}

pub const FEATURE_COUNT: usize = 20;

impl TugFeatures {
    /// Flat names, `<stat>_sd` then `<stat>_diff`.
    pub fn names() -> Vec<String> {
        let sd = SeriesStats::NAMES.iter().map(|n| format!("{n}_sd"));
        let diff = SeriesStats::NAMES.iter().map(|n| format!("{n}_diff"));
        sd.chain(diff).collect()
    }

    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        let mut out = [0.0; FEATURE_COUNT];
        out[..10].copy_from_slice(&self.step_durations.to_array());
        out[10..].copy_from_slice(&self.diffs.to_array());
        out
    }
}

pub fn extract_features(series: &StepSeries) -> Result<TugFeatures, AnalyticError> {
    let n = series.step_durations.len();
    if n < 2 {
        return Err(AnalyticError::InsufficientSteps(n));
    }
    let insufficient = || AnalyticError::InsufficientSteps(n);
    Ok(TugFeatures {
        step_durations: SeriesStats::of(&series.step_durations).ok_or_else(insufficient)?,
        diffs: SeriesStats::of(&series.diffs).ok_or_else(insufficient)?,
    })
}
