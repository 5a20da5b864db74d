//! Wrist accelerometer gait analysis and TUG score prediction.

pub mod features;
pub mod filter;
pub mod model;
pub mod peaks;

use std::collections::BTreeSet;

use hg_core::Timestamp;
use hg_core::dataprep::{Aggregate, Observation, aggregate};
use hg_core::payload::AccelDocument;
use serde::{Deserialize, Serialize};
use serde_json::{Value, json};

pub use features::{FEATURE_COUNT, SeriesStats, StepSeries, TugFeatures, extract_features};
pub use model::{Forest, ForestParams, LinearModel, ModelFile, TugModel};

use crate::AnalyticError;

pub const RESULT_SCHEMA: &str = "tug.result/v1";
pub const MIN_SAMPLE_RATE_HZ: f64 = 20.0;
pub const MIN_PREDICTION_SECS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct AccelerometerTrace {
    pub sample_rate_hz: f64,
    pub start_time: Timestamp,
    pub samples: Vec<[f64; 3]>,
}

impl AccelerometerTrace {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }
}

impl From<AccelDocument> for AccelerometerTrace {
    fn from(doc: AccelDocument) -> Self {
        Self {
            sample_rate_hz: doc.sample_rate_hz,
            start_time: doc.start_time,
            samples: doc.samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TugConfig {
    pub gravity: f64,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub min_prominence: f64,
    /// Peaks below this fraction of their episode's median prominence are
    /// filter ringing or noise, not steps.
    #[serde(default = "default_relative_prominence")]
    pub min_relative_prominence: f64,
    pub min_step_gap_secs: f64,
    pub episode_gap_secs: f64,
    pub min_steps: usize,
}

impl Default for TugConfig {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            band_low_hz: 0.5,
            band_high_hz: 3.0,
            min_prominence: 0.3,
            min_relative_prominence: default_relative_prominence(),
            min_step_gap_secs: 0.3,
            episode_gap_secs: 2.0,
            min_steps: 10,
        }
    }
}

fn default_relative_prominence() -> f64 {
    0.35
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkingEpisode {
    pub start_index: usize,
    pub end_index: usize,
    pub step_indices: Vec<usize>,
    /// Seconds from trace start.
    pub step_times: Vec<f64>,
}

impl WalkingEpisode {
    pub fn steps(&self) -> usize {
        self.step_indices.len()
    }

    pub fn step_series(&self, rate_hz: f64) -> StepSeries {
        StepSeries::from_indices(&self.step_indices, rate_hz)
    }
}

/// Gravity-free, band-passed acceleration magnitude.
pub fn preprocess(trace: &AccelerometerTrace, cfg: &TugConfig) -> Vec<f64> {
    let rate = trace.sample_rate_hz;
    let magnitude: Vec<f64> = trace
        .samples
        .iter()
        .map(|[x, y, z]| (x * x + y * y + z * z).sqrt() - cfg.gravity)
        .collect();
    let sos = filter::Sos::bandpass(cfg.band_low_hz, cfg.band_high_hz, rate);
    sos.filtfilt(&magnitude, rate.round() as usize)
}

fn check_trace(trace: &AccelerometerTrace) -> Result<(), AnalyticError> {
    let rate = trace.sample_rate_hz;
    if !(rate.is_finite() && rate >= MIN_SAMPLE_RATE_HZ) {
        return Err(AnalyticError::Schema(format!(
            "sample rate {rate} Hz is below {MIN_SAMPLE_RATE_HZ} Hz"
        )));
    }
    if trace.duration_secs() < 1.0 {
        return Err(AnalyticError::EmptyInput(format!(
            "trace of {:.3} s is shorter than 1 s",
            trace.duration_secs()
        )));
    }
    if trace.samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AnalyticError::Schema("non-finite sample".into()));
    }
    Ok(())
}

pub fn detect_steps(
    trace: &AccelerometerTrace,
    cfg: &TugConfig,
) -> Result<Vec<WalkingEpisode>, AnalyticError> {
    check_trace(trace)?;
    let rate = trace.sample_rate_hz;
    let signal = preprocess(trace, cfg);
    let min_gap = (cfg.min_step_gap_secs * rate).ceil() as usize;
    let peaks = peaks::find_peaks(&signal, cfg.min_prominence, min_gap);
    let max_gap = cfg.episode_gap_secs * rate;

    let groups = group_peaks(&peaks, max_gap);
    // Drop weak peaks, then regroup: removing an edge peak can split or
    // shorten a bout.
    let strong: Vec<usize> = groups
        .iter()
        .flat_map(|g| {
            let prom: Vec<f64> = g.iter().map(|&p| peaks::prominence(&signal, p)).collect();
            let mut sorted = prom.clone();
            sorted.sort_by(f64::total_cmp);
            let floor = cfg.min_relative_prominence * sorted[sorted.len() / 2];
            g.iter().zip(prom).filter(move |(_, v)| *v >= floor).map(|(&p, _)| p)
        })
        .collect();
    Ok(group_peaks(&strong, max_gap)
        .into_iter()
        .filter(|g| g.len() >= cfg.min_steps.max(2))
        .map(|g| WalkingEpisode {
            start_index: g[0],
            end_index: g[g.len() - 1],
            step_times: g.iter().map(|&i| i as f64 / rate).collect(),
            step_indices: g,
        })
        .collect())
}

/// Splits peaks wherever consecutive ones are `max_gap` samples or more
/// apart.
fn group_peaks(peaks: &[usize], max_gap: f64) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &p in peaks {
        match groups.last_mut() {
            Some(g) if ((p - g[g.len() - 1]) as f64) < max_gap => g.push(p),
            _ => groups.push(vec![p]),
        }
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskFlag {
    GeneralElevated,
    PdElevated,
    StrokeElevated,
}

impl RiskFlag {
    pub const ALL: [RiskFlag; 3] = [
        RiskFlag::GeneralElevated,
        RiskFlag::PdElevated,
        RiskFlag::StrokeElevated,
    ];

    /// Inclusive cutoff in seconds.
    pub fn threshold(self) -> f64 {
        match self {
            RiskFlag::GeneralElevated => 13.5,
            RiskFlag::PdElevated => 11.5,
            RiskFlag::StrokeElevated => 14.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RiskFlag::GeneralElevated => "general_elevated",
            RiskFlag::PdElevated => "pd_elevated",
            RiskFlag::StrokeElevated => "stroke_elevated",
        }
    }
}

pub fn risk_flags(tug_seconds: f64) -> BTreeSet<RiskFlag> {
    RiskFlag::ALL
        .into_iter()
        .filter(|f| tug_seconds >= f.threshold())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TugPrediction {
    pub episode: usize,
    pub tug_seconds: f64,
    pub risk_flags: BTreeSet<RiskFlag>,
    pub model_id: String,
    pub features: TugFeatures,
}

pub fn predict_tug(features: &TugFeatures, model: &TugModel, episode: usize) -> TugPrediction {
    let raw = model.raw_predict(features);
    let tug_seconds = if raw.is_finite() {
        raw.max(MIN_PREDICTION_SECS)
    } else {
        MIN_PREDICTION_SECS
    };
    TugPrediction {
        episode,
        tug_seconds,
        risk_flags: risk_flags(tug_seconds),
        model_id: model.model_id.clone(),
        features: *features,
    }
}

/// Mean TUG over one subject's predictions for one day.
pub fn daily_summary(
    subject_id: &hg_core::SubjectId,
    test_id: &hg_core::TestId,
    tug_seconds: &[f64],
) -> Aggregate {
    let obs: Vec<Observation> = tug_seconds
        .iter()
        .map(|&value| Observation {
            subject_id: subject_id.clone(),
            test_id: test_id.clone(),
            value,
        })
        .collect();
    aggregate(&obs).expect("single subject and test")
}

/// Detect, extract and predict for every walking episode in a trace.
pub fn analyze_trace(
    trace: &AccelerometerTrace,
    cfg: &TugConfig,
    model: &TugModel,
) -> Result<Vec<TugPrediction>, AnalyticError> {
    let episodes = detect_steps(trace, cfg)?;
    episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let features = extract_features(&ep.step_series(trace.sample_rate_hz))?;
            Ok(predict_tug(&features, model, i))
        })
        .collect()
}

pub fn result_body(predictions: &[TugPrediction], daily_mean: Option<f64>) -> Value {
    json!({
        "schema": RESULT_SCHEMA,
        "predictions": predictions,
        "daily_mean": daily_mean,
    })
}
