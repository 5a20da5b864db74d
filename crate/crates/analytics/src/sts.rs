//! Sit-to-stand analysis from 2D pose keypoints.

use hg_core::dataprep::{ImputeConfig, ImputePolicy, Sample, impute_gaps};
use hg_core::payload::{MID_HIP, MID_SHOULDER, PoseDocument};
use serde::{Deserialize, Serialize};
use serde_json::{Value, json};

use crate::AnalyticError;
use crate::stats::{percentile_sorted, sorted};

pub const RESULT_SCHEMA: &str = "sts.result/v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StsConfig {
    pub min_confidence: f64,
    pub min_coverage: f64,
    pub smoothing_secs: f64,
    pub sit_threshold: f64,
    pub stand_threshold: f64,
    pub min_transition_secs: f64,
    pub max_transition_secs: f64,
    /// A stall is velocity toward the target below this fraction of the
    /// transition's peak velocity.
    pub stall_fraction: f64,
    pub min_stall_secs: f64,
    pub min_signal_secs: f64,
    pub graph_hz: f64,
}

impl Default for StsConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.3,
            min_coverage: 0.8,
            smoothing_secs: 0.25,
            sit_threshold: 0.3,
            stand_threshold: 0.7,
            min_transition_secs: 0.2,
            max_transition_secs: 10.0,
            stall_fraction: 0.25,
            min_stall_secs: 0.15,
            min_signal_secs: 2.0,
            graph_hz: 10.0,
        }
    }
}

/// Normalized torso elevation, 0 at the sitting baseline and 1 standing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorsoSignal {
    pub t: Vec<f64>,
    pub torso_height: Vec<f64>,
    pub torso_phase: Vec<f64>,
    pub smoothed: bool,
    /// Set when the series had no usable spread and was mapped to 0.5.
    pub degenerate: bool,
}

impl TorsoSignal {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        match (self.t.first(), self.t.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// Builds a signal from already-normalized heights.
    pub fn from_normalized(t: Vec<f64>, height: Vec<f64>) -> Self {
        let height: Vec<f64> = height.into_iter().map(|h| h.clamp(0.0, 1.0)).collect();
        Self {
            t,
            torso_phase: height.clone(),
            torso_height: height,
            smoothed: false,
            degenerate: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    SitToStand,
    StandToSit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub kind: TransitionKind,
    pub t_start: f64,
    pub t_end: f64,
    pub duration_s: f64,
    pub hesitation_count: usize,
    #[serde(skip)]
    pub start_index: usize,
    #[serde(skip)]
    pub end_index: usize,
}

/// Centered moving average of `w` samples, shrinking at the edges.
pub fn moving_average(x: &[f64], w: usize) -> Vec<f64> {
    let n = x.len();
    let w = w.max(1);
    let lo = w / 2;
    let hi = w - lo;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..n)
        .map(|i| {
            let a = i.saturating_sub(lo);
            let b = (i + hi).min(n);
            // Summing directly keeps flat stretches exactly flat.
            if b - a <= 64 {
                x[a..b].iter().sum::<f64>() / (b - a) as f64
            } else {
                (prefix[b] - prefix[a]) / (b - a) as f64
            }
        })
        .collect()
}

/// Central differences inside, one-sided at the ends.
pub fn gradient(y: &[f64], t: &[f64]) -> Vec<f64> {
    let n = y.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1),
                i if i == n - 1 => (n - 2, n - 1),
                i => (i - 1, i + 1),
            };
            (y[b] - y[a]) / (t[b] - t[a])
        })
        .collect()
}

fn usable(frame: &hg_core::payload::PoseFrame, min_conf: f64) -> Option<f64> {
    let s = frame.keypoints.get(MID_SHOULDER)?;
    let h = frame.keypoints.get(MID_HIP)?;
    (s[2] >= min_conf && h[2] >= min_conf).then(|| -(s[1] + h[1]) / 2.0)
}

pub fn torso_signal(pose: &PoseDocument, cfg: &StsConfig) -> Result<TorsoSignal, AnalyticError> {
    let total = pose.frames.len();
    let (frame_t, accepted): (Vec<f64>, Vec<Sample>) = pose
        .frames
        .iter()
        .filter_map(|f| {
            usable(f, cfg.min_confidence)
                .map(|h| (f.t, Sample::new((f.t * 1000.0).round() as i64, h)))
        })
        .unzip();
    let coverage = if total == 0 {
        0.0
    } else {
        accepted.len() as f64 / total as f64
    };
    if accepted.len() < 2 || coverage < cfg.min_coverage {
        return Err(AnalyticError::InsufficientPose(format!(
            "{MID_SHOULDER}/{MID_HIP} usable in {}/{} frames",
            accepted.len(),
            total
        )));
    }
    let impute = ImputeConfig {
        rate_hz: pose.fps,
        policy: ImputePolicy::Linear,
        max_gap_ms: i64::MAX / 4,
    };
    let series = impute_gaps(&accepted, &impute)?;
    let mut real = frame_t.iter();
    let t: Vec<f64> = series
        .samples
        .iter()
        .map(|s| match s.imputed {
            true => s.t_ms as f64 / 1000.0,
            false => *real.next().expect("one real sample per accepted frame"),
        })
        .collect();
    let raw: Vec<f64> = series.samples.iter().map(|s| s.value).collect();

    let w = (cfg.smoothing_secs * pose.fps).ceil() as usize;
    let smooth = moving_average(&raw, w);
    let s = sorted(&smooth);
    let p5 = percentile_sorted(&s, 0.05).unwrap_or(0.0);
    let p95 = percentile_sorted(&s, 0.95).unwrap_or(0.0);
    let spread = p95 - p5;
    let degenerate = !(spread >= 1e-6);
    let height: Vec<f64> = if degenerate {
        vec![0.5; smooth.len()]
    } else {
        smooth
            .iter()
            .map(|v| ((v - p5) / spread).clamp(0.0, 1.0))
            .collect()
    };
    Ok(TorsoSignal {
        t,
        torso_phase: height.clone(),
        torso_height: height,
        smoothed: true,
        degenerate,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Posture {
    Unknown,
    Sitting,
    Standing,
}

pub fn detect_transitions(signal: &TorsoSignal, cfg: &StsConfig) -> Vec<Transition> {
    let mut out = Vec::new();
    if signal.degenerate || signal.len() < 2 || signal.duration_secs() < cfg.min_signal_secs {
        return out;
    }
    let h = &signal.torso_height;
    let mut posture = Posture::Unknown;
    let mut last_low = 0;
    let mut last_high = 0;
    for (i, &v) in h.iter().enumerate() {
        if v < cfg.sit_threshold {
            if posture == Posture::Standing {
                push_transition(&mut out, signal, cfg, TransitionKind::StandToSit, last_high, i);
            }
            posture = Posture::Sitting;
            last_low = i;
        } else if v > cfg.stand_threshold {
            if posture == Posture::Sitting {
                push_transition(&mut out, signal, cfg, TransitionKind::SitToStand, last_low, i);
            }
            posture = Posture::Standing;
            last_high = i;
        }
    }
    out
}

fn push_transition(
    out: &mut Vec<Transition>,
    signal: &TorsoSignal,
    cfg: &StsConfig,
    kind: TransitionKind,
    start: usize,
    end: usize,
) {
    let (t_start, t_end) = (signal.t[start], signal.t[end]);
    let duration_s = t_end - t_start;
    if duration_s < cfg.min_transition_secs || duration_s > cfg.max_transition_secs {
        return;
    }
    let mut tr = Transition {
        kind,
        t_start,
        t_end,
        duration_s,
        hesitation_count: 0,
        start_index: start,
        end_index: end,
    };
    tr.hesitation_count = count_hesitations(signal, &tr, cfg);
    out.push(tr);
}

/// Stalls or reversals strictly inside the transition lasting at least
/// `min_stall_secs`.
pub fn count_hesitations(signal: &TorsoSignal, tr: &Transition, cfg: &StsConfig) -> usize {
    let (a, b) = (tr.start_index, tr.end_index.min(signal.len().saturating_sub(1)));
    if b <= a + 1 {
        return 0;
    }
    let sign = match tr.kind {
        TransitionKind::SitToStand => 1.0,
        TransitionKind::StandToSit => -1.0,
    };
    let v: Vec<f64> = gradient(&signal.torso_height, &signal.t)[a..=b]
        .iter()
        .map(|x| x * sign)
        .collect();
    let t = &signal.t[a..=b];
    let peak = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return 0;
    }
    let low: Vec<bool> = v.iter().map(|&x| x < cfg.stall_fraction * peak).collect();
    let last = v.len() - 1;
    let mut count = 0;
    let mut i = 1;
    while i < last {
        if !low[i] {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < last && low[j] {
            j += 1;
        }
        if j < last && t[j] - t[i] >= cfg.min_stall_secs - 1e-9 {
            count += 1;
        }
        i = j;
    }
    count
}

/// A sit-to-stand immediately followed by a stand-to-sit.
pub fn count_cycles(transitions: &[Transition]) -> usize {
    let mut cycles = 0;
    let mut i = 0;
    while i + 1 < transitions.len() {
        if transitions[i].kind == TransitionKind::SitToStand
            && transitions[i + 1].kind == TransitionKind::StandToSit
        {
            cycles += 1;
            i += 2;
        } else {
            i += 1;
        }
    }
    cycles
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorsoGraph {
    pub t: Vec<f64>,
    pub phase: Vec<f64>,
}

/// Every `stride`-th sample plus the last one.
pub fn downsample(signal: &TorsoSignal, graph_hz: f64) -> TorsoGraph {
    let n = signal.len();
    let rate = if signal.duration_secs() > 0.0 {
        (n - 1) as f64 / signal.duration_secs()
    } else {
        graph_hz
    };
    let stride = ((rate / graph_hz).ceil() as usize).max(1);
    let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
    if n > 0 && idx.last() != Some(&(n - 1)) {
        idx.push(n - 1);
    }
    TorsoGraph {
        t: idx.iter().map(|&i| signal.t[i]).collect(),
        phase: idx.iter().map(|&i| signal.torso_phase[i]).collect(),
    }
}

/// Optional external UPDRS estimator.
pub trait UpdrsPredictor: Send + Sync {
    fn predict(&self, signal: &TorsoSignal, transitions: &[Transition]) -> Option<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsResult {
    pub transitions: Vec<Transition>,
    pub total_cycles: usize,
    pub total_hesitations: usize,
    pub torso_graph: TorsoGraph,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub updrs: Option<f64>,
}

impl StsResult {
    pub fn to_body(&self) -> Value {
        let mut body = json!({
            "schema": RESULT_SCHEMA,
            "transitions": self.transitions,
            "total_cycles": self.total_cycles,
            "total_hesitations": self.total_hesitations,
            "torso_graph": self.torso_graph,
        });
        if let Some(u) = self.updrs {
            body["updrs"] = json!(u);
        }
        body
    }
}

pub fn analyze_pose(
    pose: &PoseDocument,
    cfg: &StsConfig,
    updrs: Option<&dyn UpdrsPredictor>,
) -> Result<StsResult, AnalyticError> {
    let signal = torso_signal(pose, cfg)?;
    let transitions = detect_transitions(&signal, cfg);
    Ok(StsResult {
        total_cycles: count_cycles(&transitions),
        total_hesitations: transitions.iter().map(|t| t.hesitation_count).sum(),
        torso_graph: downsample(&signal, cfg.graph_hz),
        updrs: updrs.and_then(|p| p.predict(&signal, &transitions)),
        transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_edges_shrink() {
        let y = moving_average(&[0.0, 3.0, 6.0, 9.0], 2);
        assert_eq!(y, vec![0.0, 1.5, 4.5, 7.5]);
        assert_eq!(moving_average(&[2.0; 5], 3), vec![2.0; 5]);
    }

    #[test]
    fn gradient_matches_numpy() {
        let t = [0.0, 1.0, 2.0, 4.0];
        let y = [0.0, 1.0, 4.0, 16.0];
        assert_eq!(gradient(&y, &t), vec![1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn flat_signal_has_no_transitions() {
        let t: Vec<f64> = (0..300).map(|i| i as f64 / 30.0).collect();
        let s = TorsoSignal::from_normalized(t, vec![0.5; 300]);
        assert!(detect_transitions(&s, &StsConfig::default()).is_empty());
    }

    #[test]
    fn cycles_pair_up() {
        let mk = |kind| Transition {
            kind,
            t_start: 0.0,
            t_end: 1.0,
            duration_s: 1.0,
            hesitation_count: 0,
            start_index: 0,
            end_index: 1,
        };
        use TransitionKind::*;
        let seq = [mk(StandToSit), mk(SitToStand), mk(StandToSit), mk(SitToStand)];
        assert_eq!(count_cycles(&seq), 1);
    }
}
