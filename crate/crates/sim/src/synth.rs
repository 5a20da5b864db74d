use std::collections::BTreeMap;

use hg_analytics::sts::TransitionKind;
use hg_analytics::tug::{AccelerometerTrace, FEATURE_COUNT, TugConfig, detect_steps, extract_features};
use hg_core::payload::{ACCEL_SCHEMA, AccelDocument, MID_HIP, MID_SHOULDER, POSE_SCHEMA, PoseDocument, PoseFrame};
use hg_core::{HgError, Result, SubjectId, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::profile::{GaitProfile, SubjectProfile};

pub const GRAVITY: f64 = 9.81;

/// Zero-mean Gaussian noise; a zero deviation draws nothing.
fn gauss(rng: &mut impl Rng, sd: f64) -> f64 {
    if sd > 0.0 {
        Normal::new(0.0, sd).expect("finite deviation").sample(rng)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phq8Synth {
    pub answers: [u8; 8],
    pub total: u8,
}

/// Each answer is the latent level plus Gaussian noise, rounded and clipped
/// to 0..=3.
pub fn synth_phq8(profile: &SubjectProfile, sigma: f64, rng: &mut impl Rng) -> Phq8Synth {
    let mut answers = [0u8; 8];
    for a in &mut answers {
        *a = (profile.latent + gauss(rng, sigma)).round().clamp(0.0, 3.0) as u8;
    }
    Phq8Synth {
        answers,
        total: answers.iter().sum(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelOptions {
    pub rate_hz: f64,
    /// Peak of each step impulse above gravity, m/s².
    pub amplitude: f64,
    /// White noise deviation on every axis, m/s².
    pub noise: f64,
    /// Rest before and after the walk, seconds.
    pub lead_s: f64,
    pub tail_s: f64,
    pub start_time: Timestamp,
}

impl Default for AccelOptions {
    fn default() -> Self {
        Self {
            rate_hz: 50.0,
            amplitude: 3.0,
            noise: 0.05,
            lead_s: 2.0,
            tail_s: 2.0,
            start_time: Timestamp::from_millis(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccelSynth {
    pub trace: AccelerometerTrace,
    /// True impulse centers, seconds from trace start.
    pub step_times: Vec<f64>,
}

impl AccelSynth {
    pub fn to_document(&self, subject_id: &SubjectId, device_id: &str) -> AccelDocument {
        AccelDocument {
            schema: ACCEL_SCHEMA.into(),
            subject_id: subject_id.clone(),
            device_id: device_id.into(),
            sample_rate_hz: self.trace.sample_rate_hz,
            start_time: self.trace.start_time,
            units: "m/s2".into(),
            samples: self.trace.samples.clone(),
        }
    }
}

const PULSE_WIDTH_S: f64 = 0.05;
const MIN_STEP_S: f64 = 0.32;

/// Gravity on the vertical axis plus one Gaussian impulse per step.
///
/// A walk of `duration_s` has `round(duration_s * cadence)` steps. Step
/// intervals are `1 / cadence` plus Gaussian jitter with the profile's step
/// variability, never shorter than 0.32 s.
pub fn synth_accel(gait: &GaitProfile, duration_s: f64, opts: &AccelOptions, rng: &mut impl Rng) -> Result<AccelSynth> {
    if !(duration_s >= 5.0) {
        return Err(HgError::validation("walk duration must be at least 5 s"));
    }
    if !(opts.rate_hz > 0.0 && gait.cadence_hz > 0.0) {
        return Err(HgError::validation("sample rate and cadence must be > 0"));
    }
    let rate = opts.rate_hz;
    let n = ((opts.lead_s + duration_s + opts.tail_s) * rate).round() as usize;
    let steps = (duration_s * gait.cadence_hz).round() as usize;
    let mut step_times = Vec::with_capacity(steps);
    let mut t = opts.lead_s;
    for _ in 0..steps {
        step_times.push(t);
        t += (1.0 / gait.cadence_hz + gauss(rng, gait.step_variability)).max(MIN_STEP_S);
    }
    let mut z = vec![GRAVITY; n];
    for &tk in &step_times {
        let lo = ((tk - 6.0 * PULSE_WIDTH_S) * rate).floor().max(0.0) as usize;
        let hi = (((tk + 6.0 * PULSE_WIDTH_S) * rate).ceil() as usize).min(n);
        for (i, v) in z.iter_mut().enumerate().take(hi).skip(lo) {
            let u = (i as f64 / rate - tk) / PULSE_WIDTH_S;
            *v += opts.amplitude * (-0.5 * u * u).exp();
        }
    }
    let samples = z
        .into_iter()
        .map(|zi| [gauss(rng, opts.noise), gauss(rng, opts.noise), zi + gauss(rng, opts.noise)])
        .collect();
    Ok(AccelSynth {
        trace: AccelerometerTrace {
            sample_rate_hz: rate,
            start_time: opts.start_time,
            samples,
        },
        step_times,
    })
}

/// The simulator's TUG label: a fixed function of gait parameters.
pub fn true_tug_seconds(gait: &GaitProfile) -> f64 {
    2.0 + 14.0 / gait.cadence_hz + 40.0 * gait.step_variability
}

/// Feature vectors and true labels for `episodes` detected walking
/// episodes over random gaits, amplitudes and noise levels.
pub fn tug_corpus(episodes: usize, seed: u64) -> Vec<([f64; FEATURE_COUNT], f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TugConfig::default();
    let mut out = Vec::with_capacity(episodes);
    while out.len() < episodes {
        let gait = GaitProfile {
            cadence_hz: rng.random_range(1.4..2.2),
            step_variability: rng.random_range(0.0..0.05),
            preferred_walk_secs: 30.0,
        };
        let opts = AccelOptions {
            amplitude: rng.random_range(2.0..4.0),
            noise: rng.random_range(0.0..0.2),
            ..AccelOptions::default()
        };
        let walk = synth_accel(&gait, 30.0, &opts, &mut rng).expect("valid gait");
        let Ok(eps) = detect_steps(&walk.trace, &cfg) else { continue };
        for ep in eps {
            if let Ok(f) = extract_features(&ep.step_series(opts.rate_hz)) {
                out.push((f.to_array(), true_tug_seconds(&gait)));
            }
        }
    }
    out.truncate(episodes);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    /// Index of the cycle whose rise is interrupted.
    pub cycle: usize,
    pub secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseOptions {
    pub fps: f64,
    pub noise_px: f64,
    pub lead_s: f64,
    pub tail_s: f64,
    pub shoulder_sit_y: f64,
    pub hip_sit_y: f64,
    /// Upward torso travel from sitting to standing, pixels.
    pub lift_px: f64,
    pub confidence: f64,
}

impl Default for PoseOptions {
    fn default() -> Self {
        Self {
            fps: 30.0,
            noise_px: 0.3,
            lead_s: 2.0,
            tail_s: 2.0,
            shoulder_sit_y: 300.0,
            hip_sit_y: 400.0,
            lift_px: 150.0,
            confidence: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthTransition {
    pub kind: TransitionKind,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTruth {
    pub transitions: Vec<TruthTransition>,
    /// `(start, end)` of every injected plateau, seconds.
    pub plateaus: Vec<(f64, f64)>,
}

impl PoseTruth {
    pub fn count(&self, kind: TransitionKind) -> usize {
        self.transitions.iter().filter(|t| t.kind == kind).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSynth {
    pub doc: PoseDocument,
    pub truth: PoseTruth,
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Piecewise torso elevation: `(start, end, from, to)` segments.
struct Track {
    segs: Vec<(f64, f64, f64, f64)>,
    end: f64,
}

impl Track {
    fn push(&mut self, secs: f64, from: f64, to: f64) -> (f64, f64) {
        let span = (self.end, self.end + secs);
        self.segs.push((span.0, span.1, from, to));
        self.end = span.1;
        span
    }

    fn at(&self, t: f64) -> f64 {
        let i = self.segs.partition_point(|s| s.1 <= t);
        match self.segs.get(i) {
            Some(&(s, e, a, b)) if a != b => a + (b - a) * smoothstep((t - s) / (e - s)),
            Some(&(_, _, a, _)) => a,
            None => self.segs.last().map_or(0.0, |s| s.3),
        }
    }
}

/// Sit-stand-sit cycles with smoothstep moves. Each cycle spends a fifth
/// of its period rising, three tenths standing, a fifth sitting down and
/// three tenths seated. Plateaus in a rise hold at evenly spaced levels
/// between 30% and 70% elevation.
pub fn synth_pose(
    profile: &SubjectProfile,
    cycles: usize,
    plateaus: &[Plateau],
    opts: &PoseOptions,
    rng: &mut impl Rng,
) -> Result<PoseSynth> {
    if cycles == 0 {
        return Err(HgError::validation("at least one cycle is required"));
    }
    if let Some(p) = plateaus.iter().find(|p| p.cycle >= cycles || !(p.secs > 0.0)) {
        return Err(HgError::validation(format!("plateau {p:?} is outside the sequence")));
    }
    if !(opts.fps > 0.0) {
        return Err(HgError::validation("fps must be > 0"));
    }
    let period = profile.sts.cycle_period_s;
    let (move_s, hold_s) = (0.2 * period, 0.3 * period);
    let mut per_cycle: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for p in plateaus {
        per_cycle.entry(p.cycle).or_default().push(p.secs);
    }
    let mut track = Track { segs: Vec::new(), end: 0.0 };
    let mut truth = PoseTruth {
        transitions: Vec::new(),
        plateaus: Vec::new(),
    };
    track.push(opts.lead_s, 0.0, 0.0);
    for c in 0..cycles {
        let stalls = per_cycle.get(&c).map_or(&[][..], Vec::as_slice);
        let k = stalls.len();
        let mut levels = vec![0.0];
        levels.extend((0..k).map(|i| 0.3 + 0.4 * (i + 1) as f64 / (k + 1) as f64));
        levels.push(1.0);
        let rise_start = track.end;
        for i in 0..levels.len() - 1 {
            let (a, b) = (levels[i], levels[i + 1]);
            track.push((move_s * (b - a)).max(0.35), a, b);
            if i < k {
                truth.plateaus.push(track.push(stalls[i], b, b));
            }
        }
        truth.transitions.push(TruthTransition {
            kind: TransitionKind::SitToStand,
            t_start: rise_start,
            t_end: track.end,
        });
        track.push(hold_s, 1.0, 1.0);
        let (s, e) = track.push(move_s, 1.0, 0.0);
        truth.transitions.push(TruthTransition {
            kind: TransitionKind::StandToSit,
            t_start: s,
            t_end: e,
        });
        let rest = if c + 1 == cycles { opts.tail_s } else { hold_s };
        track.push(rest, 0.0, 0.0);
    }
    let n = (track.end * opts.fps).floor() as usize;
    let frames = (0..n)
        .map(|i| {
            let t = i as f64 / opts.fps;
            let lift = opts.lift_px * track.at(t);
            let keypoints = BTreeMap::from([
                (
                    MID_SHOULDER.to_string(),
                    [320.0, opts.shoulder_sit_y - lift + gauss(rng, opts.noise_px), opts.confidence],
                ),
                (
                    MID_HIP.to_string(),
                    [322.0, opts.hip_sit_y - lift + gauss(rng, opts.noise_px), opts.confidence],
                ),
            ]);
            PoseFrame { t, keypoints }
        })
        .collect();
    Ok(PoseSynth {
        doc: PoseDocument {
            schema: POSE_SCHEMA.into(),
            fps: opts.fps,
            frames,
        },
        truth,
    })
}
