#![allow(dead_code)]

use std::collections::BTreeMap;

use hg_analytics::tug::AccelerometerTrace;
use hg_core::Timestamp;
use hg_core::payload::{MID_HIP, MID_SHOULDER, POSE_SCHEMA, PoseDocument, PoseFrame};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const G: f64 = 9.81;

#[derive(Debug, Clone, Copy)]
pub struct Gait {
    pub cadence_hz: f64,
    pub variability_s: f64,
    pub amplitude: f64,
    pub noise: f64,
}

impl Gait {
    pub fn clean(cadence_hz: f64) -> Self {
        Self {
            cadence_hz,
            variability_s: 0.0,
            amplitude: 3.0,
            noise: 0.0,
        }
    }
}

/// One bout of walking: `(start offset s, duration s, gait)`.
pub type Bout = (f64, f64, Gait);

/// Gravity on z plus a Gaussian pulse per step. Returns the trace and the
/// true step times for each bout.
pub fn accel(rate: f64, total_s: f64, bouts: &[Bout], seed: u64) -> (AccelerometerTrace, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (total_s * rate).round() as usize;
    let mut z = vec![G; n];
    let mut truth = Vec::new();
    for &(start, dur, gait) in bouts {
        let steps = (dur * gait.cadence_hz).round() as usize;
        let jitter = Normal::new(0.0, gait.variability_s.max(1e-12)).unwrap();
        let mut t = start;
        let mut times = Vec::with_capacity(steps);
        for _ in 0..steps {
            times.push(t);
            let dt = 1.0 / gait.cadence_hz + if gait.variability_s > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
            t += dt.max(0.32);
        }
        for &tk in &times {
            let lo = ((tk - 0.3) * rate).floor().max(0.0) as usize;
            let hi = (((tk + 0.3) * rate).ceil() as usize).min(n);
            for (i, v) in z.iter_mut().enumerate().take(hi).skip(lo) {
                let u = (i as f64 / rate - tk) / 0.05;
                *v += gait.amplitude * (-0.5 * u * u).exp();
            }
        }
        truth.push(times);
    }
    let noise = bouts.iter().map(|b| b.2.noise).fold(0.0, f64::max);
    let normal = Normal::new(0.0, noise.max(1e-12)).unwrap();
    let samples = z
        .into_iter()
        .map(|zi| {
            if noise > 0.0 {
                [normal.sample(&mut rng), normal.sample(&mut rng), zi + normal.sample(&mut rng)]
            } else {
                [0.0, 0.0, zi]
            }
        })
        .collect();
    (
        AccelerometerTrace {
            sample_rate_hz: rate,
            start_time: Timestamp::from_millis(1_700_000_000_000),
            samples,
        },
        truth,
    )
}

pub fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Piecewise normalized torso height: holds and smoothstep moves.
#[derive(Debug, Clone, Default)]
pub struct Profile {
    segs: Vec<(f64, f64, f64, f64)>,
    end: f64,
}

impl Profile {
    pub fn hold(mut self, secs: f64, level: f64) -> Self {
        self.segs.push((self.end, self.end + secs, level, level));
        self.end += secs;
        self
    }

    pub fn go(mut self, secs: f64, from: f64, to: f64) -> Self {
        self.segs.push((self.end, self.end + secs, from, to));
        self.end += secs;
        self
    }

    /// A rise from 0 to 1 with a plateau of each given length at evenly
    /// spaced levels inside the hysteresis band.
    pub fn rise_with_plateaus(mut self, plateaus: &[f64], rise: f64) -> Self {
        let k = plateaus.len();
        let mut levels = vec![0.0];
        levels.extend((0..k).map(|i| 0.3 + 0.4 * (i + 1) as f64 / (k + 1) as f64));
        levels.push(1.0);
        for i in 0..levels.len() - 1 {
            let (a, b) = (levels[i], levels[i + 1]);
            self = self.go((rise * (b - a)).max(0.35), a, b);
            if i < k {
                self = self.hold(plateaus[i], b);
            }
        }
        self
    }

    pub fn cycles(mut self, k: usize, rise: f64, hold: f64) -> Self {
        self = self.hold(hold, 0.0);
        for _ in 0..k {
            self = self.go(rise, 0.0, 1.0).hold(hold, 1.0).go(rise, 1.0, 0.0).hold(hold, 0.0);
        }
        self
    }

    pub fn duration(&self) -> f64 {
        self.end
    }

    pub fn at(&self, t: f64) -> f64 {
        for &(s, e, a, b) in &self.segs {
            if t >= s && t < e {
                return if a == b { a } else { a + (b - a) * smoothstep((t - s) / (e - s)) };
            }
        }
        self.segs.last().map_or(0.0, |s| s.3)
    }

    pub fn sample(&self, fps: f64) -> (Vec<f64>, Vec<f64>) {
        let n = (self.end * fps) as usize;
        let t: Vec<f64> = (0..n).map(|i| i as f64 / fps).collect();
        let h = t.iter().map(|&x| self.at(x)).collect();
        (t, h)
    }
}

/// Sitting: shoulder y 300, hip y 400; standing 150 px higher.
pub fn pose_from_heights(t: &[f64], h: &[f64], fps: f64, noise_px: f64, seed: u64) -> PoseDocument {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_px.max(1e-12)).unwrap();
    let mut jitter = || if noise_px > 0.0 { normal.sample(&mut rng) } else { 0.0 };
    let frames = t
        .iter()
        .zip(h)
        .map(|(&t, &h)| {
            let lift = 150.0 * h;
            let mut keypoints = BTreeMap::new();
            keypoints.insert(MID_SHOULDER.to_string(), [320.0, 300.0 - lift + jitter(), 0.95]);
            keypoints.insert(MID_HIP.to_string(), [322.0, 400.0 - lift + jitter(), 0.9]);
            PoseFrame { t, keypoints }
        })
        .collect();
    PoseDocument {
        schema: POSE_SCHEMA.into(),
        fps,
        frames,
    }
}

pub fn map_pose(doc: &PoseDocument, f: impl Fn([f64; 3]) -> [f64; 3]) -> PoseDocument {
    let mut out = doc.clone();
    for frame in &mut out.frames {
        for kp in frame.keypoints.values_mut() {
            *kp = f(*kp);
        }
    }
    out
}
