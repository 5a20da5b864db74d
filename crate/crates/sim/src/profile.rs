use hg_core::{HgError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitProfile {
    pub cadence_hz: f64,
    /// Standard deviation of each step interval, seconds.
    pub step_variability: f64,
    pub preferred_walk_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StsProfile {
    pub cycle_period_s: f64,
    /// Probability that a rise contains a plateau.
    pub plateau_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub raw_id: String,
    pub age: u32,
    /// Latent depression level on the PHQ-8 item scale.
    pub latent: f64,
    pub gait: GaitProfile,
    pub sts: StsProfile,
    pub compliance_prob: f64,
    pub seed: u64,
}

impl SubjectProfile {
    pub fn check(&self) -> Result<()> {
        let bad = |what: &str| Err(HgError::validation(format!("profile {}: {what}", self.raw_id)));
        if !(0.0..=3.0).contains(&self.latent) {
            return bad("latent must be in [0, 3]");
        }
        if !(0.0..=1.0).contains(&self.compliance_prob) {
            return bad("compliance_prob must be in [0, 1]");
        }
        if !(self.gait.cadence_hz > 0.0 && self.gait.cadence_hz <= 4.0) {
            return bad("cadence_hz must be in (0, 4]");
        }
        if !(0.0..=0.2).contains(&self.gait.step_variability) {
            return bad("step_variability must be in [0, 0.2]");
        }
        if !(self.gait.preferred_walk_secs >= 5.0) {
            return bad("preferred_walk_secs must be at least 5");
        }
        if !(self.sts.cycle_period_s >= 2.0) {
            return bad("cycle_period_s must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.sts.plateau_rate) {
            return bad("plateau_rate must be in [0, 1]");
        }
        Ok(())
    }

    /// The `index`-th subject of a fleet. Each index draws from its own
    /// ChaCha stream, so a subject's profile does not depend on fleet size.
    pub fn sample(master_seed: u64, index: usize, compliance: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(index as u64 + 1);
        Self {
            raw_id: format!("sim-{index:04}"),
            age: rng.random_range(55..=85),
            latent: rng.random_range(0.0..2.5),
            gait: GaitProfile {
                cadence_hz: rng.random_range(1.4..2.2),
                step_variability: rng.random_range(0.0..0.03),
                preferred_walk_secs: rng.random_range(30.0..60.0),
            },
            sts: StsProfile {
                cycle_period_s: rng.random_range(5.0..8.0),
                plateau_rate: rng.random_range(0.0..0.4),
            },
            compliance_prob: compliance,
            seed: rng.random(),
        }
    }
}

pub fn sample_profiles(master_seed: u64, n: usize, compliance: f64) -> Vec<SubjectProfile> {
    (0..n).map(|i| SubjectProfile::sample(master_seed, i, compliance)).collect()
}
