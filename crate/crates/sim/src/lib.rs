//! A simulated fleet of study subjects and their devices.
//!
//! [`synth_phq8`], [`synth_accel`] and [`synth_pose`] produce payloads
//! together with the ground truth they were generated from, so analytics can
//! be checked against it. [`run_fleet`] drives a test-mode server through
//! virtual days: every device polls, flips its compliance coin, performs the
//! delivered tests and uploads.

mod fleet;
mod profile;
mod synth;

pub use fleet::{
    DAILY_MOOD, Device, EVERYONE, FleetOptions, FleetOutcome, FleetPlan, GroundTruthLog, LOW_MOOD, MOBILITY,
    Reconciliation, SIT_TO_STAND, Scenario, ServerCheck, SimReport, SubjectReport, Truth, TruthEntry, reconcile,
    run_fleet, server_check, setup_study,
};
pub use profile::{GaitProfile, StsProfile, SubjectProfile, sample_profiles};
pub use synth::{
    AccelOptions, AccelSynth, Phq8Synth, Plateau, PoseOptions, PoseSynth, PoseTruth, TruthTransition, synth_accel,
    synth_phq8, synth_pose, true_tug_seconds, tug_corpus,
};
