//! Analytic functions behind the three workers: PHQ-8 scoring, wearable
//! TUG prediction and video-derived sit-to-stand analysis.
//!
//! Everything in this crate is a pure function of its input document plus a
//! configuration; the worker crate owns I/O.

pub mod error;
pub mod phq8;
pub mod stats;
pub mod sts;
pub mod tug;

pub use error::AnalyticError;
