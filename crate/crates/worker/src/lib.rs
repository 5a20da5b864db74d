//! The standard analytic worker: claim a job, load its datapoints, run a
//! pure analytic, submit one result per datapoint and ack.
//!
//! Workers talk to the task manager through a [`Backend`]. [`HttpBackend`]
//! is what deployed workers use; [`InProcess`] calls a [`Service`] directly
//! and exists for tests and single-process setups.
//!
//! [`Service`]: hg_ctm::Service

mod analytic;
mod backend;
mod run;

pub use analytic::{Analytic, Item, JobInput, Phq8Analytic, ResultDoc, StsAnalytic, TugAnalytic, standard_analytic};
pub use backend::{Backend, HttpBackend, InProcess};
pub use run::{Backoff, RunOptions, RunReport, WorkerDescriptor, run_worker};
