//! Core types for the Health Guardian clinical task manager.
//!
//! Everything here is a plain value type: the entity model shared by the
//! service, the datastore, the workers and the simulator, the upload payload
//! schemas, and the data preparation stage that runs before any analytic sees
//! a datapoint.

pub mod dataprep;
pub mod error;
pub mod ids;
pub mod model;
pub mod payload;
pub mod time;
pub mod validate;

pub use error::{ErrorCode, HgError, Result};
pub use ids::*;
pub use time::{Clock, ManualClock, SystemClock, TimeOfDay, Timestamp};
