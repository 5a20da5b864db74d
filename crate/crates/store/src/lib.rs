//! Persistence for the platform: entities and results in SQLite, file
//! payloads in a content-addressed object store, and the job queue.

mod data;
mod db;
mod entities;
pub mod objects;
mod occurrences;
pub mod queue;
mod results;

pub use data::Ingested;
pub use db::{Db, Store};
pub use entities::{Credential, RuleRun, TOKEN_PREFIX, TestRef, VaultEntry, hash_token};
pub use objects::{FsObjectStore, MemObjectStore, ObjectStore};
pub use occurrences::OccurrenceFilter;
pub use queue::{Job, JobState, Outcome, QueueConfig, QueueStats};
pub use results::ResultFilter;
