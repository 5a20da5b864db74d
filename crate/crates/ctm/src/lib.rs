//! The clinical task manager: study administration, cohorts, test-sets,
//! tasks and their occurrences, device polling, uploads, the rule engine
//! and the `/v1` HTTP API.

pub mod client;
pub mod http;
pub mod server;
pub mod service;

pub use client::Client;
pub use http::{AppState, ClockBody, Meta, router};
pub use server::{ServeConfig, Server, open_service, start};
pub use service::*;
