//! HTTP front end for running imperceptibility studies with a recruiting
//! platform, plus a client that drives it with simulated participants.

pub mod api;
pub mod campaign;
pub mod client;
pub mod config;
pub mod server;

pub use api::{router, AppState, ErrorBody, ItemDescriptor};
pub use client::{HttpPlatform, RetryPolicy};
pub use config::{CompletionCode, CompletionCodes, Outcome, ServiceConfig};
pub use server::{open_engine, run, serve, ServerHandle, ServiceError};
