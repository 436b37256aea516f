//! Stateless HTTP teacher scoring and a routed, load-balanced client.
//!
//! Each teacher runs as an independent service exposing `POST /v1/score` and
//! `GET /v1/health`. The client resolves a prompt's domain to a teacher via a
//! routing table, then walks that teacher's endpoint pool in a shuffled
//! round-robin order, failing over to the next endpoint on transport errors.

pub mod client;
pub mod error;
pub mod routing;
pub mod server;
pub mod wire;

pub use client::{ClientConfig, TeacherClient};
pub use error::ServingError;
pub use routing::{RoundRobin, RoutingTable};
pub use server::{router, serve_blocking, spawn, ServiceHandle};
pub use wire::{ErrorBody, HealthResponse, ScoreRequest, ScoreResponse};
