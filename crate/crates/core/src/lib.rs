//! Simulator for bandwidth-reservation updates along a vehicle route.
//!
//! A route crosses a sequence of base-station segments. Bandwidth for every
//! segment is reserved up front from one of several operators whose spot
//! prices move over time. An agent may switch operators (paying a partial
//! cancellation fee) and must fix under- or overbooked segments before the
//! handoff. The crate provides the price book, the cost ledger, the
//! environment, Q-learning agents with their networks, and an exhaustive
//! oracle for small instances.
//!
//! Network and optimizer code is generic over [`scalar::Scalar`]; the aliases
//! below name the two supported precisions.

pub mod agents;
pub mod cost_model;
pub mod environment;
pub mod error;
pub mod price_data;
pub mod qnet;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};

pub type QNetwork32 = qnet::QNetwork<f32>;
pub type QNetwork64 = qnet::QNetwork<f64>;
pub type AdamState32 = qnet::AdamState<f32>;
pub type AdamState64 = qnet::AdamState<f64>;
pub type Checkpoint32 = qnet::Checkpoint<f32>;
pub type Checkpoint64 = qnet::Checkpoint<f64>;
pub type TrainOutcome32 = training::TrainOutcome<f32>;
pub type TrainOutcome64 = training::TrainOutcome<f64>;
/// Money accounting runs in double precision.
pub type CostBreakdown = cost_model::CostBreakdown<f64>;
