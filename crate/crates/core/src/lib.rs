//! Popularity-bias evaluation and debiasing harness for LLM-based
//! recommendation.
//!
//! The pipeline runs: [`ingest`] (load, filter, temporal split) →
//! [`popularity`] (head/tail items, P/N users) → [`promptgen`] → [`recclient`]
//! (live endpoint or simulator) → [`matcher`] (titles to catalog ids) →
//! [`metrics`] → [`report`]. [`pipeline`] wires the stages together from a
//! single [`pipeline::RunConfig`].

pub mod ids;
pub mod ingest;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod popularity;
pub mod promptgen;
pub mod recclient;
pub mod report;
pub mod synth;

pub use ids::{ItemId, UserId};
