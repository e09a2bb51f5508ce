//! Stratified sampling for diverse language-model generations.
//!
//! Temperature alone does little for answer diversity when a model
//! concentrates its probability mass on one answer. This crate takes a
//! different route: ask the model itself for True/False properties that
//! split the solution space roughly in half ([`autostrat`]), forecast how
//! much of the space satisfies each property ([`estimate`]), then sample a
//! stratum from the resulting joint distribution and constrain the prompt to
//! it ([`sampler`]). The [`eval`] module measures the effect — coverage
//! recall over repeated samples, and KL divergence from the uniform answer
//! distribution when the backend can score forced continuations — and
//! [`coverageqa`] generates underspecified-question datasets from a local
//! knowledge-base dump.
//!
//! Everything runs offline against the deterministic mocks in [`backend`];
//! the same pipeline talks to any OpenAI-compatible endpoint over HTTP.

pub mod autostrat;
pub mod backend;
pub mod cache;
pub mod cli;
pub mod coverageqa;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod sampler;
pub mod strata;

pub use error::{Error, Result};
