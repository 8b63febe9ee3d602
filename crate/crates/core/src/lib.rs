//! Dynamic-ensemble particle filtering.
//!
//! A bank of candidate linear measurement models is re-weighted online:
//! each step flattens the previous model posterior with a forgetting
//! exponent, scores every candidate by its particle-approximated marginal
//! likelihood, and mixes the per-candidate particle weights by the updated
//! posterior. Candidate generation (channel dropout and weight
//! perturbation), a Kalman baseline, data generators and evaluation
//! metrics round out the library; the `dyensemble` binary drives the
//! experiment scenarios.

pub mod baselines;
pub mod candidate_gen;
pub mod data_gen;
pub mod ensemble_engine;
pub mod error;
pub mod evaluation;
pub mod numeric;
pub mod particle_core;
pub mod scenario;
pub mod state_space;

pub use error::{Error, Result};
