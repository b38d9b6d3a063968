//! Score-based multi-class classification with abstention.
//!
//! * [`losses`]: abstention loss, comp-sum surrogates, two-stage loss.
//! * [`hypothesis`]: linear / MLP scorers and their SGD trainers.
//! * [`consistency`]: conditional-risk oracles and consistency-bound checks
//!   over finite discrete problems.
//! * [`finite_sample`]: Rademacher estimates and the high-probability bound.
//! * [`data_io`]: CSV, problem specs, synthetic recipes, model and report files.

pub mod consistency;
pub mod data_io;
pub mod error;
pub mod finite_sample;
pub mod hypothesis;
pub mod losses;

pub use error::{Error, Result};
