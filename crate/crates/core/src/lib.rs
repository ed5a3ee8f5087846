//! Target-guided proactive dialogue generation.
//!
//! A small encoder–decoder transformer is steered two ways: a vocabulary
//! bias computed from the user profile and domain knowledge is added to the
//! decoder logits, and the intent keywords predicted for the next `m` turns
//! are pooled into two extra cross-attention memory rows.

pub mod backbone;
pub mod bridging;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scenario;
pub mod serve;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
