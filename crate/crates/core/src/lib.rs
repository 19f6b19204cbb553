//! Continual-learning domain-tuning of a tiny masked language model.
//!
//! The crate pretrains a small BERT-style encoder on a synthetic source
//! domain, continues training on a target domain under one of several
//! forgetting-mitigation strategies, and measures what was forgotten and
//! what was transferred.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod strategies;
pub mod trainer;

pub use error::{Error, Result};
