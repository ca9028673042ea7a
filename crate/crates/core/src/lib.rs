//! Relation-aware credit assignment for cooperative multi-agent Q-learning.

pub mod agentnet;
pub mod arena;
pub mod error;
pub mod harness;
pub mod learner;
pub mod numerics;
pub mod relmix;

pub use error::{Error, Result};
