//! Hybrid value estimation for offline reinforcement learning on tabular
//! MDPs.

pub mod dataset;
pub mod error;
pub mod mdp;
pub mod par;
pub mod rng;
pub mod scenarios;
pub mod learning;
pub mod hve;
pub mod oracle;
pub mod ope;
pub mod mohve;
pub mod verify;
pub mod cli;

pub use error::{HveError, Result};
