//! Crowd-sourced preference-based reinforcement learning.
//!
//! Simulated users with individual rationality, myopia and noise label
//! trajectory-segment pairs; the labels are aggregated without ground truth
//! (majority vote or the spectral meta-learner), used to train a reward
//! ensemble, and the ensemble drives PPO on a tabular policy. A 1-D Gaussian
//! mixture over the spectral user weights flags minority groups.

pub mod aggregate;
pub mod cluster;
pub mod crowd;
pub mod env;
pub mod error;
pub mod experiment;
pub mod exec;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Exec;
