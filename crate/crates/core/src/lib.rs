//! Cooperative multi-agent Q-learning with monotonic value factorisation.
//!
//! The crate bundles everything needed to train and evaluate decentralised
//! agents whose per-agent utilities are combined into a joint action value:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, RMSprop, checkpoints
//! - [`env`]: the multi-agent environment contract and the two-step game
//! - [`combat`]: a grid-world micro-combat simulator with scripted controllers
//! - [`agents`]: shared recurrent agent networks and ε-greedy selection
//! - [`mixers`]: VDN, VDN-S, QMIX and its ablations
//! - [`learner`]: episode replay, TD targets, loss, target-network upkeep
//! - [`harness`]: configs, the train/evaluate loop, metrics and reports

pub mod agents;
pub mod combat;
pub mod env;
pub mod error;
pub mod harness;
pub mod learner;
pub mod mixers;
pub mod tensor;

pub use error::{Error, Result};
