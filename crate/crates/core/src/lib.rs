//! Tabular Bayesian model-based reinforcement learning.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation:
//!
//! - [`mdp`]: exact discounted MDP mathematics (policy evaluation, policy
//!   iteration, visitation measures, total-variation distance).
//! - [`envs`]: N-Chain construction, validated environments and rollouts.
//! - [`bayes`]: Dirichlet / Normal-Gamma posteriors over tabular models.
//! - [`agents`]: the dual-update CDPO agent with its ablations, plus PSRL,
//!   optimism over an ensemble, and greedy mean-model planning.
//! - [`experiment`]: the iteration loop with exact regret accounting.
//!
//! File formats, persistence and the command line live in the `conserva`
//! crate.
#![no_std]

extern crate alloc;

pub mod agents;
pub mod bayes;
pub mod envs;
mod error;
pub mod experiment;
mod linalg;
pub mod mdp;
pub mod rng;

pub use error::{Error, Result};
