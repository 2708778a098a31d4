//! Imitation learning by maximum-likelihood state-action distribution matching.
//!
//! The agent learns a Gaussian policy whose stationary state-action distribution
//! matches a set of demonstrations. The gradient of the log stationary state
//! distribution is estimated from samples of a long-term predecessor model: two
//! conditional masked autoregressive flows, one over predecessor states and one
//! over predecessor actions, trained on time-reversed transitions drawn from a
//! replay buffer with geometrically distributed gaps.
//!
//! Small tabular MDPs come with exact oracles (stationary distribution,
//! reversed kernels, discounted predecessor distribution, finite-difference
//! gradients) that every estimator in this crate is checked against.
//!
//! Module map:
//!
//! - [`env`]: environments, trajectories, and ergodic wrapping of episodes
//! - [`demos`]: scripted expert, sparsification, normalization, demo files
//! - [`replay`]: replay buffer and geometric-gap training triples
//! - [`nn`]: reverse-mode tape, MLPs, Adam, clipping, checkpoints
//! - [`flow`]: conditional MADE conditioners and MAF stacks
//! - [`policy`]: Gaussian MLP policy and the tabular softmax policy
//! - [`gpril`]: predecessor-model and policy updates, the training loop
//! - [`oracle`]: exact tabular ground truth
//! - [`cli`]: the command surface behind the `gpril` binary

pub mod cli;
pub mod demos;
pub mod env;
mod error;
pub mod flow;
pub mod gpril;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod replay;

pub use error::{Error, Result};
