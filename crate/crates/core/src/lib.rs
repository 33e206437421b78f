//! Distributed second-order MPC-based Q-learning.
//!
//! A network of agents with coupled linear dynamics jointly learns the
//! parameters of a structured distributed MPC scheme. The MPC optimal value
//! serves as the Q-function approximation; it is evaluated distributively
//! with consensus ADMM, scalars are agreed upon with global average
//! consensus (GAC), and parameter updates are either first-order or
//! second-order. The second-order update is decomposed into per-agent steps
//! that only need a `T x T` matrix agreed upon by consensus, and these steps
//! stack to exactly the centralized regularized Gauss-Newton step.
//!
//! Module map:
//!
//! * [`consensus`]: coupling topology, Metropolis weights, GAC.
//! * [`messages`]: neighbor-to-neighbor message log and locality audit.
//! * [`environment`]: ground-truth coupled linear network and stage costs.
//! * [`qp`]: interior-point solver for condensed soft-constrained QPs.
//! * [`mpc`]: parameterization, centralized MPC solves, sensitivities.
//! * [`admm`]: consensus ADMM evaluation of Q, V and the policy.
//! * [`learner`]: TD errors, replay buffer, first and second-order updates.
//! * [`experiment`]: configuration, training runs, sweeps, aggregation.

pub mod admm;
pub mod consensus;
pub mod environment;
pub mod error;
pub mod experiment;
pub mod learner;
pub mod linalg;
pub mod messages;
pub mod mpc;
pub mod qp;
pub mod schedule;

pub use error::{Error, Result};
