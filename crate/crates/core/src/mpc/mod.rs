//! The parameterized distributed MPC scheme used as Q-function approximator.
//!
//! Agent `i` contributes
//!
//! ```text
//! F_i = V0 + sum_{k<N} f'[x(k); u(k)] + 1/2 gamma^k ((Q'x(k))^2 + (R'u(k))^2 + omega'sigma(k))
//! ```
//!
//! subject to `x(k+1) = A x(k) + B u(k) + sum_j A_ij x_j(k) + b`, soft state
//! bounds `s_lb + x_lb - sigma <= x <= s_ub + x_ub + sigma`, hard input bounds
//! and `x(0) = s`. `Q(s, a)` additionally fixes `u(0) = a`; `V(s)` leaves it
//! free and its first input is the greedy policy.

pub mod block;
pub mod central;
pub mod sensitivity;
pub mod solution;
pub mod theta;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use central::{solve_q_centralized, solve_v_centralized, CentralSolve};
pub use sensitivity::{lagrangian_gradient, lagrangian_hessian};
pub use solution::PrimalDualSolution;
pub use theta::{InitialModel, ModelStructure, ThetaLayout, ThetaLocal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSpec {
    pub horizon: usize,
    pub gamma: f64,
    pub state_lb: Vec<f64>,
    pub state_ub: Vec<f64>,
    pub input_lb: Vec<f64>,
    pub input_ub: Vec<f64>,
    pub structure: ModelStructure,
}

impl MpcSpec {
    pub fn validate(&self) -> Result<()> {
        self.structure.validate()?;
        let (n, m) = (self.structure.state_dim, self.structure.input_dim);
        if self.horizon == 0 {
            return Err(Error::Config("MPC horizon must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1]", self.gamma)));
        }
        for (name, v, len) in [
            ("state_lb", &self.state_lb, n),
            ("state_ub", &self.state_ub, n),
            ("input_lb", &self.input_lb, m),
            ("input_ub", &self.input_ub, m),
        ] {
            if v.len() != len {
                return Err(Error::Config(format!("{name} must have length {len}")));
            }
        }
        if self.input_lb.iter().zip(&self.input_ub).any(|(l, u)| !(l <= u)) {
            return Err(Error::Config("input lower bound exceeds upper bound".into()));
        }
        Ok(())
    }

    /// Clamps each input component to its bounds.
    pub fn clip_input(&self, u: &mut nalgebra::DVector<f64>) {
        for c in 0..u.len() {
            u[c] = u[c].clamp(self.input_lb[c], self.input_ub[c]);
        }
    }
}

/// Logs a warning when a quadratic weight has collapsed towards zero, where
/// the sensitivity formulas lose their regularity assumptions.
pub fn warn_small_weights(agent: usize, theta: &ThetaLocal) {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm(&theta.q) < 1e-6 {
        log::warn!("agent {agent}: ||Q_i|| = {:.3e} below 1e-6", norm(&theta.q));
    }
    if norm(&theta.r) < 1e-6 {
        log::warn!("agent {agent}: ||R_i|| = {:.3e} below 1e-6", norm(&theta.r));
    }
}
