use nalgebra::DVector;

use crate::mpc::theta::ThetaLocal;
use crate::mpc::MpcSpec;

/// One agent's primal-dual point of the MPC problem.
///
/// Sign conventions of the local Lagrangian:
///
/// ```text
/// L = F + sum_k lambda(k+1)' (x(k+1) - A x(k) - B u(k) - sum_j A_ij x_j(k) - b)
///       + sum_k mu_lower(k)' (s_lb + x_lb - sigma(k) - x(k))
///       + sum_k mu_upper(k)' (x(k) - s_ub - x_ub - sigma(k))
///       - sum_k mu_sigma(k)' sigma(k) + input bound terms
/// ```
#[derive(Debug, Clone)]
pub struct PrimalDualSolution {
    /// `x(0..=N)`.
    pub x: Vec<DVector<f64>>,
    /// `u(0..N)`.
    pub u: Vec<DVector<f64>>,
    pub sigma: Vec<DVector<f64>>,
    /// Neighbor trajectories `x_j(0..N)` as seen by this agent, neighbors in
    /// ascending order.
    pub copies: Vec<Vec<DVector<f64>>>,
    /// `lambda[k]` multiplies the constraint defining `x(k)`; `lambda[0]`
    /// belongs to `x(0) = s` and `lambda[N]` is zero.
    pub lambda: Vec<DVector<f64>>,
    pub mu_lower: Vec<DVector<f64>>,
    pub mu_upper: Vec<DVector<f64>>,
    pub mu_sigma: Vec<DVector<f64>>,
    pub mu_input_lower: Vec<DVector<f64>>,
    pub mu_input_upper: Vec<DVector<f64>>,
    /// Multiplier of `u(0) = a` when the action is fixed.
    pub action_multiplier: Option<DVector<f64>>,
    /// `F_i` at this point.
    pub objective: f64,
    /// Some inequality has both a near-zero value and a near-zero multiplier.
    pub degenerate: bool,
}

impl PrimalDualSolution {
    pub fn weakly_active(&self, spec: &MpcSpec, th: &ThetaLocal, first_free_step: usize, tol: f64) -> bool {
        let weak = |h: f64, mu: f64| h.abs() < tol && mu.abs() < tol;
        let n = spec.structure.state_dim;
        for k in 0..spec.horizon {
            for c in 0..n {
                let lo = spec.state_lb[c] + th.x_lb[c] - self.sigma[k][c] - self.x[k][c];
                let up = self.x[k][c] - spec.state_ub[c] - th.x_ub[c] - self.sigma[k][c];
                if weak(lo, self.mu_lower[k][c])
                    || weak(up, self.mu_upper[k][c])
                    || weak(self.sigma[k][c], self.mu_sigma[k][c])
                {
                    return true;
                }
            }
            if k >= first_free_step {
                for c in 0..spec.structure.input_dim {
                    if weak(spec.input_lb[c] - self.u[k][c], self.mu_input_lower[k][c])
                        || weak(self.u[k][c] - spec.input_ub[c], self.mu_input_upper[k][c])
                    {
                        return true;
                    }
                }
            }
        }
        false
    }
}
