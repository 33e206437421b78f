//! Centralized (monolithic) evaluation of `Q`, `V` and the greedy policy.

use nalgebra::DVector;

use crate::consensus::Topology;
use crate::mpc::block::Block;
use crate::mpc::solution::PrimalDualSolution;
use crate::mpc::theta::ThetaLocal;
use crate::mpc::MpcSpec;
use crate::qp::{ActiveSet, QpOptions};
use crate::Result;

#[derive(Debug, Clone)]
pub struct CentralSolve {
    /// Optimal value `sum_i F_i`.
    pub value: f64,
    pub solutions: Vec<PrimalDualSolution>,
    /// First inputs `u_i(0)`; the greedy action in `V` mode, the given
    /// action in `Q` mode.
    pub first_inputs: Vec<DVector<f64>>,
    pub active_set: ActiveSet,
}

fn solve_central(
    spec: &MpcSpec,
    topology: &Topology,
    thetas: &[ThetaLocal],
    state: &[DVector<f64>],
    action: Option<&[DVector<f64>]>,
    opts: &QpOptions,
    warm: Option<&ActiveSet>,
) -> Result<CentralSolve> {
    let block = Block {
        spec,
        topology,
        thetas,
        members: (0..topology.agents()).collect(),
        state,
        action,
        consensus: None,
    };
    let out = block.solve(opts, warm)?;
    let value = out.solutions.iter().map(|p| p.objective).sum();
    let first_inputs = out.solutions.iter().map(|p| p.u[0].clone()).collect();
    Ok(CentralSolve {
        value,
        solutions: out.solutions,
        first_inputs,
        active_set: out.active_set,
    })
}

/// `Q_theta(s, a)`: the monolithic problem with `u_i(0) = a_i` for all `i`.
pub fn solve_q_centralized(
    spec: &MpcSpec,
    topology: &Topology,
    thetas: &[ThetaLocal],
    state: &[DVector<f64>],
    action: &[DVector<f64>],
    opts: &QpOptions,
    warm: Option<&ActiveSet>,
) -> Result<CentralSolve> {
    solve_central(spec, topology, thetas, state, Some(action), opts, warm)
}

/// `V_theta(s)` and the greedy action `u_i*(0)`.
pub fn solve_v_centralized(
    spec: &MpcSpec,
    topology: &Topology,
    thetas: &[ThetaLocal],
    state: &[DVector<f64>],
    opts: &QpOptions,
    warm: Option<&ActiveSet>,
) -> Result<CentralSolve> {
    solve_central(spec, topology, thetas, state, None, opts, warm)
}

/// Largest KKT violation of the uncondensed monolithic problem at the given
/// per-agent points, with copies read from the neighbors' own trajectories.
/// Stationarity is measured in every primal variable, so this also checks the
/// recovered dynamics multipliers.
pub fn monolithic_kkt_residual(
    spec: &MpcSpec,
    topology: &Topology,
    thetas: &[ThetaLocal],
    state: &[DVector<f64>],
    action: Option<&[DVector<f64>]>,
    sols: &[PrimalDualSolution],
) -> f64 {
    let n = spec.structure.state_dim;
    let horizon = spec.horizon;
    let mut worst = 0.0f64;
    let mut upd = |v: f64| worst = worst.max(v.abs());
    for (i, p) in sols.iter().enumerate() {
        let th = &thetas[i];
        let a = th.a_matrix(&spec.structure);
        let b = th.b_matrix(&spec.structure);
        let q = DVector::from_column_slice(&th.q);
        let r = DVector::from_column_slice(&th.r);
        let nbs = topology.neighbors(i);
        upd((&p.x[0] - &state[i]).amax());
        for k in 0..horizon {
            let disc = spec.gamma.powi(k as i32);
            // dynamics
            let mut res = &p.x[k + 1] - &a * &p.x[k] - &b * &p.u[k] - DVector::from_column_slice(&th.b);
            for (pos, &j) in nbs.iter().enumerate() {
                res -= th.a_neighbor_matrix(&spec.structure, pos) * &sols[j].x[k];
            }
            upd(res.amax());
            // state stationarity for k >= 1
            if k >= 1 {
                let mut st = th.f_state(n) + disc * q.dot(&p.x[k]) * &q + &p.lambda[k]
                    - a.tr_mul(&p.lambda[k + 1])
                    - &p.mu_lower[k]
                    + &p.mu_upper[k];
                for &j in nbs {
                    let pos = topology.neighbors(j).iter().position(|&x| x == i).unwrap();
                    st -= thetas[j]
                        .a_neighbor_matrix(&spec.structure, pos)
                        .tr_mul(&sols[j].lambda[k + 1]);
                }
                upd(st.amax());
            }
            // input stationarity
            let mut su = th.f_input(n) + disc * r.dot(&p.u[k]) * &r - b.tr_mul(&p.lambda[k + 1]) - &p.mu_input_lower[k]
                + &p.mu_input_upper[k];
            if k == 0 {
                if let (Some(nu), Some(_)) = (&p.action_multiplier, action) {
                    su += nu;
                }
            }
            upd(su.amax());
            // slack stationarity, feasibility, complementarity
            for c in 0..n {
                upd(0.5 * disc * th.omega[c] - p.mu_lower[k][c] - p.mu_upper[k][c] - p.mu_sigma[k][c]);
                let lo = spec.state_lb[c] + th.x_lb[c] - p.sigma[k][c] - p.x[k][c];
                let up = p.x[k][c] - spec.state_ub[c] - th.x_ub[c] - p.sigma[k][c];
                for (h, mu) in [
                    (lo, p.mu_lower[k][c]),
                    (up, p.mu_upper[k][c]),
                    (-p.sigma[k][c], p.mu_sigma[k][c]),
                ] {
                    upd(h.max(0.0));
                    upd(mu.min(0.0));
                    upd(h * mu);
                }
            }
            for c in 0..spec.structure.input_dim {
                if let (0, Some(act)) = (k, action) {
                    upd(p.u[0][c] - act[i][c]);
                    continue;
                }
                let lo = spec.input_lb[c] - p.u[k][c];
                let up = p.u[k][c] - spec.input_ub[c];
                for (h, mu) in [(lo, p.mu_input_lower[k][c]), (up, p.mu_input_upper[k][c])] {
                    upd(h.max(0.0));
                    upd(mu.min(0.0));
                    upd(h * mu);
                }
            }
        }
        upd(p.lambda[horizon].amax());
    }
    worst
}
