//! Derivatives of an agent's local Lagrangian in its own parameters, at a
//! fixed primal-dual point. By the envelope argument the stacked gradients
//! equal `grad_theta Q` at the optimum.

use nalgebra::{DMatrix, DVector};

use crate::mpc::solution::PrimalDualSolution;
use crate::mpc::theta::ThetaLocal;
use crate::mpc::MpcSpec;

/// Value of the local Lagrangian (sign conventions in
/// [`PrimalDualSolution`]). Input-bound and initial-condition terms do not
/// depend on `theta` and are left out.
pub fn lagrangian_value(spec: &MpcSpec, th: &ThetaLocal, p: &PrimalDualSolution) -> f64 {
    let s = &spec.structure;
    let a = th.a_matrix(s);
    let b = th.b_matrix(s);
    let bias = DVector::from_column_slice(&th.b);
    let a_nb: Vec<DMatrix<f64>> = (0..th.degree()).map(|pos| th.a_neighbor_matrix(s, pos)).collect();
    let mut total = crate::mpc::block::local_cost(spec, th, &p.x, &p.u, &p.sigma);
    for k in 0..spec.horizon {
        let mut g = &p.x[k + 1] - &a * &p.x[k] - &b * &p.u[k] - &bias;
        for (pos, m) in a_nb.iter().enumerate() {
            g -= m * &p.copies[pos][k];
        }
        total += p.lambda[k + 1].dot(&g);
        for c in 0..s.state_dim {
            total += p.mu_lower[k][c] * (spec.state_lb[c] + th.x_lb[c] - p.sigma[k][c] - p.x[k][c]);
            total += p.mu_upper[k][c] * (p.x[k][c] - spec.state_ub[c] - th.x_ub[c] - p.sigma[k][c]);
            total -= p.mu_sigma[k][c] * p.sigma[k][c];
        }
    }
    total
}

/// `d L_i / d theta_i`, in the flat layout of [`ThetaLocal`].
pub fn lagrangian_gradient(spec: &MpcSpec, th: &ThetaLocal, p: &PrimalDualSolution) -> DVector<f64> {
    let s = &spec.structure;
    let n = s.state_dim;
    let m = s.input_dim;
    let lay = s.layout(th.degree());
    let mut g = DVector::zeros(lay.len);
    let q = DVector::from_column_slice(&th.q);
    let r = DVector::from_column_slice(&th.r);
    g[lay.v0] = 1.0;
    let mut disc = 1.0;
    for k in 0..spec.horizon {
        let x = &p.x[k];
        let u = &p.u[k];
        let lam = &p.lambda[k + 1];
        let qx = q.dot(x);
        let ru = r.dot(u);
        for c in 0..n {
            g[lay.x_lb.start + c] += p.mu_lower[k][c];
            g[lay.x_ub.start + c] -= p.mu_upper[k][c];
            g[lay.b.start + c] -= lam[c];
            g[lay.f.start + c] += x[c];
            g[lay.q.start + c] += disc * qx * x[c];
            g[lay.omega.start + c] += 0.5 * disc * p.sigma[k][c];
        }
        for c in 0..m {
            g[lay.f.start + n + c] += u[c];
            g[lay.r.start + c] += disc * ru * u[c];
        }
        for (e, &(row, col)) in s.a.iter().enumerate() {
            g[lay.a.start + e] -= lam[row] * x[col];
        }
        for (pos, range) in lay.a_neighbor.iter().enumerate() {
            for (e, &(row, col)) in s.a_neighbor.iter().enumerate() {
                g[range.start + e] -= lam[row] * p.copies[pos][k][col];
            }
        }
        for (e, &(row, col)) in s.b.iter().enumerate() {
            g[lay.b_in.start + e] -= lam[row] * u[col];
        }
        disc *= spec.gamma;
    }
    g
}

/// `d^2 L_i / d theta_i^2` at a fixed primal-dual point. Only the `Q` and `R`
/// blocks are nonzero.
pub fn lagrangian_hessian(spec: &MpcSpec, th: &ThetaLocal, p: &PrimalDualSolution) -> DMatrix<f64> {
    let s = &spec.structure;
    let lay = s.layout(th.degree());
    let mut h = DMatrix::zeros(lay.len, lay.len);
    let mut disc = 1.0;
    for k in 0..spec.horizon {
        let x = &p.x[k];
        let u = &p.u[k];
        for a in 0..s.state_dim {
            for b in 0..s.state_dim {
                h[(lay.q.start + a, lay.q.start + b)] += disc * x[a] * x[b];
            }
        }
        for a in 0..s.input_dim {
            for b in 0..s.input_dim {
                h[(lay.r.start + a, lay.r.start + b)] += disc * u[a] * u[b];
            }
        }
        disc *= spec.gamma;
    }
    h
}
