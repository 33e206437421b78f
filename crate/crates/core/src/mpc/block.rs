//! Condensing of the MPC scheme for a block of agents.
//!
//! A block is either the whole network (the centralized problem) or a single
//! agent whose neighbors' trajectories enter through local copy variables
//! (an ADMM subproblem). States are eliminated through the dynamics so the
//! remaining decision vector holds only inputs and copies; the result is a
//! [`SoftBoxQp`]. After solving, states are re-simulated and the dynamics
//! multipliers are recovered with a backward adjoint recursion, which gives
//! the full primal-dual point of the uncondensed problem.

use nalgebra::{DMatrix, DVector};

use crate::consensus::Topology;
use crate::mpc::solution::PrimalDualSolution;
use crate::mpc::theta::ThetaLocal;
use crate::mpc::MpcSpec;
use crate::qp::{self, ActiveSet, QpOptions, SoftBoxQp, SoftBoxSolution};
use crate::{Error, Result};

/// Quadratic pull `rho/2 ||x - target||^2` on the consensus components of
/// the block member's own trajectory and of its neighbor copies, for steps
/// `0..N`.
#[derive(Debug, Clone)]
pub struct ConsensusPenalty {
    pub rho: f64,
    /// State components that take part in consensus.
    pub components: Vec<usize>,
    /// Targets for the own trajectory; `None` when no neighbor holds a copy.
    pub own_target: Option<Vec<DVector<f64>>>,
    /// Targets per neighbor (ascending), `N` steps each.
    pub copy_targets: Vec<Vec<DVector<f64>>>,
}

pub struct Block<'a> {
    pub spec: &'a MpcSpec,
    pub topology: &'a Topology,
    pub thetas: &'a [ThetaLocal],
    pub members: Vec<usize>,
    pub state: &'a [DVector<f64>],
    pub action: Option<&'a [DVector<f64>]>,
    pub consensus: Option<&'a ConsensusPenalty>,
}

#[derive(Debug, Clone)]
struct Affine {
    coef: DMatrix<f64>,
    off: DVector<f64>,
}

impl Affine {
    fn constant(v: DVector<f64>, nw: usize) -> Self {
        Affine {
            coef: DMatrix::zeros(v.len(), nw),
            off: v,
        }
    }

    fn eval(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.coef * w + &self.off
    }

    fn transform(&self, m: &DMatrix<f64>) -> Affine {
        Affine {
            coef: m * &self.coef,
            off: m * &self.off,
        }
    }

    fn add_assign(&mut self, other: &Affine) {
        self.coef += &other.coef;
        self.off += &other.off;
    }
}

/// Condensed problem plus the maps needed to rebuild trajectories.
pub struct Condensed {
    pub qp: SoftBoxQp,
    states: Vec<Vec<Affine>>,
    inputs: Vec<Vec<Affine>>,
    copies: Vec<Vec<Vec<Affine>>>,
    first_free_step: usize,
}

pub struct BlockSolve {
    pub solutions: Vec<PrimalDualSolution>,
    pub active_set: ActiveSet,
    pub ipm_iterations: usize,
}

struct AgentMatrices {
    a: DMatrix<f64>,
    a_nb: Vec<DMatrix<f64>>,
    b: DMatrix<f64>,
}

impl<'a> Block<'a> {
    fn matrices(&self, i: usize) -> AgentMatrices {
        let s = &self.spec.structure;
        let th = &self.thetas[i];
        AgentMatrices {
            a: th.a_matrix(s),
            a_nb: (0..self.topology.degree(i))
                .map(|p| th.a_neighbor_matrix(s, p))
                .collect(),
            b: th.b_matrix(s),
        }
    }

    fn check(&self) -> Result<()> {
        let spec = self.spec;
        let n = spec.structure.state_dim;
        let m = spec.structure.input_dim;
        for &i in &self.members {
            self.thetas[i].check(&spec.structure, self.topology.degree(i))?;
            if self.state[i].len() != n {
                return Err(Error::Dimension {
                    context: "agent state",
                    expected: n,
                    got: self.state[i].len(),
                });
            }
            if let Some(action) = self.action {
                let a = &action[i];
                if a.len() != m {
                    return Err(Error::Dimension {
                        context: "agent action",
                        expected: m,
                        got: a.len(),
                    });
                }
                for c in 0..m {
                    let (lo, hi) = (spec.input_lb[c], spec.input_ub[c]);
                    if !(a[c] >= lo && a[c] <= hi) {
                        return Err(Error::InfeasibleAction {
                            agent: i,
                            component: c,
                            value: a[c],
                            lo,
                            hi,
                        });
                    }
                }
            }
            let outside = self.topology.neighbors(i).iter().any(|j| !self.members.contains(j));
            if outside && self.consensus.is_none() {
                return Err(Error::Config(format!(
                    "agent {i} has neighbors outside the block but no copy variables"
                )));
            }
        }
        if self.consensus.is_some() && self.members.len() != 1 {
            return Err(Error::Config("consensus penalties apply to single-agent blocks".into()));
        }
        Ok(())
    }

    pub fn condense(&self) -> Result<Condensed> {
        self.check()?;
        let spec = self.spec;
        let n = spec.structure.state_dim;
        let m = spec.structure.input_dim;
        let horizon = spec.horizon;
        let first_free_step = if self.action.is_some() { 1 } else { 0 };
        let steps_free = horizon - first_free_step;

        // variable layout: inputs per member, then copies (single-member blocks)
        let mut nw = self.members.len() * steps_free * m;
        let copy_base = nw;
        let comps: &[usize] = self.consensus.map_or(&[], |c| &c.components);
        let copy_nbs: Vec<usize> = if self.consensus.is_some() {
            self.topology.neighbors(self.members[0]).to_vec()
        } else {
            Vec::new()
        };
        nw += copy_nbs.len() * horizon * comps.len();

        let mats: Vec<AgentMatrices> = self.members.iter().map(|&i| self.matrices(i)).collect();
        let pos_of = |j: usize| self.members.iter().position(|&x| x == j);

        // inputs
        let mut inputs = Vec::with_capacity(self.members.len());
        for (mi, &i) in self.members.iter().enumerate() {
            let mut traj = Vec::with_capacity(horizon);
            for k in 0..horizon {
                if k < first_free_step {
                    traj.push(Affine::constant(self.action.unwrap()[i].clone(), nw));
                } else {
                    let mut a = Affine::constant(DVector::zeros(m), nw);
                    let start = (mi * steps_free + k - first_free_step) * m;
                    for c in 0..m {
                        a.coef[(c, start + c)] = 1.0;
                    }
                    traj.push(a);
                }
            }
            inputs.push(traj);
        }
        // copies
        let mut copies: Vec<Vec<Vec<Affine>>> = vec![Vec::new(); self.members.len()];
        if let Some(cons) = self.consensus {
            for (p, _) in copy_nbs.iter().enumerate() {
                let mut traj = Vec::with_capacity(horizon);
                for k in 0..horizon {
                    let mut a = Affine::constant(cons.copy_targets[p][k].clone(), nw);
                    for (ci, &c) in comps.iter().enumerate() {
                        a.off[c] = 0.0;
                        a.coef[(c, copy_base + (p * horizon + k) * comps.len() + ci)] = 1.0;
                    }
                    traj.push(a);
                }
                copies[0].push(traj);
            }
        }
        // states
        let mut states: Vec<Vec<Affine>> = self
            .members
            .iter()
            .map(|&i| vec![Affine::constant(self.state[i].clone(), nw)])
            .collect();
        for k in 0..horizon {
            let mut next = Vec::with_capacity(self.members.len());
            for (mi, &i) in self.members.iter().enumerate() {
                let mt = &mats[mi];
                let mut x = states[mi][k].transform(&mt.a);
                x.add_assign(&inputs[mi][k].transform(&mt.b));
                x.off += DVector::from_column_slice(&self.thetas[i].b);
                for (p, &j) in self.topology.neighbors(i).iter().enumerate() {
                    let src = match pos_of(j) {
                        Some(mj) => &states[mj][k],
                        None => &copies[mi][p][k],
                    };
                    x.add_assign(&src.transform(&mt.a_nb[p]));
                }
                next.push(x);
            }
            for (mi, x) in next.into_iter().enumerate() {
                states[mi].push(x);
            }
        }

        // cost and rows
        let ns = self.members.len() * horizon * n;
        let mut h = DMatrix::zeros(nw, nw);
        let mut lin = DVector::zeros(nw);
        let mut constant = 0.0;
        let mut rows = DMatrix::zeros(ns, nw);
        let mut offset = DVector::zeros(ns);
        let mut lower = DVector::zeros(ns);
        let mut upper = DVector::zeros(ns);
        let mut penalty = DVector::zeros(ns);
        // weight/2 (v'w + s0)^2
        let add_square = |h: &mut DMatrix<f64>, lin: &mut DVector<f64>, weight: f64, v: &DVector<f64>, s0: f64| {
            h.ger(weight, v, v, 1.0);
            lin.axpy(weight * s0, v, 1.0);
            0.5 * weight * s0 * s0
        };
        let mut const_linear = 0.0;
        let mut row = 0;
        for (mi, &i) in self.members.iter().enumerate() {
            let th = &self.thetas[i];
            const_linear += th.v0;
            let fx = th.f_state(n);
            let fu = th.f_input(n);
            let q = DVector::from_column_slice(&th.q);
            let r = DVector::from_column_slice(&th.r);
            let mut disc = 1.0;
            for k in 0..horizon {
                let x = &states[mi][k];
                let u = &inputs[mi][k];
                lin += x.coef.tr_mul(&fx) + u.coef.tr_mul(&fu);
                const_linear += fx.dot(&x.off) + fu.dot(&u.off);
                constant += add_square(&mut h, &mut lin, disc, &x.coef.tr_mul(&q), q.dot(&x.off));
                constant += add_square(&mut h, &mut lin, disc, &u.coef.tr_mul(&r), r.dot(&u.off));
                for c in 0..n {
                    rows.row_mut(row).copy_from(&x.coef.row(c));
                    offset[row] = x.off[c];
                    lower[row] = spec.state_lb[c] + th.x_lb[c];
                    upper[row] = spec.state_ub[c] + th.x_ub[c];
                    penalty[row] = 0.5 * disc * th.omega[c];
                    row += 1;
                }
                disc *= spec.gamma;
            }
        }
        if let Some(cons) = self.consensus {
            let rho = cons.rho;
            if let Some(targets) = &cons.own_target {
                for k in 0..horizon {
                    let x = &states[0][k];
                    for &c in comps {
                        let v = x.coef.row(c).transpose();
                        constant += add_square(&mut h, &mut lin, rho, &v, x.off[c] - targets[k][c]);
                    }
                }
            }
            for p in 0..copy_nbs.len() {
                for k in 0..horizon {
                    for (ci, &c) in comps.iter().enumerate() {
                        let v = copy_base + (p * horizon + k) * comps.len() + ci;
                        let t = cons.copy_targets[p][k][c];
                        h[(v, v)] += rho;
                        lin[v] -= rho * t;
                        constant += 0.5 * rho * t * t;
                    }
                }
            }
        }
        let mut var_lower = DVector::from_element(nw, f64::NEG_INFINITY);
        let mut var_upper = DVector::from_element(nw, f64::INFINITY);
        for v in 0..copy_base {
            var_lower[v] = spec.input_lb[v % m];
            var_upper[v] = spec.input_ub[v % m];
        }
        Ok(Condensed {
            qp: SoftBoxQp {
                hessian: h,
                linear: lin,
                constant: constant + const_linear,
                rows,
                offset,
                lower,
                upper,
                penalty,
                var_lower,
                var_upper,
            },
            states,
            inputs,
            copies,
            first_free_step,
        })
    }

    pub fn solve(&self, opts: &QpOptions, warm: Option<&ActiveSet>) -> Result<BlockSolve> {
        let condensed = self.condense()?;
        let sol = qp::solve(&condensed.qp, opts, warm)?;
        let solutions = self.recover(&condensed, &sol);
        Ok(BlockSolve {
            solutions,
            active_set: sol.active_set,
            ipm_iterations: sol.ipm_iterations,
        })
    }

    fn recover(&self, cd: &Condensed, sol: &SoftBoxSolution) -> Vec<PrimalDualSolution> {
        let spec = self.spec;
        let n = spec.structure.state_dim;
        let m = spec.structure.input_dim;
        let horizon = spec.horizon;
        let w = &sol.w;
        let steps_free = horizon - cd.first_free_step;
        let mats: Vec<AgentMatrices> = self.members.iter().map(|&i| self.matrices(i)).collect();

        let mut out: Vec<PrimalDualSolution> = Vec::with_capacity(self.members.len());
        for (mi, &i) in self.members.iter().enumerate() {
            let th = &self.thetas[i];
            let x: Vec<DVector<f64>> = cd.states[mi].iter().map(|a| a.eval(w)).collect();
            let u: Vec<DVector<f64>> = cd.inputs[mi].iter().map(|a| a.eval(w)).collect();
            let base = mi * horizon * n;
            let slice = |v: &DVector<f64>| -> Vec<DVector<f64>> {
                (0..horizon).map(|k| v.rows(base + k * n, n).into_owned()).collect()
            };
            let mut mu_in_lo = vec![DVector::zeros(m); horizon];
            let mut mu_in_up = vec![DVector::zeros(m); horizon];
            for k in cd.first_free_step..horizon {
                let start = (mi * steps_free + k - cd.first_free_step) * m;
                mu_in_lo[k] = sol.mu_var_lower.rows(start, m).into_owned();
                mu_in_up[k] = sol.mu_var_upper.rows(start, m).into_owned();
            }
            let copies: Vec<Vec<DVector<f64>>> = if cd.copies[mi].is_empty() {
                // neighbors are block members: copies are their actual states
                self.topology
                    .neighbors(i)
                    .iter()
                    .map(|&j| {
                        let mj = self.members.iter().position(|&x| x == j).unwrap();
                        cd.states[mj][..horizon].iter().map(|a| a.eval(w)).collect()
                    })
                    .collect()
            } else {
                cd.copies[mi]
                    .iter()
                    .map(|t| t.iter().map(|a| a.eval(w)).collect())
                    .collect()
            };
            let objective = local_cost(spec, th, &x, &u, &slice(&sol.sigma));
            out.push(PrimalDualSolution {
                sigma: slice(&sol.sigma),
                mu_lower: slice(&sol.mu_lower),
                mu_upper: slice(&sol.mu_upper),
                mu_sigma: slice(&sol.mu_sigma),
                mu_input_lower: mu_in_lo,
                mu_input_upper: mu_in_up,
                lambda: vec![DVector::zeros(n); horizon + 1],
                action_multiplier: None,
                copies,
                objective,
                degenerate: false,
                x,
                u,
            });
        }

        // adjoint recursion for the dynamics multipliers
        for k in (0..horizon).rev() {
            let disc = spec.gamma.powi(k as i32);
            let mut new = Vec::with_capacity(self.members.len());
            for (mi, &i) in self.members.iter().enumerate() {
                let th = &self.thetas[i];
                let p = &out[mi];
                let q = DVector::from_column_slice(&th.q);
                let mut grad = th.f_state(n) + disc * q.dot(&p.x[k]) * &q;
                if let Some(cons) = self.consensus {
                    if let Some(t) = &cons.own_target {
                        for &c in &cons.components {
                            grad[c] += cons.rho * (p.x[k][c] - t[k][c]);
                        }
                    }
                }
                let mut lam = mats[mi].a.tr_mul(&p.lambda[k + 1]) - grad + &p.mu_lower[k] - &p.mu_upper[k];
                for (mj, &j) in self.members.iter().enumerate() {
                    if let Some(pos) = self.topology.neighbors(j).iter().position(|&x| x == i) {
                        lam += mats[mj].a_nb[pos].tr_mul(&out[mj].lambda[k + 1]);
                    }
                }
                new.push(lam);
            }
            for (mi, lam) in new.into_iter().enumerate() {
                out[mi].lambda[k] = lam;
            }
        }
        if cd.first_free_step == 1 {
            for (mi, &i) in self.members.iter().enumerate() {
                let th = &self.thetas[i];
                let p = &out[mi];
                let r = DVector::from_column_slice(&th.r);
                let grad_u = th.f_input(n) + r.dot(&p.u[0]) * &r;
                let nu = mats[mi].b.tr_mul(&p.lambda[1]) - grad_u;
                out[mi].action_multiplier = Some(nu);
            }
        }
        for (mi, &i) in self.members.iter().enumerate() {
            out[mi].degenerate = out[mi].weakly_active(spec, &self.thetas[i], cd.first_free_step, 1e-7);
        }
        out
    }
}

/// `F_i` evaluated at a primal point.
pub fn local_cost(
    spec: &MpcSpec,
    th: &ThetaLocal,
    x: &[DVector<f64>],
    u: &[DVector<f64>],
    sigma: &[DVector<f64>],
) -> f64 {
    let n = spec.structure.state_dim;
    let fx = th.f_state(n);
    let fu = th.f_input(n);
    let q = DVector::from_column_slice(&th.q);
    let r = DVector::from_column_slice(&th.r);
    let omega = DVector::from_column_slice(&th.omega);
    let mut total = th.v0;
    let mut disc = 1.0;
    for k in 0..spec.horizon {
        let qx = q.dot(&x[k]);
        let ru = r.dot(&u[k]);
        total += fx.dot(&x[k]) + fu.dot(&u[k]) + 0.5 * disc * (qx * qx + ru * ru + omega.dot(&sigma[k]));
        disc *= spec.gamma;
    }
    total
}
