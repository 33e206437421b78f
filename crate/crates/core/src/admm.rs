//! Consensus ADMM evaluation of the distributed MPC problem.
//!
//! Agent `i` solves a local problem over its own inputs and copies of its
//! neighbors' state trajectories. Only the state components that can enter a
//! coupling matrix (see [`ModelStructure::coupling_columns`]) are copied. For
//! each owner `j` and step `k < N` the copies held by `j` itself and by its
//! neighbors must agree with a consensus value `z_j(k)`:
//!
//! ```text
//! x-update:  local QP with rho/2 ||x - z + y||^2 on own states and copies
//! z-update:  owner averages (copy + y) over all holders
//! y-update:  y += copy - z
//! ```
//!
//! Holders send `copy + y` to the owner and the owner sends `z` back, so all
//! traffic is between neighbors and carries only trajectory values.
//!
//! [`ModelStructure::coupling_columns`]: crate::mpc::ModelStructure::coupling_columns

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::consensus::Network;
use crate::messages::{MessageKind, MessageLog};
use crate::mpc::block::{Block, ConsensusPenalty};
use crate::mpc::{MpcSpec, PrimalDualSolution, ThetaLocal};
use crate::qp::{ActiveSet, QpOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    pub iterations: usize,
    pub rho: f64,
    pub warm_start: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            iterations: 100,
            rho: 0.5,
            warm_start: true,
        }
    }
}

/// Consensus values, scaled duals and local active sets; persists between
/// solves for warm starting.
#[derive(Debug, Clone)]
pub struct AdmmState {
    /// `z[j][k]` for owner `j`, steps `0..N` (full state dimension; only
    /// consensus components are meaningful).
    pub z: Vec<Vec<DVector<f64>>>,
    /// Scaled duals of agent `i`'s own-trajectory constraints.
    pub y_own: Vec<Vec<DVector<f64>>>,
    /// Scaled duals of agent `i`'s copies, neighbors ascending.
    pub y_copy: Vec<Vec<Vec<DVector<f64>>>>,
    pub active_sets: Vec<Option<ActiveSet>>,
    pub iteration: usize,
}

impl AdmmState {
    pub fn cold(network: &Network, n: usize, horizon: usize) -> Self {
        let m = network.agents();
        let zeros = vec![DVector::zeros(n); horizon];
        AdmmState {
            z: vec![zeros.clone(); m],
            y_own: vec![zeros.clone(); m],
            y_copy: (0..m)
                .map(|i| vec![zeros.clone(); network.topology.degree(i)])
                .collect(),
            active_sets: vec![None; m],
            iteration: 0,
        }
    }

    /// Moves every trajectory one step forward, repeating the last step.
    pub fn shifted(&self) -> Self {
        fn shift(t: &[DVector<f64>]) -> Vec<DVector<f64>> {
            let mut out: Vec<DVector<f64>> = t[1..].to_vec();
            out.push(t[t.len() - 1].clone());
            out
        }
        AdmmState {
            z: self.z.iter().map(|t| shift(t)).collect(),
            y_own: self.y_own.iter().map(|t| shift(t)).collect(),
            y_copy: self
                .y_copy
                .iter()
                .map(|c| c.iter().map(|t| shift(t)).collect())
                .collect(),
            // the shifted problem has a different active pattern; the local
            // solver corrects stale guesses
            active_sets: self.active_sets.clone(),
            iteration: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    /// `F_i` at each agent's final local solution.
    pub shares: Vec<f64>,
    pub solutions: Vec<PrimalDualSolution>,
    /// `sqrt(sum ||copy - z||^2)` over all consensus constraints.
    pub primal_residual: f64,
    /// `rho * sqrt(sum ||z - z_prev||^2)` over all holders.
    pub dual_residual: f64,
    pub state: AdmmState,
}

impl AdmmOutcome {
    pub fn first_inputs(&self) -> Vec<DVector<f64>> {
        self.solutions.iter().map(|p| p.u[0].clone()).collect()
    }
}

/// Runs a fixed number of consensus ADMM iterations. `action` selects the
/// `Q` mode; `None` solves for `V` and the policy.
#[allow(clippy::too_many_arguments)]
pub fn admm_solve(
    spec: &MpcSpec,
    network: &Network,
    thetas: &[ThetaLocal],
    state: &[DVector<f64>],
    action: Option<&[DVector<f64>]>,
    cfg: &AdmmConfig,
    qp_opts: &QpOptions,
    warm: Option<&AdmmState>,
    mut log: Option<&mut MessageLog>,
) -> Result<AdmmOutcome> {
    if cfg.iterations == 0 {
        return Err(Error::Config("ADMM needs at least one iteration".into()));
    }
    if !(cfg.rho > 0.0) {
        return Err(Error::Config(format!("ADMM penalty must be positive, got {}", cfg.rho)));
    }
    let topo = &network.topology;
    let agents = topo.agents();
    let n = spec.structure.state_dim;
    let horizon = spec.horizon;
    let comps = spec.structure.coupling_columns();
    let mut st = match warm {
        Some(w) if w.z.len() == agents => w.clone(),
        _ => AdmmState::cold(network, n, horizon),
    };
    st.iteration = 0;
    let traj_len = horizon * n;
    let coupled = !comps.is_empty() && agents > 1;
    if let Some(l) = log.as_deref_mut() {
        l.next_call();
    }

    let mut solutions: Vec<PrimalDualSolution> = Vec::new();
    let (mut primal, mut dual) = (0.0, 0.0);
    for _ in 0..cfg.iterations {
        // local minimization, all agents against the same z and y
        let snapshot = &st;
        let results = network.scheduler.map(agents, |i| {
            let nbs = topo.neighbors(i);
            let penalty = ConsensusPenalty {
                rho: cfg.rho,
                components: comps.clone(),
                own_target: (coupled && !nbs.is_empty()).then(|| {
                    (0..horizon)
                        .map(|k| &snapshot.z[i][k] - &snapshot.y_own[i][k])
                        .collect()
                }),
                copy_targets: nbs
                    .iter()
                    .enumerate()
                    .map(|(p, &j)| {
                        (0..horizon)
                            .map(|k| &snapshot.z[j][k] - &snapshot.y_copy[i][p][k])
                            .collect()
                    })
                    .collect(),
            };
            let block = Block {
                spec,
                topology: topo,
                thetas,
                members: vec![i],
                state,
                action,
                consensus: Some(&penalty),
            };
            block
                .solve(qp_opts, snapshot.active_sets[i].as_ref())
                .map_err(|e| Error::LocalSubproblem {
                    agent: i,
                    source: Box::new(e),
                })
        });
        let mut next_solutions = Vec::with_capacity(agents);
        for (i, r) in results.into_iter().enumerate() {
            let r = r?;
            st.active_sets[i] = Some(r.active_set);
            next_solutions.push(r.solutions.into_iter().next().expect("single-agent block"));
        }
        solutions = next_solutions;
        st.iteration += 1;
        if !coupled {
            // without consensus constraints one pass is exact
            break;
        }

        // holders -> owners: copy + y
        if let Some(l) = log.as_deref_mut() {
            l.next_round();
            for i in 0..agents {
                for &j in topo.neighbors(i) {
                    l.send(i, j, MessageKind::AdmmCopy, traj_len);
                }
            }
        }
        let mut dual_sq = 0.0;
        let mut new_z = st.z.clone();
        for j in 0..agents {
            let holders = 1 + topo.degree(j);
            for k in 0..horizon {
                for &c in &comps {
                    let mut acc = solutions[j].x[k][c] + st.y_own[j][k][c];
                    for &i in topo.neighbors(j) {
                        let p = topo.neighbors(i).iter().position(|&x| x == j).unwrap();
                        acc += solutions[i].copies[p][k][c] + st.y_copy[i][p][k][c];
                    }
                    let z = acc / holders as f64;
                    let dz = z - st.z[j][k][c];
                    dual_sq += holders as f64 * dz * dz;
                    new_z[j][k][c] = z;
                }
            }
        }
        st.z = new_z;
        // owners -> holders: z
        if let Some(l) = log.as_deref_mut() {
            l.next_round();
            for j in 0..agents {
                for &i in topo.neighbors(j) {
                    l.send(j, i, MessageKind::AdmmConsensus, traj_len);
                }
            }
        }
        let mut primal_sq = 0.0;
        for i in 0..agents {
            for k in 0..horizon {
                for &c in &comps {
                    if topo.degree(i) > 0 {
                        let r = solutions[i].x[k][c] - st.z[i][k][c];
                        st.y_own[i][k][c] += r;
                        primal_sq += r * r;
                    }
                    for (p, &j) in topo.neighbors(i).iter().enumerate() {
                        let r = solutions[i].copies[p][k][c] - st.z[j][k][c];
                        st.y_copy[i][p][k][c] += r;
                        primal_sq += r * r;
                    }
                }
            }
        }
        primal = primal_sq.sqrt();
        dual = cfg.rho * dual_sq.sqrt();
    }
    Ok(AdmmOutcome {
        shares: solutions.iter().map(|p| p.objective).collect(),
        solutions,
        primal_residual: primal,
        dual_residual: dual,
        state: st,
    })
}

/// Per-agent result of a distributed evaluation.
#[derive(Debug, Clone)]
pub struct DistributedEval {
    /// Each agent's post-consensus estimate of the global value.
    pub values: Vec<f64>,
    pub outcome: AdmmOutcome,
}

fn agree(network: &Network, shares: &[f64], log: Option<&mut MessageLog>) -> Result<Vec<f64>> {
    let local: Vec<Vec<f64>> = shares.iter().map(|&s| vec![s]).collect();
    let summed = network.sum(&local, log.map(|l| (l, MessageKind::GacValue)))?;
    Ok(summed.into_iter().map(|v| v[0]).collect())
}

/// `Q_theta(s, a)` held by every agent: ADMM followed by a sum over the
/// local objective shares.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_q_distributed(
    spec: &MpcSpec,
    network: &Network,
    thetas: &[ThetaLocal],
    state: &[DVector<f64>],
    action: &[DVector<f64>],
    cfg: &AdmmConfig,
    qp_opts: &QpOptions,
    warm: Option<&AdmmState>,
    mut log: Option<&mut MessageLog>,
) -> Result<DistributedEval> {
    let outcome = admm_solve(
        spec,
        network,
        thetas,
        state,
        Some(action),
        cfg,
        qp_opts,
        warm,
        log.as_deref_mut(),
    )?;
    let values = agree(network, &outcome.shares, log)?;
    Ok(DistributedEval { values, outcome })
}

/// `V_theta(s)` held by every agent; each agent's policy action is the first
/// input of its own final local solution.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_v_distributed(
    spec: &MpcSpec,
    network: &Network,
    thetas: &[ThetaLocal],
    state: &[DVector<f64>],
    cfg: &AdmmConfig,
    qp_opts: &QpOptions,
    warm: Option<&AdmmState>,
    mut log: Option<&mut MessageLog>,
) -> Result<DistributedEval> {
    let outcome = admm_solve(
        spec,
        network,
        thetas,
        state,
        None,
        cfg,
        qp_opts,
        warm,
        log.as_deref_mut(),
    )?;
    let values = agree(network, &outcome.shares, log)?;
    Ok(DistributedEval { values, outcome })
}
