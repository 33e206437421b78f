//! The training loop shared by the three algorithms.
//!
//! Every step the agents act on the greedy input of the last `V` solve (plus
//! exploration), observe their costs, evaluate `Q(s_t, a_t)` and
//! `V(s_{t+1})`, agree on the three scalars needed for the TD error and store
//! the transition with its sensitivities. Once the buffer holds `T`
//! transitions an update runs every `update_period` steps. The `V(s_{t+1})`
//! solve also supplies the next greedy input, so the action at `t + 1` is
//! computed before the update at `t` is applied.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::admm::{admm_solve, AdmmState};
use crate::consensus::Network;
use crate::environment::{rng_stream, Environment, JointAction, JointState, RngPurpose};
use crate::learner::second_order::{block_diag, certify_i_plus_c, stacked_system};
use crate::learner::{
    assemble_c_distributed, centralized_second_order_direction, first_order_local_update, local_second_order,
    second_order_direction, td_error, LocalSecondOrder, RegularizerMode, ReplayBuffer, SensitivitySample,
};
use crate::linalg::is_positive_definite;
use crate::messages::{MessageKind, MessageLog};
use crate::mpc::{
    lagrangian_gradient, lagrangian_hessian, solve_q_centralized, solve_v_centralized, warn_small_weights, MpcSpec,
    PrimalDualSolution, ThetaLocal,
};
use crate::qp::{ActiveSet, QpOptions};
use crate::{Error, Result};

use super::config::{Algorithm, ExperimentConfig};
use super::metrics::{RunMetrics, UpdateEvent};

/// One row of the trajectory log.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub state: JointState,
    pub action: JointAction,
    pub local_costs: Vec<f64>,
    pub global_cost: f64,
    /// Agent 0's post-consensus values.
    pub q: f64,
    pub v_next: f64,
    pub delta: f64,
    pub updated: bool,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct ThetaSnapshot {
    /// Parameters in force after the update of this step.
    pub step: usize,
    pub thetas: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub steps: Vec<StepRecord>,
    pub thetas: Vec<ThetaSnapshot>,
    pub final_thetas: Vec<ThetaLocal>,
    pub messages: MessageLog,
}

/// Result of a `Q` or `V` evaluation as seen by the agents.
struct Eval {
    /// Each agent's local objective share.
    shares: Vec<f64>,
    solutions: Vec<PrimalDualSolution>,
    admm: Option<AdmmState>,
    active: Option<ActiveSet>,
}

impl Eval {
    fn first_inputs(&self) -> Vec<DVector<f64>> {
        self.solutions.iter().map(|p| p.u[0].clone()).collect()
    }
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    spec: MpcSpec,
    network: Network,
    env: Environment,
    opts: QpOptions,
}

impl Context<'_> {
    fn evaluate(
        &self,
        thetas: &[ThetaLocal],
        state: &[DVector<f64>],
        action: Option<&[DVector<f64>]>,
        warm: Option<&Eval>,
        shift: bool,
        log: &mut MessageLog,
    ) -> Result<Eval> {
        let topo = &self.network.topology;
        if self.cfg.algorithm.is_distributed() {
            let warm_state = match (self.cfg.admm.warm_start, warm.and_then(|w| w.admm.as_ref())) {
                (true, Some(s)) if shift => Some(s.shifted()),
                (true, Some(s)) => Some(s.clone()),
                _ => None,
            };
            let out = admm_solve(
                &self.spec,
                &self.network,
                thetas,
                state,
                action,
                &self.cfg.admm,
                &self.opts,
                warm_state.as_ref(),
                Some(log),
            )?;
            Ok(Eval {
                shares: out.shares,
                solutions: out.solutions,
                admm: Some(out.state),
                active: None,
            })
        } else {
            let active = warm.and_then(|w| w.active.as_ref());
            let c = match action {
                Some(a) => solve_q_centralized(&self.spec, topo, thetas, state, a, &self.opts, active)?,
                None => solve_v_centralized(&self.spec, topo, thetas, state, &self.opts, active)?,
            };
            Ok(Eval {
                shares: c.solutions.iter().map(|p| p.objective).collect(),
                solutions: c.solutions,
                admm: None,
                active: Some(c.active_set),
            })
        }
    }
}

/// Trains one instance and returns everything it recorded.
pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let ctx = Context {
        cfg,
        spec: cfg.mpc_spec(),
        network: cfg.network(),
        env: cfg.environment()?,
        opts: cfg.qp_options(),
    };
    let m = cfg.topology.agents();
    let alpha = cfg.alpha();
    let algo = cfg.algorithm;
    let samples = cfg.learner.samples;

    let mut init_rngs: Vec<_> = (0..m).map(|i| rng_stream(seed, RngPurpose::InitialState, i)).collect();
    let mut noise_rngs: Vec<_> = (0..m).map(|i| rng_stream(seed, RngPurpose::Noise, i)).collect();
    let mut explore_rngs: Vec<_> = (0..m).map(|i| rng_stream(seed, RngPurpose::Exploration, i)).collect();
    let mut replay_rng = rng_stream(seed, RngPurpose::Replay, 0);

    let mut thetas = cfg.initial_thetas();
    let mut log = MessageLog::new(cfg.output.message_log);
    let mut buffer = ReplayBuffer::new(cfg.learner.buffer);
    let mut metrics = RunMetrics::default();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();
    if cfg.output.theta_every > 0 {
        snapshots.push(ThetaSnapshot {
            step: 0,
            thetas: thetas.iter().map(ThetaLocal::flatten).collect(),
        });
    }

    let mut state = ctx.env.sample_initial_state(&mut init_rngs);
    let timer = Instant::now();
    let mut policy = ctx.evaluate(&thetas, &state, None, None, false, &mut log)?;
    metrics.times.policy += timer.elapsed().as_secs_f64();
    let mut q_prev: Option<Eval> = None;
    let (lb, ub) = (&cfg.mpc.input_lb, &cfg.mpc.input_ub);
    let mut discount = 1.0;

    for t in 0..cfg.steps {
        log.set_epoch(t as u64);
        if let Some(p) = cfg.initial_state.reset_period {
            if t > 0 && t % p == 0 {
                state = ctx.env.sample_initial_state(&mut init_rngs);
                let timer = Instant::now();
                policy = ctx.evaluate(&thetas, &state, None, Some(&policy), false, &mut log)?;
                metrics.times.policy += timer.elapsed().as_secs_f64();
            }
        }
        let greedy = policy.first_inputs();
        let action: JointAction = greedy
            .iter()
            .zip(explore_rngs.iter_mut())
            .map(|(g, rng)| cfg.learner.exploration.explore(g, t, lb, ub, rng))
            .collect();
        let outcome = ctx.env.step(&state, &action, &mut noise_rngs)?;

        let timer = Instant::now();
        // Q(s_t, a_t) starts from the V(s_t) iterate, which solved the same
        // state; centralized solves reuse the previous Q active set
        let warm_q = if algo.is_distributed() {
            Some(&policy)
        } else {
            q_prev.as_ref()
        };
        let q_eval = ctx.evaluate(&thetas, &state, Some(&action), warm_q, false, &mut log)?;
        metrics.times.q_eval += timer.elapsed().as_secs_f64();
        let timer = Instant::now();
        let warm_v = if algo.is_distributed() {
            Some(&q_eval)
        } else {
            Some(&policy)
        };
        let v_eval = ctx.evaluate(&thetas, &outcome.next_state, None, warm_v, true, &mut log)?;
        metrics.times.policy += timer.elapsed().as_secs_f64();

        let timer = Instant::now();
        // (Q, V, L) as held by each agent
        let agreed: Vec<[f64; 3]> = if algo.is_distributed() {
            let local: Vec<Vec<f64>> = (0..m)
                .map(|i| vec![q_eval.shares[i], v_eval.shares[i], outcome.local_costs[i]])
                .collect();
            let sums = ctx.network.sum(&local, Some((&mut log, MessageKind::GacTdScalars)))?;
            sums.iter().map(|s| [s[0], s[1], s[2] / m as f64]).collect()
        } else {
            let q: f64 = q_eval.shares.iter().sum();
            let v: f64 = v_eval.shares.iter().sum();
            vec![[q, v, outcome.global_cost]; m]
        };
        let deltas: Vec<f64> = agreed
            .iter()
            .map(|[q, v, l]| td_error(*l, cfg.mpc.gamma, *v, *q))
            .collect();
        metrics.times.consensus += timer.elapsed().as_secs_f64();

        let timer = Instant::now();
        let gradients: Vec<DVector<f64>> = (0..m)
            .map(|i| lagrangian_gradient(&ctx.spec, &thetas[i], &q_eval.solutions[i]))
            .collect();
        let hessians: Vec<DMatrix<f64>> = if algo.is_second_order() {
            (0..m)
                .map(|i| lagrangian_hessian(&ctx.spec, &thetas[i], &q_eval.solutions[i]))
                .collect()
        } else {
            vec![DMatrix::zeros(0, 0); m]
        };
        metrics.times.sensitivity += timer.elapsed().as_secs_f64();
        buffer.push(SensitivitySample {
            deltas: deltas.clone(),
            gradients,
            hessians,
        });

        let mut updated = false;
        let mut skipped = false;
        if buffer.len() >= samples && (t + 1) % cfg.learner.update_period == 0 {
            let timer = Instant::now();
            let idx = buffer
                .sample_indices(samples, &mut replay_rng)
                .expect("buffer holds enough transitions");
            let event = update(&ctx, &mut thetas, &buffer, &idx, alpha, t, &mut log)?;
            metrics.times.update += timer.elapsed().as_secs_f64();
            updated = !event.skipped;
            skipped = event.skipped;
            if skipped {
                log::warn!(
                    "step {t}: update skipped ({})",
                    event.reason.as_deref().unwrap_or("unknown")
                );
            }
            metrics.updates.push(event);
            if updated {
                for (i, th) in thetas.iter().enumerate() {
                    warn_small_weights(i, th);
                }
            }
        }
        if cfg.output.theta_every > 0 && (t + 1) % cfg.output.theta_every == 0 {
            snapshots.push(ThetaSnapshot {
                step: t + 1,
                thetas: thetas.iter().map(ThetaLocal::flatten).collect(),
            });
        }

        log::debug!(
            "step {t}: cost {:.6} q {:.6} v' {:.6} delta {:.6}{}",
            outcome.global_cost,
            agreed[0][0],
            agreed[0][1],
            deltas[0],
            if updated { " (updated)" } else { "" }
        );
        metrics.td_error.push(deltas[0]);
        metrics.stage_cost.push(outcome.global_cost);
        metrics.discounted_return += discount * outcome.global_cost;
        discount *= cfg.mpc.gamma;
        steps.push(StepRecord {
            t,
            state: std::mem::replace(&mut state, outcome.next_state.clone()),
            action,
            local_costs: outcome.local_costs,
            global_cost: outcome.global_cost,
            q: agreed[0][0],
            v_next: agreed[0][1],
            delta: deltas[0],
            updated,
            skipped,
        });
        state = outcome.next_state;
        q_prev = Some(q_eval);
        policy = v_eval;
    }
    Ok(RunOutput {
        algorithm: algo,
        seed,
        metrics,
        steps,
        thetas: snapshots,
        final_thetas: thetas,
        messages: log,
    })
}

fn skip_event(step: usize, mode: &str, sigmas: Vec<f64>, err: &Error) -> UpdateEvent {
    UpdateEvent {
        step,
        skipped: true,
        reason: Some(err.to_string()),
        direction_norms: Vec::new(),
        sigmas,
        mode: mode.to_string(),
        certificates: None,
    }
}

/// One parameter update; singular systems skip the update instead of
/// failing the run.
fn update(
    ctx: &Context<'_>,
    thetas: &mut [ThetaLocal],
    buffer: &ReplayBuffer,
    idx: &[usize],
    alpha: f64,
    step: usize,
    log: &mut MessageLog,
) -> Result<UpdateEvent> {
    let cfg = ctx.cfg;
    let m = thetas.len();
    let structure = &cfg.mpc.structure;
    let topo = &ctx.network.topology;
    let samples: Vec<&SensitivitySample> = idx.iter().map(|&k| buffer.get(k)).collect();
    let grads = |i: usize| samples.iter().map(|s| &s.gradients[i]).collect::<Vec<_>>();
    let hess = |i: usize| samples.iter().map(|s| &s.hessians[i]).collect::<Vec<_>>();
    let deltas = |i: usize| samples.iter().map(|s| s.deltas[i]).collect::<Vec<_>>();
    let mode_name = match cfg.learner.regularizer {
        RegularizerMode::PosDef => "posdef",
        RegularizerMode::NonSingular => "nonsingular",
    };

    let flat: Vec<DVector<f64>> = thetas.iter().map(ThetaLocal::flatten).collect();
    let mut new_flat: Vec<DVector<f64>>;
    let mut event = UpdateEvent {
        step,
        skipped: false,
        reason: None,
        direction_norms: Vec::new(),
        sigmas: Vec::new(),
        mode: mode_name.to_string(),
        certificates: None,
    };

    match cfg.algorithm {
        Algorithm::Dfo => {
            event.mode = "first_order".into();
            new_flat = (0..m)
                .map(|i| first_order_local_update(&flat[i], &grads(i), &deltas(i), alpha))
                .collect();
            event.direction_norms = (0..m)
                .map(|i| {
                    if alpha > 0.0 {
                        (&new_flat[i] - &flat[i]).norm() / alpha
                    } else {
                        0.0
                    }
                })
                .collect();
        }
        Algorithm::Dso | Algorithm::Cso => {
            let mut locals: Vec<LocalSecondOrder> = Vec::with_capacity(m);
            for i in 0..m {
                match local_second_order(&grads(i), &hess(i), &deltas(i), cfg.learner.regularizer) {
                    Ok(l) => locals.push(l),
                    Err(e @ Error::SingularUpdate { .. }) => return Ok(skip_event(step, mode_name, Vec::new(), &e)),
                    Err(e) => return Err(e),
                }
            }
            event.sigmas = locals.iter().map(|l| l.sigma).collect();
            let directions: Vec<DVector<f64>> = if cfg.algorithm == Algorithm::Dso {
                let cs = assemble_c_distributed(
                    &locals.iter().map(|l| l.c_local.clone()).collect::<Vec<_>>(),
                    &ctx.network,
                    Some(log),
                )?;
                let mut out = Vec::with_capacity(m);
                for i in 0..m {
                    let d = DVector::from_vec(deltas(i));
                    match second_order_direction(&locals[i], &cs[i], &d) {
                        Ok(v) => out.push(v),
                        Err(e @ Error::SingularUpdate { .. }) => {
                            return Ok(skip_event(step, mode_name, event.sigmas.clone(), &e))
                        }
                        Err(e) => return Err(e),
                    }
                }
                if cfg.learner.certify {
                    event.certificates = Some(certificates(&locals, &cs[0], &samples, &deltas(0)));
                }
                out
            } else {
                let t = samples.len();
                let global_g: Vec<DVector<f64>> = samples
                    .iter()
                    .map(|s| {
                        DVector::from_iterator(
                            flat.iter().map(|f| f.len()).sum(),
                            s.gradients.iter().flat_map(|g| g.iter().copied()),
                        )
                    })
                    .collect();
                let global_h: Vec<DMatrix<f64>> = samples.iter().map(|s| block_diag(&s.hessians)).collect();
                let lambda = DVector::from_iterator(
                    global_g[0].len(),
                    locals
                        .iter()
                        .zip(&flat)
                        .flat_map(|(l, f)| std::iter::repeat_n(l.sigma, f.len())),
                );
                let d = match centralized_second_order_direction(&global_g, &global_h, &deltas(0), &lambda) {
                    Ok(d) => d,
                    Err(e @ Error::SingularUpdate { .. }) => {
                        return Ok(skip_event(step, mode_name, event.sigmas.clone(), &e))
                    }
                    Err(e) => return Err(e),
                };
                if cfg.learner.certify {
                    let c = locals
                        .iter()
                        .map(|l| l.c_local.clone())
                        .fold(DMatrix::zeros(t, t), |a, b| a + b);
                    event.certificates = Some(certificates(&locals, &c, &samples, &deltas(0)));
                }
                let mut out = Vec::with_capacity(m);
                let mut at = 0;
                for f in &flat {
                    out.push(d.rows(at, f.len()).into_owned());
                    at += f.len();
                }
                out
            };
            event.direction_norms = directions.iter().map(|d| d.norm()).collect();
            new_flat = flat.iter().zip(&directions).map(|(f, d)| f - d * alpha).collect();
        }
    }
    for (i, f) in new_flat.iter_mut().enumerate() {
        cfg.learner.theta_box.project(f);
        thetas[i] = ThetaLocal::unflatten(structure, topo.degree(i), f)?;
    }
    Ok(event)
}

/// Positive definiteness of every local kernel, of `I + C` and of the
/// stacked system. The last one is assembled centrally and serves only as an
/// audit.
fn certificates(
    locals: &[LocalSecondOrder],
    c: &DMatrix<f64>,
    samples: &[&SensitivitySample],
    deltas: &[f64],
) -> [bool; 3] {
    let local_ok = locals.iter().all(|l| l.certified_posdef);
    let ipc = certify_i_plus_c(c);
    let n: usize = locals.iter().map(|l| l.k.nrows()).sum();
    let global_g: Vec<DVector<f64>> = samples
        .iter()
        .map(|s| DVector::from_iterator(n, s.gradients.iter().flat_map(|g| g.iter().copied())))
        .collect();
    let global_h: Vec<DMatrix<f64>> = samples.iter().map(|s| block_diag(&s.hessians)).collect();
    let lambda = DVector::from_iterator(n, locals.iter().flat_map(|l| std::iter::repeat_n(l.sigma, l.k.nrows())));
    let stacked = is_positive_definite(&stacked_system(&global_g, &global_h, deltas, &lambda));
    [local_ok, ipc, stacked]
}
