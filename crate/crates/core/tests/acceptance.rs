//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when any
//! criterion fails.
//!
//! Training-based criteria (8-10) use shortened runs; set
//! `DMPCRL_ACCEPTANCE_STEPS` to lengthen them (the full benchmark length is
//! 20000).

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dmpcrl::admm::{evaluate_q_distributed, evaluate_v_distributed, AdmmConfig};
use dmpcrl::consensus::{build_metropolis_matrix, Gac, Network, SumMode, Topology};
use dmpcrl::experiment::{self, window_median, Algorithm, ExperimentConfig, RunOutput};
use dmpcrl::learner::second_order::{
    assemble_c_distributed, block_diag, centralized_second_order_direction, local_second_order, second_order_direction,
    second_order_recursive_direction, stacked_system, LocalSecondOrder, RegularizerMode,
};
use dmpcrl::linalg::rel_err;
use dmpcrl::messages::{audit, gac_payload_per_epoch, AuditSpec};
use dmpcrl::mpc::{
    lagrangian_gradient, lagrangian_hessian, solve_q_centralized, solve_v_centralized, PrimalDualSolution, ThetaLocal,
};
use dmpcrl::schedule::Scheduler;

// pinned tolerances
const DIRECTION_EXACT_TOL: f64 = 1e-8;
const DIRECTION_GAC_TOL: f64 = 1e-6;
const DIRECTION_BUDGET: Duration = Duration::from_secs(60);
const RECURSIVE_TOL: f64 = 1e-12;
const RECURSIVE_BUDGET: Duration = Duration::from_secs(1);
const SENS_TOL: f64 = 1e-4;
const SENS_STEP: f64 = 1e-6;
const SENS_BUDGET: Duration = Duration::from_secs(300);
const ADMM_VALUE_TOL: f64 = 1e-4;
const ADMM_DUAL_TOL: f64 = 1e-3;
const ADMM_BUDGET: Duration = Duration::from_secs(10);
const GAC_SUM_TOL: f64 = 1e-8;
const GAC_MASS_TOL: f64 = 1e-10;
const ORDERING_FACTOR: f64 = 2.0;
const DFO_MAX_IMPROVEMENT: f64 = 0.2;
const CENTRAL_PROXIMITY: f64 = 0.25;
const TD_MIN_DECREASE: f64 = 0.5;
const WINDOW_FRACTION: f64 = 0.1;

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, ok: bool, detail: String) {
        println!(
            "criterion {id:>2} {} {name}: {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            self.failed.push(id);
        }
    }
}

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn chain(m: usize) -> Topology {
    if m == 1 {
        Topology::new(1, &[]).unwrap()
    } else {
        Topology::chain(m).unwrap()
    }
}

struct Instance {
    grads: Vec<Vec<DVector<f64>>>,
    hess: Vec<Vec<DMatrix<f64>>>,
    deltas: Vec<f64>,
}

fn random_instance(rng: &mut ChaCha8Rng, m: usize, n: usize, t: usize, with_hessian: bool) -> Instance {
    let grads = (0..m)
        .map(|_| {
            (0..t)
                .map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0)))
                .collect()
        })
        .collect();
    let hess = (0..m)
        .map(|_| {
            (0..t)
                .map(|_| {
                    if with_hessian {
                        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
                        &b * b.transpose()
                    } else {
                        DMatrix::zeros(n, n)
                    }
                })
                .collect()
        })
        .collect();
    let deltas = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Instance { grads, hess, deltas }
}

fn locals(inst: &Instance, mode: RegularizerMode) -> Vec<LocalSecondOrder> {
    (0..inst.grads.len())
        .map(|i| {
            let g: Vec<&DVector<f64>> = inst.grads[i].iter().collect();
            let h: Vec<&DMatrix<f64>> = inst.hess[i].iter().collect();
            local_second_order(&g, &h, &inst.deltas, mode).unwrap()
        })
        .collect()
}

fn stacked_direction(locals: &[LocalSecondOrder], network: &Network, deltas: &[f64]) -> DVector<f64> {
    let cs = assemble_c_distributed(
        &locals.iter().map(|l| l.c_local.clone()).collect::<Vec<_>>(),
        network,
        None,
    )
    .unwrap();
    let delta = DVector::from_column_slice(deltas);
    let parts: Vec<DVector<f64>> = locals
        .iter()
        .zip(&cs)
        .map(|(l, c)| second_order_direction(l, c, &delta).unwrap())
        .collect();
    DVector::from_iterator(
        parts.iter().map(|p| p.len()).sum(),
        parts.iter().flat_map(|p| p.iter().copied()),
    )
}

fn global_samples(inst: &Instance) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let m = inst.grads.len();
    let t = inst.deltas.len();
    let g = (0..t)
        .map(|s| DVector::from_vec((0..m).flat_map(|i| inst.grads[i][s].iter().copied()).collect()))
        .collect();
    let h = (0..t)
        .map(|s| block_diag(&(0..m).map(|i| inst.hess[i][s].clone()).collect::<Vec<_>>()))
        .collect();
    (g, h)
}

fn stacked_lambda(locals: &[LocalSecondOrder]) -> DVector<f64> {
    let n = locals.iter().map(|l| l.g.nrows()).sum();
    DVector::from_iterator(n, locals.iter().flat_map(|l| std::iter::repeat_n(l.sigma, l.g.nrows())))
}

/// Dense solve of the stacked regularized Gauss-Newton system.
fn dense_direction(inst: &Instance, locals: &[LocalSecondOrder]) -> DVector<f64> {
    let (g, h) = global_samples(inst);
    let lambda = stacked_lambda(locals);
    let a = stacked_system(&g, &h, &inst.deltas, &lambda);
    let mut rhs = DVector::zeros(lambda.len());
    for (gt, &d) in g.iter().zip(&inst.deltas) {
        rhs.axpy(-d, gt, 1.0);
    }
    match a.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => a.lu().solve(&rhs).unwrap(),
    }
}

fn criterion_1(r: &mut Report) {
    let timer = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_exact, mut worst_gac) = (0.0f64, 0.0f64);
    let mut per_m = std::collections::BTreeMap::new();
    let mut cases = 0;
    for k in 0..200 {
        let m = [1, 2, 3, 5][rng.gen_range(0..4)];
        let n = [1, 4, 10][rng.gen_range(0..3)];
        let t = [1, 2, 5, 15][rng.gen_range(0..4)];
        let with_hessian = k % 2 == 0;
        let mode = if k % 4 < 2 {
            RegularizerMode::PosDef
        } else {
            RegularizerMode::NonSingular
        };
        let inst = random_instance(&mut rng, m, n, t, with_hessian);
        let loc = locals(&inst, mode);
        let want = dense_direction(&inst, &loc);
        let exact = stacked_direction(&loc, &Network::new(chain(m), SumMode::Exact), &inst.deltas);
        let gac = stacked_direction(
            &loc,
            &Network::new(chain(m), SumMode::Gac { iterations: 100 }),
            &inst.deltas,
        );
        worst_exact = worst_exact.max(rel_err(&exact, &want, 1e-300));
        worst_gac = worst_gac.max(rel_err(&gac, &want, 1e-300));
        let e = per_m.entry(m).or_insert(0.0f64);
        *e = e.max(rel_err(&gac, &want, 1e-300));
        cases += 1;
    }
    let elapsed = timer.elapsed();
    let ok = worst_exact <= DIRECTION_EXACT_TOL && worst_gac <= DIRECTION_GAC_TOL && elapsed <= DIRECTION_BUDGET;
    r.line(
        1,
        "decomposed direction vs dense stacked solve",
        ok,
        format!(
            "{cases} instances, max rel err exact sums {worst_exact:.2e} (tol {DIRECTION_EXACT_TOL:.0e}), \
             100-round GAC {worst_gac:.2e} (tol {DIRECTION_GAC_TOL:.0e}), {:.2}s (budget {}s)",
            elapsed.as_secs_f64(),
            DIRECTION_BUDGET.as_secs()
        ),
    );
    let breakdown = per_m
        .iter()
        .map(|(m, e)| format!("M={m} {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    println!("   info: GAC-path error by chain length: {breakdown}");
}

fn criterion_2(r: &mut Report) {
    let timer = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_closed, mut worst_full, mut worst_central) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let m = rng.gen_range(1..=5);
        let n = rng.gen_range(1..=10);
        let inst = random_instance(&mut rng, m, n, 1, false);
        let net = Network::new(chain(m), SumMode::Exact);
        for mode in [RegularizerMode::PosDef, RegularizerMode::NonSingular] {
            let loc = locals(&inst, mode);
            let sigma = loc[0].sigma;
            let norm_sq: f64 = inst.grads.iter().map(|g| g[0].norm_squared()).sum();
            let delta = inst.deltas[0];
            let rec = DVector::from_vec(
                (0..m)
                    .flat_map(|i| {
                        second_order_recursive_direction(&inst.grads[i][0], delta, sigma, norm_sq)
                            .iter()
                            .copied()
                            .collect::<Vec<_>>()
                    })
                    .collect(),
            );
            let closed = DVector::from_vec(
                (0..m)
                    .flat_map(|i| {
                        inst.grads[i][0]
                            .iter()
                            .map(|g| -delta * g / (sigma + norm_sq))
                            .collect::<Vec<_>>()
                    })
                    .collect(),
            );
            let full = stacked_direction(&loc, &net, &inst.deltas);
            let (g, h) = global_samples(&inst);
            let central = centralized_second_order_direction(&g, &h, &inst.deltas, &stacked_lambda(&loc)).unwrap();
            worst_closed = worst_closed.max(rel_err(&rec, &closed, 1e-300));
            worst_full = worst_full.max(rel_err(&full, &rec, 1e-300));
            worst_central = worst_central.max(rel_err(&central, &rec, 1e-300));
        }
    }
    let elapsed = timer.elapsed();
    let ok = worst_closed <= RECURSIVE_TOL && worst_full <= RECURSIVE_TOL && elapsed <= RECURSIVE_BUDGET;
    r.line(
        2,
        "single-sample zero-Hessian reduction",
        ok,
        format!(
            "200 cases, recursive vs closed form {worst_closed:.2e}, vs decomposed path {worst_full:.2e} \
             (tol {RECURSIVE_TOL:.0e}), {:.3}s (budget {}s)",
            elapsed.as_secs_f64(),
            RECURSIVE_BUDGET.as_secs()
        ),
    );
    println!("   info: dense centralized solve vs recursive form {worst_central:.2e}");
}

fn default_instance() -> (ExperimentConfig, Topology) {
    let cfg = ExperimentConfig::default();
    let topo = cfg.topology.clone();
    (cfg, topo)
}

fn random_state(rng: &mut ChaCha8Rng, m: usize) -> Vec<DVector<f64>> {
    (0..m)
        .map(|_| DVector::from_column_slice(&[rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0)]))
        .collect()
}

fn random_action(rng: &mut ChaCha8Rng, m: usize) -> Vec<DVector<f64>> {
    (0..m)
        .map(|_| DVector::from_element(1, rng.gen_range(-1.0..1.0)))
        .collect()
}

fn criterion_3(r: &mut Report) {
    let timer = Instant::now();
    let (cfg, topo) = default_instance();
    let spec = cfg.mpc_spec();
    let opts = cfg.qp_options();
    let m = topo.agents();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    let (mut accepted, mut drawn) = (0, 0);
    while accepted < 50 && drawn < 500 {
        drawn += 1;
        // perturbed parameters so every block of the gradient is active
        let mut th = cfg.initial_thetas();
        for t in &mut th {
            t.v0 = rng.gen_range(-1.0..1.0);
            for v in t.x_lb.iter_mut().chain(&mut t.x_ub) {
                *v = rng.gen_range(-0.1..0.1);
            }
            for v in t.b.iter_mut().chain(&mut t.f) {
                *v = rng.gen_range(-0.1..0.1);
            }
            for v in t.q.iter_mut().chain(&mut t.r) {
                *v *= rng.gen_range(0.5..1.5);
            }
            for v in &mut t.omega {
                *v = rng.gen_range(5.0..50.0);
            }
            for v in &mut t.a {
                *v += rng.gen_range(-0.05..0.05);
            }
            for nb in &mut t.a_neighbor {
                for v in nb {
                    *v = rng.gen_range(-0.1..0.1);
                }
            }
            for v in &mut t.b_in {
                *v += rng.gen_range(-0.02..0.02);
            }
        }
        let s = random_state(&mut rng, m);
        let a = random_action(&mut rng, m);
        let base = match solve_q_centralized(&spec, &topo, &th, &s, &a, &opts, None) {
            Ok(b) => b,
            Err(_) => continue,
        };
        if base.solutions.iter().any(|p| p.degenerate) {
            continue;
        }
        let mut usable = true;
        let mut errs_g = 0.0f64;
        let mut errs_h = 0.0f64;
        'agents: for i in 0..m {
            let p: &PrimalDualSolution = &base.solutions[i];
            let g = lagrangian_gradient(&spec, &th[i], p);
            let hess = lagrangian_hessian(&spec, &th[i], p);
            let flat = th[i].flatten();
            let mut fd = DVector::zeros(flat.len());
            let mut fd_h = DMatrix::zeros(flat.len(), flat.len());
            for e in 0..flat.len() {
                let shifted = |h: f64| {
                    let mut f = flat.clone();
                    f[e] += h;
                    ThetaLocal::unflatten(&spec.structure, topo.degree(i), &f).unwrap()
                };
                let mut plus = th.clone();
                plus[i] = shifted(SENS_STEP);
                let mut minus = th.clone();
                minus[i] = shifted(-SENS_STEP);
                let qp = solve_q_centralized(&spec, &topo, &plus, &s, &a, &opts, None);
                let qm = solve_q_centralized(&spec, &topo, &minus, &s, &a, &opts, None);
                match (qp, qm) {
                    (Ok(qp), Ok(qm)) => {
                        // an active-set change inside the stencil makes Q non-smooth there
                        if qp.active_set != base.active_set || qm.active_set != base.active_set {
                            usable = false;
                            break 'agents;
                        }
                        fd[e] = (qp.value - qm.value) / (2.0 * SENS_STEP);
                    }
                    _ => {
                        usable = false;
                        break 'agents;
                    }
                }
                let col = (lagrangian_gradient(&spec, &plus[i], p) - lagrangian_gradient(&spec, &minus[i], p))
                    / (2.0 * SENS_STEP);
                fd_h.set_column(e, &col);
            }
            errs_g = errs_g.max((&fd - &g).amax() / g.amax().max(1.0));
            errs_h = errs_h.max((&fd_h - &hess).amax() / hess.amax().max(1.0));
        }
        if usable {
            accepted += 1;
            worst_g = worst_g.max(errs_g);
            worst_h = worst_h.max(errs_h);
        }
    }
    let elapsed = timer.elapsed();
    let ok = accepted == 50 && worst_g <= SENS_TOL && worst_h <= SENS_TOL && elapsed <= SENS_BUDGET;
    r.line(
        3,
        "Lagrangian gradient and Hessian vs finite differences",
        ok,
        format!(
            "{accepted} non-degenerate instances ({drawn} drawn), gradient {worst_g:.2e}, Hessian {worst_h:.2e} \
             (tol {SENS_TOL:.0e}, step {SENS_STEP:.0e}), {:.1}s (budget {}s)",
            elapsed.as_secs_f64(),
            SENS_BUDGET.as_secs()
        ),
    );
}

fn max_diff(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

fn max_abs(a: &[DVector<f64>]) -> f64 {
    a.iter().map(|x| x.amax()).fold(0.0, f64::max)
}

/// Worst relative dual error over agents: lambda and the state-bound
/// multipliers, each scaled by the centralized magnitude (at least one).
fn dual_error(d: &[PrimalDualSolution], c: &[PrimalDualSolution]) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in d.iter().zip(c) {
        for (u, v) in [
            (&x.lambda, &y.lambda),
            (&x.mu_lower, &y.mu_lower),
            (&x.mu_upper, &y.mu_upper),
        ] {
            worst = worst.max(max_diff(u, v) / max_abs(v).max(1.0));
        }
    }
    worst
}

struct AdmmStats {
    value: f64,
    dual: f64,
    policy: f64,
    slowest: Duration,
    evaluations: usize,
}

fn admm_fidelity(th: &[ThetaLocal], cfg: &ExperimentConfig, rho: f64, states: usize, seed: u64) -> AdmmStats {
    let spec = cfg.mpc_spec();
    let opts = cfg.qp_options();
    let net = Network::new(cfg.topology.clone(), SumMode::Gac { iterations: 100 });
    let admm = AdmmConfig {
        warm_start: false,
        rho,
        ..cfg.admm
    };
    let m = net.agents();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = AdmmStats {
        value: 0.0,
        dual: 0.0,
        policy: 0.0,
        slowest: Duration::ZERO,
        evaluations: 0,
    };
    for _ in 0..states {
        let s = random_state(&mut rng, m);
        let a = random_action(&mut rng, m);

        let timer = Instant::now();
        let dv = evaluate_v_distributed(&spec, &net, th, &s, &admm, &opts, None, None).unwrap();
        st.slowest = st.slowest.max(timer.elapsed());
        let cv = solve_v_centralized(&spec, &net.topology, th, &s, &opts, None).unwrap();
        st.value = st
            .value
            .max(dv.values.iter().map(|v| (v - cv.value).abs()).fold(0.0, f64::max) / cv.value.abs().max(1e-12));
        st.dual = st.dual.max(dual_error(&dv.outcome.solutions, &cv.solutions));
        st.policy = st.policy.max(max_diff(&dv.outcome.first_inputs(), &cv.first_inputs));

        let timer = Instant::now();
        let dq = evaluate_q_distributed(&spec, &net, th, &s, &a, &admm, &opts, None, None).unwrap();
        st.slowest = st.slowest.max(timer.elapsed());
        let cq = solve_q_centralized(&spec, &net.topology, th, &s, &a, &opts, None).unwrap();
        st.value = st
            .value
            .max(dq.values.iter().map(|v| (v - cq.value).abs()).fold(0.0, f64::max) / cq.value.abs().max(1e-12));
        st.dual = st.dual.max(dual_error(&dq.outcome.solutions, &cq.solutions));
        st.evaluations += 2;
    }
    st
}

fn criterion_4(r: &mut Report) {
    let (cfg, _) = default_instance();
    let st = admm_fidelity(&cfg.initial_thetas(), &cfg, cfg.admm.rho, 10, 41);
    let ok = st.value <= ADMM_VALUE_TOL
        && st.dual <= ADMM_DUAL_TOL
        && st.policy <= ADMM_VALUE_TOL
        && st.slowest <= ADMM_BUDGET;
    r.line(
        4,
        "ADMM (rho 0.5, 100 iterations) vs centralized QP",
        ok,
        format!(
            "{} evaluations, value rel err {:.2e} (tol {ADMM_VALUE_TOL:.0e}), dual err {:.2e} (tol {ADMM_DUAL_TOL:.0e}), \
             policy err {:.2e}, slowest {:.3}s (budget {}s)",
            st.evaluations,
            st.value,
            st.dual,
            st.policy,
            st.slowest.as_secs_f64(),
            ADMM_BUDGET.as_secs()
        ),
    );
    // same protocol with the true coupling entries in the model
    let mut th = cfg.initial_thetas();
    let true_nb = cfg.dynamics.a_neighbor.clone();
    for t in &mut th {
        for nb in &mut t.a_neighbor {
            for (v, &(row, col)) in nb.iter_mut().zip(&cfg.mpc.structure.a_neighbor) {
                *v = true_nb[row][col];
            }
        }
    }
    for rho in [cfg.admm.rho, 5.0] {
        let st = admm_fidelity(&th, &cfg, rho, 10, 41);
        println!(
            "   info: true coupling in the model, rho {rho}: value rel err {:.2e}, dual err {:.2e}, policy err {:.2e}",
            st.value, st.dual, st.policy
        );
    }
}

fn criterion_5(r: &mut Report) {
    let topo = Topology::chain(3).unwrap();
    let matrix = build_metropolis_matrix(&topo);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_sum, mut worst_mass) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let d = rng.gen_range(1..=6);
        let inputs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| rng.gen_range(-10.0..10.0)).collect())
            .collect();
        let sum: Vec<f64> = (0..d).map(|k| inputs.iter().map(|v| v[k]).sum()).collect();
        let scale = sum.iter().fold(1.0f64, |a, s| a.max(s.abs()));
        let mass = |vals: &[Vec<f64>]| -> Vec<f64> { (0..d).map(|k| vals.iter().map(|v| v[k]).sum()).collect() };
        let mut gac = Gac::new(&inputs, &matrix, &topo).unwrap();
        let mass0 = mass(gac.values());
        while gac.iteration() < 100 {
            gac.step(Scheduler::Sequential, None);
            let drift = mass(gac.values())
                .iter()
                .zip(&mass0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst_mass = worst_mass.max(drift / scale);
        }
        for v in gac.values() {
            let err = v.iter().zip(&sum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst_sum = worst_sum.max(err / scale);
        }
    }
    let ok = worst_sum <= GAC_SUM_TOL && worst_mass <= GAC_MASS_TOL;
    r.line(
        5,
        "GAC on a chain of three",
        ok,
        format!(
            "100 random vectors, sum err after 100 rounds {worst_sum:.2e} (tol {GAC_SUM_TOL:.0e}), \
             worst per-round mass drift {worst_mass:.2e} (tol {GAC_MASS_TOL:.0e})"
        ),
    );
}

fn criterion_6(r: &mut Report, steps: usize) {
    let mut cfg = ExperimentConfig::default();
    cfg.algorithm = Algorithm::Dso;
    cfg.steps = steps;
    cfg.learner.regularizer = RegularizerMode::PosDef;
    cfg.learner.certify = true;
    let out = experiment::run(&cfg, 0).unwrap();
    let updates = &out.metrics.updates;
    let violations = updates
        .iter()
        .filter(|u| u.skipped || u.certificates.is_none_or(|c| !c.iter().all(|&b| b)))
        .count();
    let ok = !updates.is_empty() && violations == 0;
    r.line(
        6,
        "positive definiteness chain in posdef mode",
        ok,
        format!(
            "dso seed 0, {steps} steps, {} updates, {violations} violations (kernels, I + C, stacked system)",
            updates.len()
        ),
    );
}

fn criterion_7(r: &mut Report) {
    let base = ExperimentConfig::default();
    let t = base.learner.samples;
    let expected_update = 3 + t * (t + 1) / 2;
    let steps = t + 3;
    let mut per_m = Vec::new();
    let mut ok = true;
    for m in [2, 3, 5] {
        let mut cfg = base.clone();
        cfg.algorithm = Algorithm::Dso;
        cfg.steps = steps;
        cfg.topology = Topology::chain(m).unwrap();
        cfg.output.message_log = true;
        let out = experiment::run(&cfg, 0).unwrap();
        let payloads = gac_payload_per_epoch(out.messages.records()).unwrap();
        let update_epochs: Vec<usize> = out
            .metrics
            .updates
            .iter()
            .filter(|u| !u.skipped)
            .map(|u| u.step)
            .collect();
        for (&epoch, &p) in &payloads {
            let want = if update_epochs.contains(&(epoch as usize)) {
                expected_update
            } else {
                3
            };
            ok &= p == want;
        }
        let update_payloads: Vec<usize> = update_epochs.iter().map(|&e| payloads[&(e as u64)]).collect();
        ok &= !update_payloads.is_empty() && payloads.len() == steps;
        let spec = AuditSpec {
            trajectory_len: cfg.mpc.horizon * cfg.mpc.structure.state_dim,
            sample_count: t,
        };
        let locality = audit(out.messages.records(), &cfg.topology, &spec);
        ok &= locality.passed();
        per_m.push((m, update_payloads, locality.violations.len()));
    }
    let first = per_m[0].1.clone();
    ok &= per_m.iter().all(|(_, p, _)| p.iter().all(|&x| x == first[0]));
    let detail = per_m
        .iter()
        .map(|(m, p, v)| {
            format!(
                "M={m}: {} updates at {} scalars, {v} locality violations",
                p.len(),
                p.first().copied().unwrap_or(0)
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    r.line(
        7,
        "consensus payload per second-order update",
        ok,
        format!(
            "expected {expected_update} = {t}*{}/2 + 3 per update step, 3 otherwise; {detail}",
            t + 1
        ),
    );
}

struct Curves {
    cost_first: Vec<f64>,
    cost_last: Vec<f64>,
    td_first: Vec<f64>,
    td_last: Vec<f64>,
}

fn median(v: &[f64]) -> f64 {
    experiment::percentile(v, 50.0)
}

fn curves(runs: &[RunOutput]) -> Curves {
    let mut c = Curves {
        cost_first: vec![],
        cost_last: vec![],
        td_first: vec![],
        td_last: vec![],
    };
    for r in runs {
        let cost = r.metrics.cost_moving();
        let td = r.metrics.td_moving();
        c.cost_first.push(window_median(&cost, WINDOW_FRACTION, false));
        c.cost_last.push(window_median(&cost, WINDOW_FRACTION, true));
        c.td_first.push(window_median(&td, WINDOW_FRACTION, false));
        c.td_last.push(window_median(&td, WINDOW_FRACTION, true));
    }
    c
}

fn training_runs(algo: Algorithm, steps: usize, seeds: &[u64]) -> Vec<RunOutput> {
    let mut cfg = ExperimentConfig::default();
    cfg.algorithm = algo;
    cfg.steps = steps;
    seeds.iter().map(|&s| experiment::run(&cfg, s).unwrap()).collect()
}

fn criteria_8_to_10(r: &mut Report, steps: usize) {
    let seeds: Vec<u64> = ExperimentConfig::default().seeds;
    let timer = Instant::now();
    let dfo = curves(&training_runs(Algorithm::Dfo, steps, &seeds));
    let dso = curves(&training_runs(Algorithm::Dso, steps, &seeds));
    let cso = curves(&training_runs(Algorithm::Cso, steps, &seeds));
    println!(
        "   info: {} seeds x 3 algorithms x {steps} steps in {:.0}s; windows are the first/last {:.0}% of the 100-step moving averages",
        seeds.len(),
        timer.elapsed().as_secs_f64(),
        100.0 * WINDOW_FRACTION
    );
    for (name, c) in [("dfo", &dfo), ("dso", &dso), ("cso", &cso)] {
        println!(
            "   info: {name} median cost {:.4} -> {:.4}, median |td| {:.4} -> {:.4}",
            median(&c.cost_first),
            median(&c.cost_last),
            median(&c.td_first),
            median(&c.td_last)
        );
    }

    let dso_last = median(&dso.cost_last);
    let dfo_last = median(&dfo.cost_last);
    let dfo_improvement = 1.0 - dfo_last / median(&dfo.cost_first);
    let ok = dfo_last >= ORDERING_FACTOR * dso_last && dfo_improvement < DFO_MAX_IMPROVEMENT;
    r.line(
        8,
        "second-order beats first-order",
        ok,
        format!(
            "final cost dfo/dso = {:.2} (need >= {ORDERING_FACTOR}), dfo improvement {:.1}% (need < {:.0}%)",
            dfo_last / dso_last,
            100.0 * dfo_improvement,
            100.0 * DFO_MAX_IMPROVEMENT
        ),
    );

    let cso_last = median(&cso.cost_last);
    let gap = (dso_last - cso_last).abs() / cso_last;
    r.line(
        9,
        "distributed close to centralized",
        gap <= CENTRAL_PROXIMITY,
        format!(
            "final cost dso {dso_last:.4} vs cso {cso_last:.4}, relative gap {:.1}% (tol {:.0}%)",
            100.0 * gap,
            100.0 * CENTRAL_PROXIMITY
        ),
    );

    let dec = |c: &Curves| 1.0 - median(&c.td_last) / median(&c.td_first);
    let (d_dso, d_cso) = (dec(&dso), dec(&cso));
    r.line(
        10,
        "TD error decreases",
        d_dso >= TD_MIN_DECREASE && d_cso >= TD_MIN_DECREASE,
        format!(
            "median |td| decrease dso {:.1}%, cso {:.1}% (need >= {:.0}%)",
            100.0 * d_dso,
            100.0 * d_cso,
            100.0 * TD_MIN_DECREASE
        ),
    );
}

fn main() {
    // answer the harness protocol's listing request without running anything
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let steps = env_usize("DMPCRL_ACCEPTANCE_STEPS", 3000);
    let cert_steps = env_usize("DMPCRL_ACCEPTANCE_CERT_STEPS", 300);
    let mut r = Report { failed: vec![] };
    criterion_1(&mut r);
    criterion_2(&mut r);
    criterion_3(&mut r);
    criterion_4(&mut r);
    criterion_5(&mut r);
    criterion_6(&mut r, cert_steps);
    criterion_7(&mut r);
    criteria_8_to_10(&mut r, steps);
    if r.failed.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: failed criteria {:?}", r.failed);
        std::process::exit(1);
    }
}
