//! Second-order updates: the distributed decomposition and the centralized
//! reference.
//!
//! Over a sample of `T` transitions the regularized Gauss-Newton system is
//!
//! ```text
//! (sum_t g_t g_t' - K + T Lambda) d = -sum_t delta_t g_t,   K = sum_t delta_t Hess_t
//! ```
//!
//! With `Kt_i = (T sigma_i I - K_i)^-1`, `G_i = [g_{i,t1} .. g_{i,tT}]` and
//! `C = sum_i G_i' Kt_i G_i` (a `T x T` matrix agreed by consensus), the
//! Woodbury identity gives agent `i`'s block as
//!
//! ```text
//! d_i = -Kt_i G_i (delta - (I + C)^-1 C delta)
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::consensus::Network;
use crate::linalg::{condition_number, is_positive_definite, sym_eigenvalues, symmetrize};
use crate::messages::{MessageKind, MessageLog};
use crate::{Error, Result};

/// Condition number above which a system is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;
pub const SIGMA_MIN: f64 = 1e-6;
pub const SIGMA_EPS: f64 = 1e-6;

/// Candidates tried in increasing order in [`RegularizerMode::NonSingular`]:
/// `1e-6, 1e-5, ..., 1e6`.
pub fn nonsingular_grid() -> impl Iterator<Item = f64> {
    (-6..=6).map(|e| 10f64.powi(e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerMode {
    /// `T sigma_i I - K_i` positive definite.
    PosDef,
    /// `T sigma_i I - K_i` merely nonsingular.
    NonSingular,
}

/// Picks `sigma_i` for one agent from its own `K_i`.
pub fn choose_regularizer(k: &DMatrix<f64>, samples: usize, mode: RegularizerMode) -> f64 {
    let t = samples.max(1) as f64;
    match mode {
        RegularizerMode::PosDef => {
            let lmax = sym_eigenvalues(k).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lmax = if lmax.is_finite() { lmax } else { 0.0 };
            SIGMA_MIN.max((lmax + SIGMA_EPS) / t)
        }
        RegularizerMode::NonSingular => {
            let n = k.nrows();
            for sigma in nonsingular_grid() {
                let a = DMatrix::identity(n, n) * (t * sigma) - k;
                if condition_number(&a) <= SINGULAR_CONDITION {
                    return sigma;
                }
            }
            // beyond the grid, fall back to the positive definite choice
            choose_regularizer(k, samples, RegularizerMode::PosDef)
        }
    }
}

/// `K_i = sum_t delta_t Hess_{i,t}`.
pub fn weighted_hessian(hessians: &[&DMatrix<f64>], deltas: &[f64]) -> DMatrix<f64> {
    let n = hessians.first().map_or(0, |h| h.nrows());
    let mut k = DMatrix::zeros(n, n);
    for (h, &d) in hessians.iter().zip(deltas) {
        k += *h * d;
    }
    symmetrize(&mut k);
    k
}

/// Everything agent `i` computes locally before agreeing on `C`.
#[derive(Debug, Clone)]
pub struct LocalSecondOrder {
    pub sigma: f64,
    pub k: DMatrix<f64>,
    pub k_tilde: DMatrix<f64>,
    /// `G_i`, one column per sampled transition.
    pub g: DMatrix<f64>,
    /// This agent's term `G_i' Kt_i G_i`.
    pub c_local: DMatrix<f64>,
    /// `T sigma_i I - K_i` certified positive definite by Cholesky.
    pub certified_posdef: bool,
}

pub fn local_second_order(
    grads: &[&DVector<f64>],
    hessians: &[&DMatrix<f64>],
    deltas: &[f64],
    mode: RegularizerMode,
) -> Result<LocalSecondOrder> {
    let t = grads.len();
    if t == 0 || hessians.len() != t || deltas.len() != t {
        return Err(Error::Dimension {
            context: "second-order sample",
            expected: t,
            got: hessians.len().min(deltas.len()),
        });
    }
    let n = grads[0].len();
    let k = weighted_hessian(hessians, deltas);
    let sigma = choose_regularizer(&k, t, mode);
    let a = DMatrix::identity(n, n) * (t as f64 * sigma) - &k;
    let chol = a.clone().cholesky();
    let certified_posdef = chol.is_some();
    let mut k_tilde = match chol {
        Some(c) => c.inverse(),
        None => {
            let cond = condition_number(&a);
            if cond > SINGULAR_CONDITION {
                return Err(Error::SingularUpdate {
                    what: "T sigma_i I - K_i",
                    condition: cond,
                });
            }
            a.lu().try_inverse().ok_or(Error::SingularUpdate {
                what: "T sigma_i I - K_i",
                condition: f64::INFINITY,
            })?
        }
    };
    symmetrize(&mut k_tilde);
    let g = DMatrix::from_columns(&grads.iter().map(|g| (*g).clone()).collect::<Vec<_>>());
    let mut c_local = g.tr_mul(&(&k_tilde * &g));
    symmetrize(&mut c_local);
    Ok(LocalSecondOrder {
        sigma,
        k,
        k_tilde,
        g,
        c_local,
        certified_posdef,
    })
}

/// Row-major upper triangle, `T(T+1)/2` entries.
pub fn pack_upper(m: &DMatrix<f64>) -> Vec<f64> {
    let t = m.nrows();
    let mut out = Vec::with_capacity(t * (t + 1) / 2);
    for r in 0..t {
        for c in r..t {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub fn unpack_upper(v: &[f64], t: usize) -> Result<DMatrix<f64>> {
    if v.len() != t * (t + 1) / 2 {
        return Err(Error::Dimension {
            context: "packed symmetric matrix",
            expected: t * (t + 1) / 2,
            got: v.len(),
        });
    }
    let mut m = DMatrix::zeros(t, t);
    let mut it = v.iter();
    for r in 0..t {
        for c in r..t {
            let x = *it.next().unwrap();
            m[(r, c)] = x;
            m[(c, r)] = x;
        }
    }
    Ok(m)
}

/// Agrees on `C = sum_i C_i` by consensus over the packed upper triangles.
/// Returns every agent's copy.
pub fn assemble_c_distributed(
    local: &[DMatrix<f64>],
    network: &Network,
    log: Option<&mut MessageLog>,
) -> Result<Vec<DMatrix<f64>>> {
    let t = local.first().map_or(0, |c| c.nrows());
    let packed: Vec<Vec<f64>> = local.iter().map(pack_upper).collect();
    let summed = network.sum(&packed, log.map(|l| (l, MessageKind::GacCMatrix)))?;
    summed.iter().map(|v| unpack_upper(v, t)).collect()
}

/// `d_i = -Kt_i G_i (delta - (I + C)^-1 C delta)`. Fails when `I + C` is
/// numerically singular; the caller skips the update.
///
/// The bracket equals `(I + C)^-1 delta`, which is what gets computed: the
/// difference form cancels almost all digits once `C` is large.
pub fn second_order_direction(
    local: &LocalSecondOrder,
    c: &DMatrix<f64>,
    deltas: &DVector<f64>,
) -> Result<DVector<f64>> {
    let t = c.nrows();
    let m = DMatrix::identity(t, t) + c;
    let cond = condition_number(&m);
    if cond > SINGULAR_CONDITION {
        return Err(Error::SingularUpdate {
            what: "I + C",
            condition: cond,
        });
    }
    let r = match m.clone().cholesky() {
        Some(ch) => ch.solve(deltas),
        None => m.lu().solve(deltas).ok_or(Error::SingularUpdate {
            what: "I + C",
            condition: f64::INFINITY,
        })?,
    };
    Ok(-(&local.k_tilde * (&local.g * r)))
}

/// Recursive special case (`T = 1`, no Hessian, `Lambda = sigma I`):
/// `d_i = -delta / (sigma + ||g||^2) g_i`, where `||g||^2` is the agreed sum
/// of the agents' `||g_i||^2`.
pub fn second_order_recursive_direction(g_i: &DVector<f64>, delta: f64, sigma: f64, grad_norm_sq: f64) -> DVector<f64> {
    g_i * (-delta / (sigma + grad_norm_sq))
}

/// Centralized reference: solves `(H + Lambda) d = q` with
/// `H = (1/T) sum_t (g_t g_t' - delta_t Hess_t)` and
/// `q = -(1/T) sum_t delta_t g_t`; `lambda` is the diagonal of `Lambda`.
pub fn centralized_second_order_direction(
    grads: &[DVector<f64>],
    hessians: &[DMatrix<f64>],
    deltas: &[f64],
    lambda: &DVector<f64>,
) -> Result<DVector<f64>> {
    let t = grads.len() as f64;
    let n = lambda.len();
    let mut h = DMatrix::zeros(n, n);
    let mut q = DVector::zeros(n);
    for ((g, hess), &d) in grads.iter().zip(hessians).zip(deltas) {
        h.ger(1.0 / t, g, g, 1.0);
        h -= hess * (d / t);
        q.axpy(-d / t, g, 1.0);
    }
    for k in 0..n {
        h[(k, k)] += lambda[k];
    }
    symmetrize(&mut h);
    let cond = condition_number(&h);
    if cond > SINGULAR_CONDITION {
        return Err(Error::SingularUpdate {
            what: "H + Lambda",
            condition: cond,
        });
    }
    match h.clone().cholesky() {
        Some(c) => Ok(c.solve(&q)),
        None => h.lu().solve(&q).ok_or(Error::SingularUpdate {
            what: "H + Lambda",
            condition: f64::INFINITY,
        }),
    }
}

/// Dense left-hand side `sum_t g_t g_t' - K + T Lambda` of the stacked
/// system; used for auditing only, never by the distributed protocol.
pub fn stacked_system(
    grads: &[DVector<f64>],
    hessians: &[DMatrix<f64>],
    deltas: &[f64],
    lambda: &DVector<f64>,
) -> DMatrix<f64> {
    let t = grads.len() as f64;
    let n = lambda.len();
    let mut a = DMatrix::zeros(n, n);
    for ((g, hess), &d) in grads.iter().zip(hessians).zip(deltas) {
        a.ger(1.0, g, g, 1.0);
        a -= hess * d;
    }
    for k in 0..n {
        a[(k, k)] += t * lambda[k];
    }
    symmetrize(&mut a);
    a
}

/// Positive definiteness certificates of one posdef-mode update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PosDefCertificate {
    pub local_kernels: bool,
    pub i_plus_c: bool,
    pub stacked: bool,
}

impl PosDefCertificate {
    pub fn all(&self) -> bool {
        self.local_kernels && self.i_plus_c && self.stacked
    }
}

pub fn certify_i_plus_c(c: &DMatrix<f64>) -> bool {
    let t = c.nrows();
    is_positive_definite(&(DMatrix::identity(t, t) + c))
}

/// Block-diagonal embedding of per-agent square matrices.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, at), (b.nrows(), b.ncols())).copy_from(b);
        at += b.nrows();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{SumMode, Topology};
    use crate::linalg::rel_err;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_kernel_gives_floor_sigma() {
        let k = DMatrix::zeros(4, 4);
        let s = choose_regularizer(&k, 15, RegularizerMode::PosDef);
        assert_eq!(s, SIGMA_MIN.max(SIGMA_EPS / 15.0));
        assert!(s > 0.0);
        assert_eq!(choose_regularizer(&k, 15, RegularizerMode::NonSingular), 1e-6);
    }

    #[test]
    fn posdef_sigma_dominates_largest_eigenvalue() {
        let k = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 0.5]));
        let s = choose_regularizer(&k, 15, RegularizerMode::PosDef);
        assert!(s >= (3.0 + 1e-6) / 15.0);
        assert!(is_positive_definite(&(DMatrix::identity(3, 3) * (15.0 * s) - &k)));
    }

    #[test]
    fn nonsingular_grid_skips_singular_candidates() {
        // T sigma = 1 would make the first diagonal entry vanish
        let k = DMatrix::from_diagonal(&DVector::from_vec(vec![15.0 * 1e-6, 0.0]));
        let s = choose_regularizer(&k, 15, RegularizerMode::NonSingular);
        assert_eq!(s, 1e-5);
    }

    #[test]
    fn pack_round_trip() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let p = pack_upper(&m);
        assert_eq!(p, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(unpack_upper(&p, 3).unwrap(), m);
    }

    #[test]
    fn recursive_example() {
        // sigma = 1, g = e1 in the first agent's block, delta = 2
        let g1 = DVector::from_vec(vec![1.0, 0.0]);
        let d = second_order_recursive_direction(&g1, 2.0, 1.0, 1.0);
        assert_eq!(d, DVector::from_vec(vec![-1.0, 0.0]));
    }

    #[test]
    fn zero_gradients_give_zero_c_and_direction() {
        let g = DVector::zeros(3);
        let h = DMatrix::identity(3, 3);
        let l = local_second_order(&[&g, &g], &[&h, &h], &[0.5, -0.2], RegularizerMode::PosDef).unwrap();
        assert_eq!(l.c_local, DMatrix::zeros(2, 2));
        let d = second_order_direction(&l, &l.c_local, &DVector::from_vec(vec![0.5, -0.2])).unwrap();
        assert_eq!(d, DVector::zeros(3));
    }

    #[test]
    fn zero_td_errors_give_zero_direction() {
        let g = DVector::from_vec(vec![1.0, -2.0]);
        let h = DMatrix::zeros(2, 2);
        let l = local_second_order(&[&g], &[&h], &[0.0], RegularizerMode::PosDef).unwrap();
        let d = second_order_direction(&l, &l.c_local, &DVector::zeros(1)).unwrap();
        assert_eq!(d, DVector::zeros(2));
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

    fn distributed(inst: &Instance, network: &Network) -> (Vec<LocalSecondOrder>, DVector<f64>) {
        let m = inst.grads.len();
        let locals: Vec<LocalSecondOrder> = (0..m)
            .map(|i| {
                let g: Vec<&DVector<f64>> = inst.grads[i].iter().collect();
                let h: Vec<&DMatrix<f64>> = inst.hess[i].iter().collect();
                local_second_order(&g, &h, &inst.deltas, RegularizerMode::PosDef).unwrap()
            })
            .collect();
        let cs = assemble_c_distributed(
            &locals.iter().map(|l| l.c_local.clone()).collect::<Vec<_>>(),
            network,
            None,
        )
        .unwrap();
        let delta = DVector::from_column_slice(&inst.deltas);
        let parts: Vec<DVector<f64>> = (0..m)
            .map(|i| second_order_direction(&locals[i], &cs[i], &delta).unwrap())
            .collect();
        let stacked = DVector::from_iterator(
            parts.iter().map(|p| p.len()).sum(),
            parts.iter().flat_map(|p| p.iter().copied()),
        );
        (locals, stacked)
    }

    fn dense_reference(inst: &Instance, locals: &[LocalSecondOrder]) -> DVector<f64> {
        let m = inst.grads.len();
        let t = inst.deltas.len();
        let global_g: Vec<DVector<f64>> = (0..t)
            .map(|s| {
                let parts: Vec<f64> = (0..m).flat_map(|i| inst.grads[i][s].iter().copied()).collect();
                DVector::from_vec(parts)
            })
            .collect();
        let global_h: Vec<DMatrix<f64>> = (0..t)
            .map(|s| block_diag(&(0..m).map(|i| inst.hess[i][s].clone()).collect::<Vec<_>>()))
            .collect();
        let lambda = DVector::from_iterator(
            global_g[0].len(),
            locals.iter().flat_map(|l| std::iter::repeat_n(l.sigma, l.g.nrows())),
        );
        let a = stacked_system(&global_g, &global_h, &inst.deltas, &lambda);
        let mut rhs = DVector::zeros(lambda.len());
        for (g, &d) in global_g.iter().zip(&inst.deltas) {
            rhs.axpy(-d, g, 1.0);
        }
        match a.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => a.lu().solve(&rhs).unwrap(),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn decomposition_matches_dense_solve(
            seed in any::<u64>(),
            m in 1usize..=5,
            n in prop::sample::select(vec![1usize, 4, 10]),
            t in prop::sample::select(vec![1usize, 2, 5, 15]),
            with_hessian in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng, m, n, t, with_hessian);
            let topo = if m == 1 { Topology::new(1, &[]).unwrap() } else { Topology::chain(m).unwrap() };
            let net = Network::new(topo, SumMode::Exact);
            let (locals, d) = distributed(&inst, &net);
            let want = dense_reference(&inst, &locals);
            prop_assert!(rel_err(&d, &want, 1e-300) <= 1e-8, "rel err {}", rel_err(&d, &want, 1e-300));
        }

        #[test]
        fn centralized_matches_decomposition(seed in any::<u64>(), m in 1usize..=4, t in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng, m, 3, t, true);
            let topo = if m == 1 { Topology::new(1, &[]).unwrap() } else { Topology::chain(m).unwrap() };
            let net = Network::new(topo, SumMode::Exact);
            let (locals, d) = distributed(&inst, &net);
            let global_g: Vec<DVector<f64>> = (0..t)
                .map(|s| DVector::from_vec((0..m).flat_map(|i| inst.grads[i][s].iter().copied()).collect()))
                .collect();
            let global_h: Vec<DMatrix<f64>> = (0..t).map(|s| block_diag(&(0..m).map(|i| inst.hess[i][s].clone()).collect::<Vec<_>>())).collect();
            let lambda = DVector::from_iterator(3 * m, locals.iter().flat_map(|l| std::iter::repeat_n(l.sigma, 3)));
            let central = centralized_second_order_direction(&global_g, &global_h, &inst.deltas, &lambda).unwrap();
            prop_assert!(rel_err(&d, &central, 1e-300) <= 1e-8);
        }

        #[test]
        fn positive_definite_chain_holds_in_posdef_mode(seed in any::<u64>(), m in 1usize..=4, t in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng, m, 4, t, true);
            let topo = if m == 1 { Topology::new(1, &[]).unwrap() } else { Topology::chain(m).unwrap() };
            let net = Network::new(topo, SumMode::Exact);
            let (locals, _) = distributed(&inst, &net);
            let c: DMatrix<f64> = locals.iter().map(|l| l.c_local.clone()).fold(DMatrix::zeros(t, t), |a, b| a + b);
            prop_assert!(locals.iter().all(|l| l.certified_posdef));
            prop_assert!(is_positive_definite(&(&locals[0].k_tilde * 1.0)));
            prop_assert!(certify_i_plus_c(&c));
        }
    }

    #[test]
    fn single_sample_without_hessian_reduces_to_recursive_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inst = random_instance(&mut rng, 3, 4, 1, false);
        let sigma = 0.7;
        let locals: Vec<LocalSecondOrder> = (0..3)
            .map(|i| {
                let g = DMatrix::from_columns(&[inst.grads[i][0].clone()]);
                let k_tilde = DMatrix::identity(4, 4) / sigma;
                let c_local = g.tr_mul(&(&k_tilde * &g));
                LocalSecondOrder {
                    sigma,
                    k: DMatrix::zeros(4, 4),
                    k_tilde,
                    g,
                    c_local,
                    certified_posdef: true,
                }
            })
            .collect();
        let c = locals
            .iter()
            .map(|l| l.c_local.clone())
            .fold(DMatrix::zeros(1, 1), |a, b| a + b);
        let norm_sq: f64 = (0..3).map(|i| inst.grads[i][0].norm_squared()).sum();
        assert!((c[(0, 0)] - norm_sq / sigma).abs() <= 1e-12 * c[(0, 0)]);
        let delta = DVector::from_element(1, inst.deltas[0]);
        for i in 0..3 {
            let full = second_order_direction(&locals[i], &c, &delta).unwrap();
            let rec = second_order_recursive_direction(&inst.grads[i][0], inst.deltas[0], sigma, norm_sq);
            assert!((full - rec).amax() <= 1e-12 * (1.0 + inst.grads[i][0].amax()));
        }
    }
}
