//! Dense solver for condensed, soft-constrained convex QPs.
//!
//! After the state trajectories of an MPC problem are eliminated through the
//! dynamics, every problem in this crate has the form
//!
//! ```text
//! min_{w, sigma}  1/2 w'Hw + c'w + p'sigma + const
//! s.t.            lo_j - sigma_j <= y_j <= hi_j + sigma_j,   y = Gamma w + gamma
//!                 sigma >= 0,   wl <= w <= wu
//! ```
//!
//! with one slack per soft row and a nonnegative penalty `p`. The solver is a
//! Mehrotra predictor-corrector interior-point method whose Newton systems
//! are reduced to the `w` block: the slack block is diagonal and is
//! eliminated analytically, so each iteration costs one `ns x nw^2` product
//! and one `nw x nw` Cholesky factorization.
//!
//! The interior-point iterate is then polished: its active set is fixed and
//! the resulting equality-constrained QP is solved exactly, followed by a few
//! primal-dual active-set corrections. A polished point that passes the KKT
//! check is exact to rounding error, which the sensitivity computations rely
//! on. Callers may also pass the active set of a previous, similar problem;
//! when it verifies, the interior-point phase is skipped entirely.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SoftBoxQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    /// `Gamma`, one row per soft-constrained affine expression.
    pub rows: DMatrix<f64>,
    /// `gamma`.
    pub offset: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub penalty: DVector<f64>,
    /// Hard bounds on `w`; infinite entries are ignored.
    pub var_lower: DVector<f64>,
    pub var_upper: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowState {
    /// `lo <= y <= hi`, slack zero.
    Inside,
    /// `y = lo`, slack zero (kink of the penalty).
    AtLower,
    /// `y < lo`, slack `lo - y`.
    BelowLower,
    AtUpper,
    AboveUpper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarState {
    Free,
    AtLower,
    AtUpper,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub rows: Vec<RowState>,
    pub vars: Vec<VarState>,
}

impl ActiveSet {
    pub fn is_compatible(&self, qp: &SoftBoxQp) -> bool {
        self.rows.len() == qp.rows.nrows() && self.vars.len() == qp.hessian.nrows()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct SoftBoxSolution {
    pub w: DVector<f64>,
    pub sigma: DVector<f64>,
    /// Multipliers of `lo - sigma - y <= 0`.
    pub mu_lower: DVector<f64>,
    /// Multipliers of `y - hi - sigma <= 0`.
    pub mu_upper: DVector<f64>,
    /// Multipliers of `-sigma <= 0`.
    pub mu_sigma: DVector<f64>,
    /// Multipliers of `wl - w <= 0` (zero where unbounded).
    pub mu_var_lower: DVector<f64>,
    pub mu_var_upper: DVector<f64>,
    pub objective: f64,
    pub active_set: ActiveSet,
    pub residuals: KktResiduals,
    pub ipm_iterations: usize,
    pub polished: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub polish: bool,
    pub active_set_iterations: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tolerance: 1e-10,
            max_iterations: 100,
            polish: true,
            active_set_iterations: 8,
        }
    }
}

impl SoftBoxQp {
    pub fn num_vars(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.nrows()
    }

    fn validate(&self) -> Result<()> {
        let nw = self.num_vars();
        let ns = self.num_rows();
        let dims_ok = self.hessian.ncols() == nw
            && self.linear.len() == nw
            && self.rows.ncols() == nw
            && self.offset.len() == ns
            && self.lower.len() == ns
            && self.upper.len() == ns
            && self.penalty.len() == ns
            && self.var_lower.len() == nw
            && self.var_upper.len() == nw;
        if !dims_ok {
            return Err(Error::Dimension {
                context: "soft-box QP data",
                expected: nw,
                got: self.linear.len(),
            });
        }
        if let Some(j) = self.penalty.iter().position(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Unbounded(format!(
                "soft row {j} has penalty {} (must be finite and nonnegative)",
                self.penalty[j]
            )));
        }
        for j in 0..ns {
            if !(self.lower[j] <= self.upper[j]) {
                return Err(Error::Config(format!("soft row {j} has lower > upper")));
            }
        }
        for k in 0..nw {
            if !(self.var_lower[k] <= self.var_upper[k]) {
                return Err(Error::Config(format!("variable {k} has lower > upper bound")));
            }
        }
        Ok(())
    }

    pub fn objective(&self, w: &DVector<f64>, sigma: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.hessian * w)) + self.linear.dot(w) + self.penalty.dot(sigma) + self.constant
    }

    pub fn row_values(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.rows * w + &self.offset
    }

    fn scale(&self) -> f64 {
        let b = self
            .lower
            .iter()
            .chain(self.upper.iter())
            .map(|v| v.abs())
            .chain(
                self.var_lower
                    .iter()
                    .chain(self.var_upper.iter())
                    .filter(|v| v.is_finite())
                    .map(|v| v.abs()),
            )
            .fold(0.0f64, f64::max);
        1.0 + b
    }

    /// KKT residuals of a candidate primal-dual point.
    pub fn residuals(&self, sol: &SoftBoxSolution) -> KktResiduals {
        let y = self.row_values(&sol.w);
        let diff = &sol.mu_lower - &sol.mu_upper;
        let stat_w =
            &self.hessian * &sol.w + &self.linear - self.rows.tr_mul(&diff) - &sol.mu_var_lower + &sol.mu_var_upper;
        let stat_s = &self.penalty - &sol.mu_lower - &sol.mu_upper - &sol.mu_sigma;
        let grad_scale = 1.0 + self.linear.amax() + self.penalty.amax();
        let mut primal = 0.0f64;
        let mut comp = 0.0f64;
        let mut dual = 0.0f64;
        for j in 0..self.num_rows() {
            let s1 = y[j] + sol.sigma[j] - self.lower[j];
            let s2 = self.upper[j] + sol.sigma[j] - y[j];
            let s3 = sol.sigma[j];
            for (s, m) in [(s1, sol.mu_lower[j]), (s2, sol.mu_upper[j]), (s3, sol.mu_sigma[j])] {
                primal = primal.max(-s);
                dual = dual.max(-m);
                comp = comp.max((s * m).abs());
            }
        }
        for k in 0..self.num_vars() {
            if self.var_lower[k].is_finite() {
                let s = sol.w[k] - self.var_lower[k];
                primal = primal.max(-s);
                dual = dual.max(-sol.mu_var_lower[k]);
                comp = comp.max((s * sol.mu_var_lower[k]).abs());
            }
            if self.var_upper[k].is_finite() {
                let s = self.var_upper[k] - sol.w[k];
                primal = primal.max(-s);
                dual = dual.max(-sol.mu_var_upper[k]);
                comp = comp.max((s * sol.mu_var_upper[k]).abs());
            }
        }
        KktResiduals {
            stationarity: stat_w.amax().max(stat_s.amax()) / grad_scale,
            primal: primal / self.scale(),
            dual: dual / grad_scale,
            complementarity: comp / (grad_scale * self.scale()),
        }
    }
}

/// Solves the QP. `warm` is an active-set guess from a related problem.
pub fn solve(qp: &SoftBoxQp, opts: &QpOptions, warm: Option<&ActiveSet>) -> Result<SoftBoxSolution> {
    qp.validate()?;
    if let Some(guess) = warm.filter(|g| g.is_compatible(qp)) {
        if let Some(sol) = refine_active_set(qp, guess.clone(), opts) {
            return Ok(sol);
        }
    }
    let mut sol = interior_point(qp, opts)?;
    if opts.polish {
        if let Some(polished) = refine_active_set(qp, sol.active_set.clone(), opts) {
            let mut polished = polished;
            polished.ipm_iterations = sol.ipm_iterations;
            return Ok(polished);
        }
    }
    sol.residuals = qp.residuals(&sol);
    Ok(sol)
}

struct Indexing {
    lo_vars: Vec<usize>,
    up_vars: Vec<usize>,
}

fn interior_point(qp: &SoftBoxQp, opts: &QpOptions) -> Result<SoftBoxSolution> {
    let nw = qp.num_vars();
    let ns = qp.num_rows();
    let idx = Indexing {
        lo_vars: (0..nw).filter(|&k| qp.var_lower[k].is_finite()).collect(),
        up_vars: (0..nw).filter(|&k| qp.var_upper[k].is_finite()).collect(),
    };
    let nl = idx.lo_vars.len();
    let nu = idx.up_vars.len();
    let nrows = 3 * ns + nl + nu;

    // primal start: inside the hard box, slacks covering any violation
    let mut w = DVector::from_iterator(
        nw,
        (0..nw).map(|k| {
            let (l, u) = (qp.var_lower[k], qp.var_upper[k]);
            match (l.is_finite(), u.is_finite()) {
                (true, true) => 0.5 * (l + u),
                (true, false) => l.max(0.0) + if l >= 0.0 { 1.0 } else { 0.0 },
                (false, true) => u.min(0.0) - if u <= 0.0 { 1.0 } else { 0.0 },
                _ => 0.0,
            }
        }),
    );
    let y0 = qp.row_values(&w);
    let mut sigma = DVector::from_iterator(
        ns,
        (0..ns).map(|j| (qp.lower[j] - y0[j]).max(y0[j] - qp.upper[j]).max(0.0) + 1.0),
    );
    // slack layout: [lo (ns) | up (ns) | sigma (ns) | var lower (nl) | var upper (nu)]
    let mut s = DVector::from_element(nrows, 1.0);
    let mut lam = DVector::from_element(nrows, 1.0);
    {
        let gz = constraint_values(qp, &idx, &w, &sigma);
        let h = rhs_values(qp, &idx);
        for r in 0..nrows {
            s[r] = (h[r] - gz[r]).max(1.0);
        }
    }

    let h = rhs_values(qp, &idx);
    let grad_scale = 1.0 + qp.linear.amax() + qp.penalty.amax();
    let bound_scale = qp.scale();
    let tol = opts.tolerance;

    let mut iterations = 0;
    let (mut rp_norm, mut rd_norm, mut mu) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    while iterations < opts.max_iterations {
        // residuals
        let gz = constraint_values(qp, &idx, &w, &sigma);
        let rp = &gz + &s - &h;
        let (rdw, rds) = dual_residual(qp, &idx, &w, &lam);
        mu = s.dot(&lam) / nrows.max(1) as f64;
        rp_norm = rp.amax() / bound_scale;
        rd_norm = rdw.amax().max(rds.amax()) / grad_scale;
        let obj = qp.objective(&w, &sigma);
        if rp_norm <= tol && rd_norm <= tol && mu <= tol * (1.0 + obj.abs()).min(grad_scale * bound_scale) {
            break;
        }
        iterations += 1;

        let newton = NewtonSystem::factor(qp, &idx, &s, &lam)?;
        // affine-scaling direction
        let rc_aff = s.component_mul(&lam);
        let (_, _, ds_aff, dl_aff) = newton.solve(qp, &idx, &rdw, &rds, &rp, &rc_aff, &s, &lam);
        let alpha_aff = max_step(&s, &ds_aff).min(max_step(&lam, &dl_aff)).min(1.0);
        let mu_aff = (&s + alpha_aff * &ds_aff).dot(&(&lam + alpha_aff * &dl_aff)) / nrows.max(1) as f64;
        let centering = if mu > 0.0 { (mu_aff / mu).powi(3).min(1.0) } else { 0.0 };
        // combined predictor-corrector direction
        let rc = &rc_aff + ds_aff.component_mul(&dl_aff) - DVector::from_element(nrows, centering * mu);
        let (dw, dsig, ds, dl) = newton.solve(qp, &idx, &rdw, &rds, &rp, &rc, &s, &lam);
        let alpha_max = max_step(&s, &ds).min(max_step(&lam, &dl));
        let alpha = (0.99 * alpha_max).min(1.0);
        w += alpha * dw;
        sigma += alpha * dsig;
        s += alpha * ds;
        lam += alpha * dl;
        if !w.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    if iterations >= opts.max_iterations || !w.iter().all(|v| v.is_finite()) {
        return Err(Error::NonConvergence {
            iterations,
            primal: rp_norm,
            dual: rd_norm,
            gap: mu,
        });
    }

    let mut sol = SoftBoxSolution {
        mu_lower: lam.rows(0, ns).into_owned(),
        mu_upper: lam.rows(ns, ns).into_owned(),
        mu_sigma: lam.rows(2 * ns, ns).into_owned(),
        mu_var_lower: DVector::zeros(nw),
        mu_var_upper: DVector::zeros(nw),
        objective: qp.objective(&w, &sigma),
        active_set: ActiveSet {
            rows: Vec::new(),
            vars: Vec::new(),
        },
        residuals: KktResiduals::default(),
        ipm_iterations: iterations,
        polished: false,
        w,
        sigma,
    };
    for (a, &k) in idx.lo_vars.iter().enumerate() {
        sol.mu_var_lower[k] = lam[3 * ns + a];
    }
    for (a, &k) in idx.up_vars.iter().enumerate() {
        sol.mu_var_upper[k] = lam[3 * ns + nl + a];
    }
    // active set from strict complementarity: a constraint is active when its
    // multiplier dominates its slack
    let rows = (0..ns)
        .map(|j| {
            let lo = lam[j] > s[j];
            let up = lam[ns + j] > s[ns + j];
            let sg = lam[2 * ns + j] > s[2 * ns + j];
            match (lo, up, sg) {
                (true, true, _) if lam[j] >= lam[ns + j] => {
                    if sg {
                        RowState::AtLower
                    } else {
                        RowState::BelowLower
                    }
                }
                (_, true, true) => RowState::AtUpper,
                (_, true, false) => RowState::AboveUpper,
                (true, false, true) => RowState::AtLower,
                (true, false, false) => RowState::BelowLower,
                _ => RowState::Inside,
            }
        })
        .collect();
    let mut vars = vec![VarState::Free; nw];
    for (a, &k) in idx.lo_vars.iter().enumerate() {
        if lam[3 * ns + a] > s[3 * ns + a] {
            vars[k] = VarState::AtLower;
        }
    }
    for (a, &k) in idx.up_vars.iter().enumerate() {
        if lam[3 * ns + nl + a] > s[3 * ns + nl + a] {
            vars[k] = VarState::AtUpper;
        }
    }
    sol.active_set = ActiveSet { rows, vars };
    Ok(sol)
}

/// `G z` for all inequality rows (layout documented in `interior_point`).
fn constraint_values(qp: &SoftBoxQp, idx: &Indexing, w: &DVector<f64>, sigma: &DVector<f64>) -> DVector<f64> {
    let ns = qp.num_rows();
    let gw = &qp.rows * w;
    let mut out = DVector::zeros(3 * ns + idx.lo_vars.len() + idx.up_vars.len());
    for j in 0..ns {
        out[j] = -gw[j] - sigma[j];
        out[ns + j] = gw[j] - sigma[j];
        out[2 * ns + j] = -sigma[j];
    }
    for (a, &k) in idx.lo_vars.iter().enumerate() {
        out[3 * ns + a] = -w[k];
    }
    let base = 3 * ns + idx.lo_vars.len();
    for (a, &k) in idx.up_vars.iter().enumerate() {
        out[base + a] = w[k];
    }
    out
}

fn rhs_values(qp: &SoftBoxQp, idx: &Indexing) -> DVector<f64> {
    let ns = qp.num_rows();
    let mut out = DVector::zeros(3 * ns + idx.lo_vars.len() + idx.up_vars.len());
    for j in 0..ns {
        out[j] = qp.offset[j] - qp.lower[j];
        out[ns + j] = qp.upper[j] - qp.offset[j];
    }
    for (a, &k) in idx.lo_vars.iter().enumerate() {
        out[3 * ns + a] = -qp.var_lower[k];
    }
    let base = 3 * ns + idx.lo_vars.len();
    for (a, &k) in idx.up_vars.iter().enumerate() {
        out[base + a] = qp.var_upper[k];
    }
    out
}

/// `(Pz + q + G'lam)` split into the `w` and `sigma` blocks.
fn dual_residual(qp: &SoftBoxQp, idx: &Indexing, w: &DVector<f64>, lam: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let ns = qp.num_rows();
    let g = DVector::from_iterator(ns, (0..ns).map(|j| lam[ns + j] - lam[j]));
    let mut rdw = &qp.hessian * w + &qp.linear + qp.rows.tr_mul(&g);
    for (a, &k) in idx.lo_vars.iter().enumerate() {
        rdw[k] -= lam[3 * ns + a];
    }
    let base = 3 * ns + idx.lo_vars.len();
    for (a, &k) in idx.up_vars.iter().enumerate() {
        rdw[k] += lam[base + a];
    }
    let rds = DVector::from_iterator(
        ns,
        (0..ns).map(|j| qp.penalty[j] - lam[j] - lam[ns + j] - lam[2 * ns + j]),
    );
    (rdw, rds)
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = f64::INFINITY;
    for (x, d) in v.iter().zip(dv.iter()) {
        if *d < 0.0 {
            alpha = alpha.min(-x / d);
        }
    }
    alpha
}

struct NewtonSystem {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    weights: DVector<f64>,
    diag_sigma: DVector<f64>,
    cross: DVector<f64>,
}

impl NewtonSystem {
    fn factor(qp: &SoftBoxQp, idx: &Indexing, s: &DVector<f64>, lam: &DVector<f64>) -> Result<Self> {
        let ns = qp.num_rows();
        let weights = lam.component_div(s);
        let mut diag_sigma = DVector::zeros(ns);
        let mut cross = DVector::zeros(ns);
        let mut eff = DVector::zeros(ns);
        for j in 0..ns {
            let (w1, w2, w3) = (weights[j], weights[ns + j], weights[2 * ns + j]);
            let d = w1 + w2 + w3;
            let c = w1 - w2;
            diag_sigma[j] = d;
            cross[j] = c;
            // (w1 + w2) - (w1 - w2)^2 / d, written to avoid cancellation
            eff[j] = (4.0 * w1 * w2 + w3 * (w1 + w2)) / d;
        }
        let mut scaled = qp.rows.clone();
        for j in 0..ns {
            scaled.row_mut(j).scale_mut(eff[j]);
        }
        let mut n = &qp.hessian + qp.rows.tr_mul(&scaled);
        for (a, &k) in idx.lo_vars.iter().enumerate() {
            n[(k, k)] += weights[3 * ns + a];
        }
        let base = 3 * ns + idx.lo_vars.len();
        for (a, &k) in idx.up_vars.iter().enumerate() {
            n[(k, k)] += weights[base + a];
        }
        let chol = match n.clone().cholesky() {
            Some(c) => c,
            None => {
                let reg = 1e-12 * (1.0 + n.diagonal().amax());
                let mut attempt = n;
                let mut factor = None;
                let mut r = reg;
                for _ in 0..8 {
                    for k in 0..attempt.nrows() {
                        attempt[(k, k)] += r;
                    }
                    if let Some(c) = attempt.clone().cholesky() {
                        factor = Some(c);
                        break;
                    }
                    r *= 100.0;
                }
                factor.ok_or_else(|| Error::Linalg("interior-point Newton matrix is not positive definite".into()))?
            }
        };
        Ok(NewtonSystem {
            chol,
            weights,
            diag_sigma,
            cross,
        })
    }

    /// Returns `(dw, dsigma, ds, dlam)`.
    #[allow(clippy::too_many_arguments)]
    fn solve(
        &self,
        qp: &SoftBoxQp,
        idx: &Indexing,
        rdw: &DVector<f64>,
        rds: &DVector<f64>,
        rp: &DVector<f64>,
        rc: &DVector<f64>,
        s: &DVector<f64>,
        lam: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        let ns = qp.num_rows();
        let nl = idx.lo_vars.len();
        let nrows = s.len();
        let psi = DVector::from_iterator(nrows, (0..nrows).map(|r| (rc[r] - lam[r] * rp[r]) / s[r]));
        // rhs = -r_d + G' psi
        let mut coef = DVector::zeros(ns);
        let mut rhs_s = DVector::zeros(ns);
        for j in 0..ns {
            rhs_s[j] = -rds[j] - psi[j] - psi[ns + j] - psi[2 * ns + j];
            coef[j] = -psi[j] + psi[ns + j] - self.cross[j] * rhs_s[j] / self.diag_sigma[j];
        }
        let mut b = -rdw + qp.rows.tr_mul(&coef);
        for (a, &k) in idx.lo_vars.iter().enumerate() {
            b[k] -= psi[3 * ns + a];
        }
        for (a, &k) in idx.up_vars.iter().enumerate() {
            b[k] += psi[3 * ns + nl + a];
        }
        let dw = self.chol.solve(&b);
        let gdw = &qp.rows * &dw;
        let dsig = DVector::from_iterator(
            ns,
            (0..ns).map(|j| (rhs_s[j] - self.cross[j] * gdw[j]) / self.diag_sigma[j]),
        );
        let mut gdz = DVector::zeros(nrows);
        for j in 0..ns {
            gdz[j] = -gdw[j] - dsig[j];
            gdz[ns + j] = gdw[j] - dsig[j];
            gdz[2 * ns + j] = -dsig[j];
        }
        for (a, &k) in idx.lo_vars.iter().enumerate() {
            gdz[3 * ns + a] = -dw[k];
        }
        for (a, &k) in idx.up_vars.iter().enumerate() {
            gdz[3 * ns + nl + a] = dw[k];
        }
        let ds = -rp - &gdz;
        let dl = DVector::from_iterator(nrows, (0..nrows).map(|r| -psi[r] + self.weights[r] * gdz[r]));
        (dw, dsig, ds, dl)
    }
}

/// Primal-dual active-set iterations starting from `guess`. Returns a
/// solution only if one of the iterates satisfies the KKT conditions.
fn refine_active_set(qp: &SoftBoxQp, mut guess: ActiveSet, opts: &QpOptions) -> Option<SoftBoxSolution> {
    let mut seen: Vec<ActiveSet> = Vec::new();
    for _ in 0..opts.active_set_iterations.max(1) {
        let cand = solve_active_set(qp, &guess)?;
        let (next, changed) = update_active_set(qp, &cand, &guess);
        if !changed {
            let mut sol = cand;
            sol.residuals = qp.residuals(&sol);
            // rounding-level residuals only; anything larger means the
            // equality system was ill-conditioned
            if sol.residuals.max() <= 1e-9 {
                return Some(sol);
            }
            return None;
        }
        seen.push(guess);
        if seen.contains(&next) {
            return None;
        }
        guess = next;
    }
    None
}

/// Solves the equality-constrained QP implied by an active set and recovers
/// all multipliers.
fn solve_active_set(qp: &SoftBoxQp, set: &ActiveSet) -> Option<SoftBoxSolution> {
    let nw = qp.num_vars();
    let ns = qp.num_rows();
    let mut fixed = vec![None; nw];
    for k in 0..nw {
        fixed[k] = match set.vars[k] {
            VarState::Free => None,
            VarState::AtLower => Some(qp.var_lower[k]),
            VarState::AtUpper => Some(qp.var_upper[k]),
        };
        if let Some(v) = fixed[k] {
            if !v.is_finite() {
                return None;
            }
        }
    }
    let free: Vec<usize> = (0..nw).filter(|&k| fixed[k].is_none()).collect();
    let eq_rows: Vec<usize> = (0..ns)
        .filter(|&j| matches!(set.rows[j], RowState::AtLower | RowState::AtUpper))
        .collect();
    let nf = free.len();
    let ne = eq_rows.len();
    if ne > nf {
        return None;
    }

    // linear term including active penalty pieces
    let mut lin = qp.linear.clone();
    for j in 0..ns {
        let sign = match set.rows[j] {
            RowState::BelowLower => -1.0,
            RowState::AboveUpper => 1.0,
            _ => continue,
        };
        lin.axpy(sign * qp.penalty[j], &qp.rows.row(j).transpose(), 1.0);
    }
    let mut w_fixed = DVector::zeros(nw);
    for k in 0..nw {
        if let Some(v) = fixed[k] {
            w_fixed[k] = v;
        }
    }
    let hw_fixed = &qp.hessian * &w_fixed;
    let gw_fixed = &qp.rows * &w_fixed;

    let dim = nf + ne;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for (a, &k) in free.iter().enumerate() {
        for (b, &l) in free.iter().enumerate() {
            kkt[(a, b)] = qp.hessian[(k, l)];
        }
        rhs[a] = -(lin[k] + hw_fixed[k]);
    }
    for (e, &j) in eq_rows.iter().enumerate() {
        for (a, &k) in free.iter().enumerate() {
            kkt[(nf + e, a)] = qp.rows[(j, k)];
            kkt[(a, nf + e)] = qp.rows[(j, k)];
        }
        let target = if set.rows[j] == RowState::AtLower {
            qp.lower[j]
        } else {
            qp.upper[j]
        };
        rhs[nf + e] = target - qp.offset[j] - gw_fixed[j];
    }
    let sol = if dim == 0 {
        DVector::zeros(0)
    } else {
        let lu = kkt.clone().lu();
        let mut x = lu.solve(&rhs)?;
        // one step of iterative refinement
        let r = &rhs - &kkt * &x;
        if let Some(dx) = lu.solve(&r) {
            x += dx;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
        x
    };

    let mut w = w_fixed;
    for (a, &k) in free.iter().enumerate() {
        w[k] = sol[a];
    }
    let mut nu = DVector::zeros(ns);
    for (e, &j) in eq_rows.iter().enumerate() {
        nu[j] = sol[nf + e];
    }
    let y = qp.row_values(&w);
    let mut sigma = DVector::zeros(ns);
    let mut mu_lower = DVector::zeros(ns);
    let mut mu_upper = DVector::zeros(ns);
    let mut mu_sigma = DVector::zeros(ns);
    for j in 0..ns {
        let p = qp.penalty[j];
        match set.rows[j] {
            RowState::Inside => mu_sigma[j] = p,
            RowState::BelowLower => {
                sigma[j] = qp.lower[j] - y[j];
                mu_lower[j] = p;
            }
            RowState::AboveUpper => {
                sigma[j] = y[j] - qp.upper[j];
                mu_upper[j] = p;
            }
            RowState::AtLower => {
                mu_lower[j] = -nu[j];
                mu_sigma[j] = p - mu_lower[j];
            }
            RowState::AtUpper => {
                mu_upper[j] = nu[j];
                mu_sigma[j] = p - mu_upper[j];
            }
        }
    }
    // hard-bound multipliers from the stationarity residual on fixed variables
    let diff = &mu_lower - &mu_upper;
    let grad = &qp.hessian * &w + &qp.linear - qp.rows.tr_mul(&diff);
    let mut mu_var_lower = DVector::zeros(nw);
    let mut mu_var_upper = DVector::zeros(nw);
    for k in 0..nw {
        match set.vars[k] {
            VarState::AtLower => mu_var_lower[k] = grad[k],
            VarState::AtUpper => mu_var_upper[k] = -grad[k],
            VarState::Free => {}
        }
    }
    Some(SoftBoxSolution {
        objective: qp.objective(&w, &sigma),
        w,
        sigma,
        mu_lower,
        mu_upper,
        mu_sigma,
        mu_var_lower,
        mu_var_upper,
        active_set: set.clone(),
        residuals: KktResiduals::default(),
        ipm_iterations: 0,
        polished: true,
    })
}

/// One primal-dual active-set correction; returns the new set and whether
/// anything changed.
fn update_active_set(qp: &SoftBoxQp, cand: &SoftBoxSolution, set: &ActiveSet) -> (ActiveSet, bool) {
    let y = qp.row_values(&cand.w);
    let ptol = 1e-10 * qp.scale();
    let mut next = set.clone();
    let mut changed = false;
    for j in 0..qp.num_rows() {
        let p = qp.penalty[j];
        let dtol = 1e-10 * (1.0 + p);
        let new = match set.rows[j] {
            RowState::Inside if y[j] < qp.lower[j] - ptol => RowState::AtLower,
            RowState::Inside if y[j] > qp.upper[j] + ptol => RowState::AtUpper,
            RowState::BelowLower if y[j] > qp.lower[j] + ptol => RowState::AtLower,
            RowState::AboveUpper if y[j] < qp.upper[j] - ptol => RowState::AtUpper,
            RowState::AtLower if cand.mu_lower[j] < -dtol => RowState::Inside,
            RowState::AtLower if cand.mu_lower[j] > p + dtol => RowState::BelowLower,
            RowState::AtUpper if cand.mu_upper[j] < -dtol => RowState::Inside,
            RowState::AtUpper if cand.mu_upper[j] > p + dtol => RowState::AboveUpper,
            s => s,
        };
        if new != set.rows[j] {
            next.rows[j] = new;
            changed = true;
        }
    }
    let gscale = 1.0 + qp.linear.amax() + qp.penalty.amax();
    for k in 0..qp.num_vars() {
        let dtol = 1e-10 * gscale;
        let new = match set.vars[k] {
            VarState::Free if cand.w[k] < qp.var_lower[k] - ptol => VarState::AtLower,
            VarState::Free if cand.w[k] > qp.var_upper[k] + ptol => VarState::AtUpper,
            VarState::AtLower if cand.mu_var_lower[k] < -dtol => VarState::Free,
            VarState::AtUpper if cand.mu_var_upper[k] < -dtol => VarState::Free,
            s => s,
        };
        if new != set.vars[k] {
            next.vars[k] = new;
            changed = true;
        }
    }
    (next, changed)
}
