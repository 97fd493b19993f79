//! Small dense convex QPs and their KKT sensitivities.
//!
//! Problems have the form
//!
//! ```text
//! minimize    1/2 w' Q w + p' w
//! subject to  G w <= q
//! ```
//!
//! with `Q` symmetric positive definite. [`solve`] is a dual active-set
//! (Goldfarb-Idnani) method: it starts at the unconstrained minimizer and adds
//! violated rows one at a time, so it needs no feasible starting point and
//! ends with an exact active set. Ties are broken toward the lowest row
//! index, which keeps the iteration deterministic.
//!
//! [`kkt_sensitivity`] differentiates the KKT system restricted to the
//! strongly active rows, giving `dw*/dq` and `dλ*/dq`.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Primal feasibility, stationarity and complementarity tolerance.
pub const FEAS_TOL: f64 = 1e-8;
/// A row counts as strongly active when its multiplier exceeds this.
pub const ACTIVE_LAMBDA_TOL: f64 = 1e-9;

static DEGENERATE_SENSITIVITIES: AtomicU64 = AtomicU64::new(0);

/// Number of sensitivity requests that fell back to a zero Jacobian.
pub fn degenerate_sensitivity_count() -> u64 {
    DEGENERATE_SENSITIVITIES.load(Ordering::Relaxed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("Hessian is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("Hessian must be diagonal with positive entries")]
    NotDiagonalPositive,
    #[error("non-finite problem data")]
    NonFinite,
    #[error("active-set iteration limit ({0}) reached")]
    MaxIterations(usize),
    #[error("KKT system is singular at this solution (degenerate active set)")]
    Degenerate,
    #[error("solution status is {0:?}, sensitivities need an optimal solution")]
    NotOptimal(SolveStatus),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub linear: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        hessian: DMatrix<f64>,
        g: DMatrix<f64>,
        rhs: DVector<f64>,
        linear: Option<DVector<f64>>,
    ) -> Result<Self, QpError> {
        let d = hessian.nrows();
        if hessian.ncols() != d {
            return Err(QpError::Shape(format!("Q is {}x{}", d, hessian.ncols())));
        }
        if g.ncols() != d || g.nrows() != rhs.len() {
            return Err(QpError::Shape(format!(
                "G is {}x{}, q has {} rows, d = {}",
                g.nrows(),
                g.ncols(),
                rhs.len(),
                d
            )));
        }
        let linear = linear.unwrap_or_else(|| DVector::zeros(d));
        if linear.len() != d {
            return Err(QpError::Shape(format!("p has {} entries, d = {}", linear.len(), d)));
        }
        let finite = hessian.iter().chain(g.iter()).chain(rhs.iter()).chain(linear.iter());
        if !finite.into_iter().all(|x| x.is_finite()) {
            return Err(QpError::NonFinite);
        }
        let scale = hessian.amax().max(1.0);
        if (&hessian - hessian.transpose()).amax() > 1e-12 * scale {
            return Err(QpError::NotPositiveDefinite);
        }
        if hessian.clone().cholesky().is_none() {
            return Err(QpError::NotPositiveDefinite);
        }
        Ok(Self { hessian, g, rhs, linear })
    }

    /// Builds a problem whose Hessian is `diag(diag)`, asserting every entry is positive.
    pub fn diagonal(
        diag: &[f64],
        g: DMatrix<f64>,
        rhs: DVector<f64>,
        linear: Option<DVector<f64>>,
    ) -> Result<Self, QpError> {
        if diag.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(QpError::NotDiagonalPositive);
        }
        Self::new(DMatrix::from_diagonal(&DVector::from_row_slice(diag)), g, rhs, linear)
    }

    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn n_constraints(&self) -> usize {
        self.rhs.len()
    }

    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.hessian * w)) + self.linear.dot(w)
    }

    /// `G w - q`; non-positive entries are satisfied rows.
    pub fn residual(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.g * w - &self.rhs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// KKT point with strict complementarity on every row.
    Optimal,
    /// Empty feasible set; see [`QpSolution::certificate`].
    Infeasible,
    /// KKT point where some row is active with a zero multiplier.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub w: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Rows with `|G w - q| <= FEAS_TOL`, ascending.
    pub active_set: Vec<usize>,
    pub status: SolveStatus,
    /// For infeasible problems, `y >= 0` with `G' y = 0` and `q' y < 0`.
    pub certificate: Option<DVector<f64>>,
    pub iterations: usize,
}

/// Jacobians of the primal and dual solution with respect to `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSensitivity {
    /// `d × c`
    pub dw_dq: DMatrix<f64>,
    /// `c × c`
    pub dlambda_dq: DMatrix<f64>,
}

impl QpSensitivity {
    pub fn zeros(d: usize, c: usize) -> Self {
        Self { dw_dq: DMatrix::zeros(d, c), dlambda_dq: DMatrix::zeros(c, c) }
    }
}

/// Solves a strictly convex QP with the dual active-set method.
pub fn solve(prob: &QpProblem) -> Result<QpSolution, QpError> {
    let d = prob.dim();
    let c = prob.n_constraints();
    let chol = prob.hessian.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let q_inv = chol.inverse();

    let mut w = -(&q_inv * &prob.linear);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_iter = 50 * (c + d).max(1);
    let row_scale: Vec<f64> = (0..c)
        .map(|k| prob.g.row(k).amax().max(prob.rhs[k].abs()).max(1.0))
        .collect();

    // rows whose violation is within rounding of a dependent active set
    let mut tolerated: Vec<usize> = Vec::new();
    let mut iterations = 0;
    'outer: loop {
        // pick the lowest-index violated row
        let violated = (0..c).find(|&k| {
            !active.contains(&k)
                && !tolerated.contains(&k)
                && prob.g.row(k).dot(&w.transpose()) - prob.rhs[k] > 1e-10 * row_scale[k]
        });
        let Some(p) = violated else { break };

        let n_p: DVector<f64> = prob.g.row(p).transpose();
        let snapshot = (w.clone(), active.clone(), u.clone());
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::MaxIterations(max_iter));
            }
            let (z, r) = step_directions(&q_inv, &prob.g, &active, &n_p);
            let violation = n_p.dot(&w) - prob.rhs[p];

            // dual step: largest t keeping the active multipliers non-negative
            let mut t_dual = f64::INFINITY;
            let mut drop_at = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > 0.0 {
                    let t = u[j] / rj;
                    if t < t_dual {
                        t_dual = t;
                        drop_at = Some(j);
                    }
                }
            }
            let curvature = z.dot(&n_p);
            // a full active set spans the space, so z is zero up to rounding
            let independent = active.len() < d && z.amax() > 1e-10 * (&q_inv * &n_p).amax();
            let t_primal = if independent && curvature > 0.0 {
                violation / curvature
            } else {
                f64::INFINITY
            };

            let t = t_dual.min(t_primal);
            if !t.is_finite() {
                // a nearly dependent active set leaves rounding-level violations;
                // the Farkas margin is the violation over the certificate's norm
                let cert_norm = 1.0 + r.iter().map(|x| x.abs()).sum::<f64>();
                if violation <= FEAS_TOL * cert_norm {
                    (w, active, u) = snapshot;
                    tolerated.push(p);
                    continue 'outer;
                }
                let mut y = DVector::zeros(c);
                y[p] = 1.0;
                for (j, &k) in active.iter().enumerate() {
                    y[k] = -r[j];
                }
                return Ok(QpSolution {
                    w,
                    lambda: DVector::zeros(c),
                    active_set: Vec::new(),
                    status: SolveStatus::Infeasible,
                    certificate: Some(y),
                    iterations,
                });
            }

            if t_primal.is_finite() {
                w -= t * &z;
            }
            for (j, uj) in u.iter_mut().enumerate() {
                *uj -= t * r[j];
            }
            u_p += t;

            if t_primal <= t_dual {
                active.push(p);
                u.push(u_p);
                // re-project onto the active set so rounding does not accumulate
                // across long steps
                if let Some((w_eq, u_eq)) = solve_equality_kkt(prob, &active) {
                    if u_eq.iter().all(|&l| l >= -ACTIVE_LAMBDA_TOL) {
                        w = w_eq;
                        u = u_eq.into_iter().map(|l| l.max(0.0)).collect();
                    }
                }
                break;
            }
            let j = drop_at.expect("finite dual step has a blocking row");
            active.remove(j);
            u.remove(j);
        }
    }

    // polish on the final active set
    let (w, lambda_active) = if active.is_empty() {
        (w, Vec::new())
    } else {
        match solve_equality_kkt(prob, &active) {
            Some((w_eq, lam)) => (w_eq, lam),
            None => (w, u.clone()),
        }
    };
    let mut lambda = DVector::zeros(c);
    for (&k, &l) in active.iter().zip(&lambda_active) {
        lambda[k] = l;
    }

    let residual = prob.residual(&w);
    let active_set: Vec<usize> = (0..c).filter(|&k| residual[k].abs() <= FEAS_TOL).collect();
    let weakly_active = active_set.iter().any(|&k| lambda[k] <= ACTIVE_LAMBDA_TOL);
    Ok(QpSolution {
        w,
        lambda,
        active_set,
        status: if weakly_active { SolveStatus::Degenerate } else { SolveStatus::Optimal },
        certificate: None,
        iterations,
    })
}

/// Primal direction `z = H n` and dual direction `r = N* n` for the current
/// active set. Constraints here are `g_k' w <= q_k`, so moving along `-z`
/// reduces the violation of the new row.
fn step_directions(
    q_inv: &DMatrix<f64>,
    g: &DMatrix<f64>,
    active: &[usize],
    n_p: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let qn = q_inv * n_p;
    if active.is_empty() {
        return (qn, DVector::zeros(0));
    }
    let n_act = g.select_rows(active).transpose(); // d × a
    let qn_act = q_inv * &n_act;
    let m = n_act.transpose() * &qn_act;
    let rhs = n_act.transpose() * &qn;
    let r = m.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(active.len()));
    let z = qn - qn_act * &r;
    (z, r)
}

/// Solves `[Q G_S'; G_S 0] [w; λ_S] = [-p; q_S]`.
fn solve_equality_kkt(prob: &QpProblem, rows: &[usize]) -> Option<(DVector<f64>, Vec<f64>)> {
    let d = prob.dim();
    let a = rows.len();
    let mut kkt = DMatrix::zeros(d + a, d + a);
    kkt.view_mut((0, 0), (d, d)).copy_from(&prob.hessian);
    let g_s = prob.g.select_rows(rows);
    kkt.view_mut((0, d), (d, a)).copy_from(&g_s.transpose());
    kkt.view_mut((d, 0), (a, d)).copy_from(&g_s);
    let mut rhs = DVector::zeros(d + a);
    rhs.rows_mut(0, d).copy_from(&(-&prob.linear));
    for (j, &k) in rows.iter().enumerate() {
        rhs[d + j] = prob.rhs[k];
    }
    let sol = kkt.lu().solve(&rhs)?;
    if !sol.iter().all(|x| x.is_finite()) {
        return None;
    }
    Some((sol.rows(0, d).into_owned(), sol.rows(d, a).iter().copied().collect()))
}

/// Rows with `λ > ACTIVE_LAMBDA_TOL` and `|G w - q| < FEAS_TOL`.
pub fn strongly_active(prob: &QpProblem, sol: &QpSolution) -> Vec<usize> {
    let residual = prob.residual(&sol.w);
    (0..prob.n_constraints())
        .filter(|&k| sol.lambda[k] > ACTIVE_LAMBDA_TOL && residual[k].abs() < FEAS_TOL)
        .collect()
}

/// Exact Jacobians of `(w*, λ*)` with respect to `q`.
///
/// The KKT equations are differentiated on the strongly active rows; rows
/// that are strictly slack get zero columns in `dw_dq` and zero rows in
/// `dlambda_dq`. Fails with [`QpError::Degenerate`] when a row is active with
/// a zero multiplier or the active normals are linearly dependent.
pub fn kkt_sensitivity(prob: &QpProblem, sol: &QpSolution) -> Result<QpSensitivity, QpError> {
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Degenerate => return Err(QpError::Degenerate),
        s => return Err(QpError::NotOptimal(s)),
    }
    let d = prob.dim();
    let c = prob.n_constraints();
    let rows = strongly_active(prob, sol);
    let mut sens = QpSensitivity::zeros(d, c);
    if rows.is_empty() {
        return Ok(sens);
    }
    let a = rows.len();
    let mut kkt = DMatrix::zeros(d + a, d + a);
    kkt.view_mut((0, 0), (d, d)).copy_from(&prob.hessian);
    let g_s = prob.g.select_rows(&rows);
    kkt.view_mut((0, d), (d, a)).copy_from(&g_s.transpose());
    kkt.view_mut((d, 0), (a, d)).copy_from(&g_s);

    let lu = kkt.lu();
    let mut rhs = DMatrix::zeros(d + a, a);
    for j in 0..a {
        rhs[(d + j, j)] = 1.0;
    }
    let sol_mat = lu.solve(&rhs).ok_or(QpError::Degenerate)?;
    if !sol_mat.iter().all(|x| x.is_finite()) {
        return Err(QpError::Degenerate);
    }
    for (j, &k) in rows.iter().enumerate() {
        for i in 0..d {
            sens.dw_dq[(i, k)] = sol_mat[(i, j)];
        }
        for (jj, &kk) in rows.iter().enumerate() {
            sens.dlambda_dq[(kk, k)] = sol_mat[(d + jj, j)];
        }
    }
    Ok(sens)
}

/// [`kkt_sensitivity`], falling back to a zero Jacobian (and bumping the
/// process-wide counter) when the active set is degenerate.
pub fn kkt_sensitivity_or_zero(prob: &QpProblem, sol: &QpSolution) -> (QpSensitivity, bool) {
    match kkt_sensitivity(prob, sol) {
        Ok(s) => (s, false),
        Err(_) => {
            DEGENERATE_SENSITIVITIES.fetch_add(1, Ordering::Relaxed);
            log::debug!("degenerate KKT system, using zero sensitivity");
            (QpSensitivity::zeros(prob.dim(), prob.n_constraints()), true)
        }
    }
}

/// Chains `dw/dq` with `dq/dθ` for any parameters that enter only through `q`.
pub fn chain_to_scalar_params(
    sens: &QpSensitivity,
    dq_dtheta: &DMatrix<f64>,
) -> Result<DMatrix<f64>, QpError> {
    if sens.dw_dq.ncols() != dq_dtheta.nrows() {
        return Err(QpError::Shape(format!(
            "dw/dq is {}x{} but dq/dθ is {}x{}",
            sens.dw_dq.nrows(),
            sens.dw_dq.ncols(),
            dq_dtheta.nrows(),
            dq_dtheta.ncols()
        )));
    }
    Ok(&sens.dw_dq * dq_dtheta)
}
