//! Control-barrier-function safety filter for the CAV.
//!
//! The filter solves, for `w = (u_safe, σ_{i+1}, ..., σ_n)`,
//!
//! ```text
//! minimize    u_safe² + Σ b_j σ_j²
//! subject to  Lf h_i + Lg h_i (u_safe + u_rl) + k_i h_i        >= 0
//!             Lf h_j + Lg h_j (u_safe + u_rl) + k_j h_j + σ_j  >= 0   (followers j)
//!             u_safe + u_rl <= F̂_{i-1} + k_f (v_{i-1} - v_i - τ a_min)
//!             a_min <= u_safe + u_rl <= a_max
//! ```
//!
//! with the barrier candidates `h_i = s_i - τ v_i` and
//! `h_j = s_j - s_i - τ (v_j - v_i)`. Every dependence on `u_rl` and on the
//! trainable coefficients sits in the constraint right-hand side, so the QP
//! sensitivity `dw*/dq` chains directly into gradients for both.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{PlatoonConfig, PlatoonState};
use crate::qp::{self, QpError, QpProblem, SolveStatus};

static INFEASIBLE_FALLBACKS: AtomicU64 = AtomicU64::new(0);

/// Number of [`safe_action`] calls that found the QP infeasible and braked.
pub fn infeasible_fallback_count() -> u64 {
    INFEASIBLE_FALLBACKS.load(Ordering::Relaxed)
}

/// Bounds applied when projecting trainable coefficients.
pub const K_MIN: f64 = 1e-3;
pub const K_MAX: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("invalid safety parameters: {0}")]
    InvalidParams(String),
    #[error("{got} follower estimates for {expected} followers")]
    MissingEstimate { got: usize, expected: usize },
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Barrier-function parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyParams {
    /// Minimum time headway (s).
    pub tau: f64,
    /// Linear class-K coefficients: `k[0]` for the CAV, then one per follower.
    pub k: Vec<f64>,
    /// Feasibility-constraint coefficient.
    pub k_f: f64,
    /// Slack penalties, one per follower.
    pub b: Vec<f64>,
}

impl SafetyParams {
    pub fn for_platoon(cfg: &PlatoonConfig) -> Self {
        let m = cfg.n_followers();
        Self { tau: 0.3, k: vec![1.0; m + 1], k_f: 10.0, b: vec![1.0; m] }
    }

    pub fn validate(&self, cfg: &PlatoonConfig) -> Result<(), SafetyError> {
        let m = cfg.n_followers();
        // Lg h = ∓τ must be nonzero for the barriers to have relative degree one
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(SafetyError::InvalidParams(format!("tau={} must be positive", self.tau)));
        }
        if self.k.len() != m + 1 || self.b.len() != m {
            return Err(SafetyError::InvalidParams(format!(
                "{} followers need {} k values and {} slack penalties, got {} and {}",
                m,
                m + 1,
                m,
                self.k.len(),
                self.b.len()
            )));
        }
        if self.k.iter().chain([&self.k_f]).any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(SafetyError::InvalidParams("k and k_f must be positive".into()));
        }
        if self.b.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(SafetyError::InvalidParams("slack penalties must be positive".into()));
        }
        Ok(())
    }

    /// Trainable coefficients in gradient order: `k_i, k_{i+1}, ..., k_n, k_f`.
    pub fn trainable(&self) -> Vec<f64> {
        self.k.iter().copied().chain([self.k_f]).collect()
    }

    pub fn set_trainable(&mut self, theta: &[f64]) {
        let m = self.k.len();
        self.k.copy_from_slice(&theta[..m]);
        self.k_f = theta[m];
    }

    /// Clamps the trainable coefficients back into their admissible range.
    ///
    /// Barrier rates are also capped at `1/dt`: the constraint bounds the
    /// per-step decrease of `h` by `dt·k·h`, which keeps `h >= 0` only while
    /// `k·dt <= 1`.
    pub fn project(&mut self, dt: f64) {
        let k_cap = K_MAX.min(1.0 / dt);
        for k in &mut self.k {
            *k = k.clamp(K_MIN, k_cap);
        }
        self.k_f = self.k_f.clamp(K_MIN, K_MAX);
    }
}

/// Estimated accelerations of the HDVs the constraints depend on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccelEstimates {
    /// `F̂_{i-1}`, the CAV's predecessor.
    pub predecessor: f64,
    /// `F̂_j` for each follower, in platoon order.
    pub followers: Vec<f64>,
}

impl AccelEstimates {
    pub fn zeros(cfg: &PlatoonConfig) -> Self {
        Self { predecessor: 0.0, followers: vec![0.0; cfg.n_followers()] }
    }
}

/// Barrier values `(h_i, [h_j])`.
pub fn cbf_values(state: &PlatoonState, cfg: &PlatoonConfig, tau: f64) -> (f64, Vec<f64>) {
    let i = cfg.cav_index;
    let h_i = state.s(i) - tau * state.v(i);
    let h_j = cfg
        .followers()
        .map(|j| state.s(j) - state.s(i) - tau * (state.v(j) - state.v(i)))
        .collect();
    (h_i, h_j)
}

/// Raw time-headway margins `s_j - τ v_j` for the CAV and its followers.
pub fn headway_margins(state: &PlatoonState, cfg: &PlatoonConfig, tau: f64) -> Vec<f64> {
    (cfg.cav_index..=cfg.n_vehicles).map(|j| state.s(j) - tau * state.v(j)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LieDerivatives {
    pub lf_h_i: f64,
    pub lg_h_i: f64,
    pub lf_h_j: Vec<f64>,
    pub lg_h_j: Vec<f64>,
}

pub fn lie_derivatives(
    state: &PlatoonState,
    cfg: &PlatoonConfig,
    tau: f64,
    est: &AccelEstimates,
) -> Result<LieDerivatives, SafetyError> {
    let m = cfg.n_followers();
    if est.followers.len() != m {
        return Err(SafetyError::MissingEstimate { got: est.followers.len(), expected: m });
    }
    let i = cfg.cav_index;
    let dv_i = state.v(i - 1) - state.v(i);
    let lf_h_j = cfg
        .followers()
        .zip(&est.followers)
        .map(|(j, f_hat)| -dv_i + state.v(j - 1) - state.v(j) - tau * f_hat)
        .collect();
    Ok(LieDerivatives { lf_h_i: dv_i, lg_h_i: -tau, lf_h_j, lg_h_j: vec![tau; m] })
}

/// The assembled filter QP together with the analytic right-hand-side
/// derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfQp {
    pub problem: QpProblem,
    /// `dq/du_rl`, one entry per row.
    pub dq_du_rl: DVector<f64>,
    /// `dq/dθ` for `θ = (k_i, k_{i+1..n}, k_f)`.
    pub dq_dk: DMatrix<f64>,
}

/// Row layout of the assembled QP.
pub mod rows {
    pub const CAV: usize = 0;
    pub fn follower(j: usize) -> usize {
        1 + j
    }
    pub fn feasibility(m: usize) -> usize {
        1 + m
    }
    pub fn upper(m: usize) -> usize {
        2 + m
    }
    pub fn lower(m: usize) -> usize {
        3 + m
    }
}

/// Builds the filter QP in `G w <= q` form with rows
/// `[CAV, followers..., feasibility, upper bound, lower bound]`.
pub fn assemble_cbf_qp(
    state: &PlatoonState,
    cfg: &PlatoonConfig,
    u_rl: f64,
    params: &SafetyParams,
    est: &AccelEstimates,
) -> Result<CbfQp, SafetyError> {
    params.validate(cfg)?;
    let m = cfg.n_followers();
    let lie = lie_derivatives(state, cfg, params.tau, est)?;
    let (h_i, h_j) = cbf_values(state, cfg, params.tau);
    let i = cfg.cav_index;
    let d = 1 + m;
    let c = m + 4;
    let tau = params.tau;

    let mut g = DMatrix::zeros(c, d);
    let mut q = DVector::zeros(c);
    let mut dq_du = DVector::zeros(c);
    let mut dq_dk = DMatrix::zeros(c, m + 2);

    // Lf h_i + Lg h_i (u_safe + u_rl) + k_i h_i >= 0  with Lg h_i = -τ
    g[(rows::CAV, 0)] = -lie.lg_h_i;
    q[rows::CAV] = lie.lf_h_i + lie.lg_h_i * u_rl + params.k[0] * h_i;
    dq_du[rows::CAV] = lie.lg_h_i;
    dq_dk[(rows::CAV, 0)] = h_i;

    // Lf h_j + Lg h_j (u_safe + u_rl) + k_j h_j + σ_j >= 0  with Lg h_j = τ
    for j in 0..m {
        let r = rows::follower(j);
        g[(r, 0)] = -lie.lg_h_j[j];
        g[(r, 1 + j)] = -1.0;
        q[r] = lie.lf_h_j[j] + lie.lg_h_j[j] * u_rl + params.k[1 + j] * h_j[j];
        dq_du[r] = lie.lg_h_j[j];
        dq_dk[(r, 1 + j)] = h_j[j];
    }

    let feas_margin = state.v(i - 1) - state.v(i) - tau * cfg.a_min;
    let r = rows::feasibility(m);
    g[(r, 0)] = 1.0;
    q[r] = est.predecessor + params.k_f * feas_margin - u_rl;
    dq_du[r] = -1.0;
    dq_dk[(r, m + 1)] = feas_margin;

    let r = rows::upper(m);
    g[(r, 0)] = 1.0;
    q[r] = cfg.a_max - u_rl;
    dq_du[r] = -1.0;

    let r = rows::lower(m);
    g[(r, 0)] = -1.0;
    q[r] = -cfg.a_min + u_rl;
    dq_du[r] = 1.0;

    let mut diag = vec![1.0; d];
    for j in 0..m {
        diag[1 + j] = params.b[j];
    }
    // the objective u² + Σ b σ² is half of w' diag(2, 2b) w
    let diag: Vec<f64> = diag.iter().map(|x| 2.0 * x).collect();
    let problem = QpProblem::diagonal(&diag, g, q, None)?;
    Ok(CbfQp { problem, dq_du_rl: dq_du, dq_dk })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafeActionResult {
    pub u_final: f64,
    pub u_safe: f64,
    pub slacks: Vec<f64>,
    pub du_final_du_rl: f64,
    /// Gradient for `θ = (k_i, k_{i+1..n}, k_f)`.
    pub du_final_dk: Vec<f64>,
    pub qp_status: SolveStatus,
    pub active_constraints: Vec<usize>,
    /// The sensitivity fell back to zero on a degenerate active set.
    pub degenerate_gradient: bool,
}

impl SafeActionResult {
    /// Active rows packed into a bitmask (row k is bit k).
    pub fn active_mask(&self) -> u32 {
        self.active_constraints.iter().fold(0, |m, &k| m | (1 << k))
    }
}

/// Filters `u_rl` through the barrier QP.
///
/// An infeasible QP brakes at `a_min`, reports `SolveStatus::Infeasible`
/// and bumps [`infeasible_fallback_count`].
pub fn safe_action(
    state: &PlatoonState,
    cfg: &PlatoonConfig,
    u_rl: f64,
    params: &SafetyParams,
    est: &AccelEstimates,
) -> Result<SafeActionResult, SafetyError> {
    let m = cfg.n_followers();
    let cbf = assemble_cbf_qp(state, cfg, u_rl, params, est)?;
    let sol = qp::solve(&cbf.problem)?;
    if sol.status == SolveStatus::Infeasible {
        INFEASIBLE_FALLBACKS.fetch_add(1, Ordering::Relaxed);
        log::warn!("safety QP infeasible at t={:.2}, braking", state.t);
        let (u_final, u_safe) = compose(u_rl, cfg.a_min - u_rl, cfg.a_min, cfg.a_max);
        return Ok(SafeActionResult {
            u_final,
            u_safe,
            slacks: vec![0.0; m],
            du_final_du_rl: 0.0,
            du_final_dk: vec![0.0; m + 2],
            qp_status: SolveStatus::Infeasible,
            active_constraints: Vec::new(),
            degenerate_gradient: false,
        });
    }

    let (sens, degenerate) = qp::kkt_sensitivity_or_zero(&cbf.problem, &sol);
    let du_mat = DMatrix::from_column_slice(cbf.dq_du_rl.len(), 1, cbf.dq_du_rl.as_slice());
    let dw_du = qp::chain_to_scalar_params(&sens, &du_mat)?;
    let dw_dk = qp::chain_to_scalar_params(&sens, &cbf.dq_dk)?;

    let (u_final, u_safe) = compose(u_rl, sol.w[0], cfg.a_min, cfg.a_max);
    Ok(SafeActionResult {
        u_final,
        u_safe,
        slacks: sol.w.iter().skip(1).copied().collect(),
        du_final_du_rl: 1.0 + dw_du[(0, 0)],
        du_final_dk: dw_dk.row(0).iter().copied().collect(),
        qp_status: sol.status,
        active_constraints: sol.active_set,
        degenerate_gradient: degenerate,
    })
}

/// Returns `(u_final, u_safe)` with `u_final == u_rl + u_safe` in floating
/// point and `a_min <= u_final <= a_max`.
///
/// When `u_rl` and `u_safe` live on a coarser grid than the bound, the bound
/// itself may not be reachable as a sum; the closest sum inside is used.
fn compose(u_rl: f64, u_safe: f64, a_min: f64, a_max: f64) -> (f64, f64) {
    let mut u_safe = u_safe;
    let sum = u_rl + u_safe;
    if (a_min..=a_max).contains(&sum) {
        return (sum, u_safe);
    }
    u_safe = sum.clamp(a_min, a_max) - u_rl;
    for _ in 0..64 {
        let sum = u_rl + u_safe;
        if sum > a_max {
            u_safe = u_safe.next_down();
        } else if sum < a_min {
            u_safe = u_safe.next_up();
        } else {
            return (sum, u_safe);
        }
    }
    unreachable!("no in-bounds split for u_rl={u_rl}")
}
