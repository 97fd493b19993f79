//! Longitudinal dynamics of a mixed-autonomy platoon.
//!
//! Vehicle 0 is the head vehicle, vehicles `1..=n` follow it. Exactly one
//! follower is the connected automated vehicle (CAV), whose acceleration is
//! the control input; every other follower is a human-driven vehicle (HDV)
//! governed by the optimal velocity model (OVM):
//!
//! ```text
//! a = alpha * (V(s) - v) + beta * (v_prev - v)
//! V(s) = 0                                           s <= s_st
//!      = v_max / 2 * (1 - cos(pi (s - s_st) / (s_go - s_st)))
//!      = v_max                                       s >= s_go
//! ```
//!
//! States advance with explicit forward Euler.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid OVM parameters: {0}")]
    InvalidOvm(String),
    #[error("invalid platoon configuration: {0}")]
    InvalidConfig(String),
    #[error("CAV acceleration {u} outside actuator bounds [{a_min}, {a_max}]")]
    ActuatorBounds { u: f64, a_min: f64, a_max: f64 },
    #[error("state has {got} vehicles, configuration expects {expected}")]
    StateShape { got: usize, expected: usize },
    #[error("invalid disturbance: {0}")]
    InvalidDisturbance(String),
}

/// Parameters of the optimal velocity car-following law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvmParams {
    pub alpha: f64,
    pub beta: f64,
    pub s_st: f64,
    pub s_go: f64,
    pub v_max: f64,
}

impl Default for OvmParams {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.9,
            s_st: 5.0,
            s_go: 35.0,
            v_max: 30.0,
        }
    }
}

/// First-order expansion of the OVM around an equilibrium:
/// `a ≈ a1 * ds - a2 * dv + a3 * dv_prev`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearCoeffs {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl LinearCoeffs {
    pub fn eval(&self, ds: f64, dv: f64, dv_prev: f64) -> f64 {
        self.a1 * ds - self.a2 * dv + self.a3 * dv_prev
    }
}

impl OvmParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let finite = [self.alpha, self.beta, self.s_st, self.s_go, self.v_max]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(DynamicsError::InvalidOvm("non-finite value".into()));
        }
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(DynamicsError::InvalidOvm(format!(
                "gains must be positive (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        if !(0.0 < self.s_st && self.s_st < self.s_go) {
            return Err(DynamicsError::InvalidOvm(format!(
                "need 0 < s_st < s_go (s_st={}, s_go={})",
                self.s_st, self.s_go
            )));
        }
        if self.v_max <= 0.0 {
            return Err(DynamicsError::InvalidOvm(format!("v_max={} must be positive", self.v_max)));
        }
        Ok(())
    }

    /// Spacing-dependent desired velocity `V(s)`.
    pub fn optimal_velocity(&self, s: f64) -> f64 {
        if s <= self.s_st {
            0.0
        } else if s >= self.s_go {
            self.v_max
        } else {
            let phase = PI * (s - self.s_st) / (self.s_go - self.s_st);
            0.5 * self.v_max * (1.0 - phase.cos())
        }
    }

    /// `V'(s)`; zero on both flat branches.
    pub fn optimal_velocity_slope(&self, s: f64) -> f64 {
        if s <= self.s_st || s >= self.s_go {
            0.0
        } else {
            let width = self.s_go - self.s_st;
            let phase = PI * (s - self.s_st) / width;
            0.5 * self.v_max * PI / width * phase.sin()
        }
    }

    /// Unclamped OVM acceleration.
    pub fn accel(&self, s: f64, v: f64, v_prev: f64) -> f64 {
        self.alpha * (self.optimal_velocity(s) - v) + self.beta * (v_prev - v)
    }

    /// Linearized car-following coefficients at the equilibrium `(s_eq, v_eq)`.
    ///
    /// Fails if `(s_eq, v_eq)` is not an equilibrium of these parameters. On a
    /// flat branch of `V` the spacing coefficient is zero and a warning is
    /// logged.
    pub fn linearize(&self, s_eq: f64, v_eq: f64) -> Result<LinearCoeffs, DynamicsError> {
        let v_star = self.optimal_velocity(s_eq);
        if (v_star - v_eq).abs() > 1e-9 * v_eq.abs().max(1.0) {
            return Err(DynamicsError::InvalidConfig(format!(
                "({s_eq}, {v_eq}) is not an equilibrium: V({s_eq}) = {v_star}"
            )));
        }
        if s_eq <= self.s_st || s_eq >= self.s_go {
            log::warn!("equilibrium spacing {s_eq} on a flat OVM branch, spacing gain is zero");
        }
        Ok(LinearCoeffs {
            a1: self.alpha * self.optimal_velocity_slope(s_eq),
            a2: self.alpha + self.beta,
            a3: self.beta,
        })
    }
}

/// Static description of the platoon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonConfig {
    /// Number of vehicles behind the head vehicle.
    pub n_vehicles: usize,
    /// 1-based index of the CAV.
    pub cav_index: usize,
    /// One entry per HDV slot, in platoon order, skipping the CAV.
    pub hdv_params: Vec<OvmParams>,
    pub dt: f64,
    pub s_eq: f64,
    pub v_eq: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for PlatoonConfig {
    fn default() -> Self {
        Self {
            n_vehicles: 5,
            cav_index: 3,
            hdv_params: vec![OvmParams::default(); 4],
            dt: 0.1,
            s_eq: 20.0,
            v_eq: 15.0,
            a_min: -5.0,
            a_max: 5.0,
        }
    }
}

impl PlatoonConfig {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.n_vehicles == 0 {
            return Err(DynamicsError::InvalidConfig("platoon needs at least one vehicle".into()));
        }
        if self.cav_index == 0 || self.cav_index > self.n_vehicles {
            return Err(DynamicsError::InvalidConfig(format!(
                "cav_index {} outside 1..={}",
                self.cav_index, self.n_vehicles
            )));
        }
        if self.hdv_params.len() != self.n_vehicles - 1 {
            return Err(DynamicsError::InvalidConfig(format!(
                "{} HDV parameter sets for {} HDV slots",
                self.hdv_params.len(),
                self.n_vehicles - 1
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DynamicsError::InvalidConfig(format!("dt={} must be positive", self.dt)));
        }
        if !(self.a_min < 0.0 && 0.0 < self.a_max) {
            return Err(DynamicsError::InvalidConfig(format!(
                "need a_min < 0 < a_max (a_min={}, a_max={})",
                self.a_min, self.a_max
            )));
        }
        for p in &self.hdv_params {
            p.validate()?;
            let v = p.optimal_velocity(self.s_eq);
            if (v - self.v_eq).abs() > 1e-9 * self.v_eq.abs().max(1.0) {
                return Err(DynamicsError::InvalidConfig(format!(
                    "equilibrium mismatch: V({}) = {} but v_eq = {}",
                    self.s_eq, v, self.v_eq
                )));
            }
        }
        Ok(())
    }

    pub fn is_cav(&self, index: usize) -> bool {
        index == self.cav_index
    }

    /// OVM parameters of vehicle `index` (1-based), `None` for the CAV or out of range.
    pub fn hdv(&self, index: usize) -> Option<&OvmParams> {
        if index == 0 || index > self.n_vehicles || index == self.cav_index {
            return None;
        }
        let slot = if index < self.cav_index { index - 1 } else { index - 2 };
        self.hdv_params.get(slot)
    }

    /// Indices of the vehicles behind the CAV.
    pub fn followers(&self) -> std::ops::RangeInclusive<usize> {
        self.cav_index + 1..=self.n_vehicles
    }

    pub fn n_followers(&self) -> usize {
        self.n_vehicles - self.cav_index
    }

    pub fn equilibrium_state(&self) -> PlatoonState {
        PlatoonState {
            t: 0.0,
            v_head: self.v_eq,
            spacing: vec![self.s_eq; self.n_vehicles],
            velocity: vec![self.v_eq; self.n_vehicles],
            collided: false,
        }
    }

    pub fn clamp_accel(&self, a: f64) -> f64 {
        a.clamp(self.a_min, self.a_max)
    }
}

/// Snapshot of the platoon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonState {
    pub t: f64,
    pub v_head: f64,
    /// `spacing[i - 1]` is the gap between vehicle `i` and vehicle `i - 1`.
    pub spacing: Vec<f64>,
    /// `velocity[i - 1]` is the speed of vehicle `i`.
    pub velocity: Vec<f64>,
    /// Latches once any spacing reaches zero.
    pub collided: bool,
}

impl PlatoonState {
    pub fn n_vehicles(&self) -> usize {
        self.spacing.len()
    }

    /// Spacing of vehicle `i` (1-based).
    pub fn s(&self, i: usize) -> f64 {
        self.spacing[i - 1]
    }

    /// Velocity of vehicle `i`; `v(0)` is the head vehicle.
    pub fn v(&self, i: usize) -> f64 {
        if i == 0 {
            self.v_head
        } else {
            self.velocity[i - 1]
        }
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn any_contact(&self) -> bool {
        self.spacing.iter().any(|&s| s <= 0.0)
    }
}

/// Accelerations imposed from outside the car-following laws for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Exogenous {
    pub head_accel: f64,
    /// Overrides the car-following law of one HDV.
    pub forced: Option<(usize, f64)>,
}

/// Per-vehicle accelerations that [`step`] would apply (index 0 is the head).
pub fn accelerations(
    state: &PlatoonState,
    cfg: &PlatoonConfig,
    u_cav: f64,
    exo: Exogenous,
) -> Vec<f64> {
    let n = cfg.n_vehicles;
    let mut acc = Vec::with_capacity(n + 1);
    acc.push(exo.head_accel);
    for i in 1..=n {
        let a = if i == cfg.cav_index {
            u_cav
        } else if let Some((_, forced)) = exo.forced.filter(|(j, _)| *j == i) {
            cfg.clamp_accel(forced)
        } else {
            let p = cfg.hdv(i).expect("validated config has params for every HDV");
            cfg.clamp_accel(p.accel(state.s(i), state.v(i), state.v(i - 1)))
        };
        acc.push(a);
    }
    acc
}

/// One forward-Euler step with only a head-vehicle disturbance.
pub fn step(
    state: &PlatoonState,
    cfg: &PlatoonConfig,
    u_cav: f64,
    head_accel: f64,
) -> Result<PlatoonState, DynamicsError> {
    step_with(state, cfg, u_cav, Exogenous { head_accel, forced: None })
}

/// One forward-Euler step.
///
/// HDV accelerations are clamped to the actuator bounds, velocities are
/// clamped at zero and the collision flag latches.
pub fn step_with(
    state: &PlatoonState,
    cfg: &PlatoonConfig,
    u_cav: f64,
    exo: Exogenous,
) -> Result<PlatoonState, DynamicsError> {
    if state.n_vehicles() != cfg.n_vehicles || state.velocity.len() != cfg.n_vehicles {
        return Err(DynamicsError::StateShape { got: state.n_vehicles(), expected: cfg.n_vehicles });
    }
    if !(cfg.a_min..=cfg.a_max).contains(&u_cav) {
        return Err(DynamicsError::ActuatorBounds { u: u_cav, a_min: cfg.a_min, a_max: cfg.a_max });
    }
    let acc = accelerations(state, cfg, u_cav, exo);
    let dt = cfg.dt;
    let mut next = state.clone();
    next.t = state.t + dt;
    next.v_head = (state.v_head + dt * acc[0]).max(0.0);
    for i in 1..=cfg.n_vehicles {
        next.spacing[i - 1] = state.s(i) + dt * (state.v(i - 1) - state.v(i));
        next.velocity[i - 1] = (state.v(i) + dt * acc[i]).max(0.0);
    }
    next.collided = state.collided || next.any_contact();
    Ok(next)
}

/// Which vehicle a disturbance drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceTarget {
    Head,
    /// An HDV, by 1-based index.
    Vehicle(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceProfile {
    /// White-noise head acceleration with the given standard deviation, so
    /// each step adds `N(0, std) * dt` to the head velocity.
    GaussianRandom { std: f64 },
    /// Accelerate at `accel` for `active_duration`, hold the reached speed for
    /// `hold_duration`, then return to the equilibrium speed at `recovery_rate`.
    Pulse {
        accel: f64,
        active_duration: f64,
        hold_duration: f64,
        recovery_rate: f64,
        target: DisturbanceTarget,
    },
    /// No disturbance.
    None,
}

impl DisturbanceProfile {
    pub fn target(&self) -> DisturbanceTarget {
        match self {
            DisturbanceProfile::Pulse { target, .. } => *target,
            _ => DisturbanceTarget::Head,
        }
    }
}

/// Exogenous acceleration schedule for one disturbance profile.
///
/// `None` entries leave the target alone: zero acceleration for the head,
/// its own car-following law for an HDV.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSequence {
    pub target: DisturbanceTarget,
    pub accels: Vec<Option<f64>>,
}

impl DisturbanceSequence {
    pub fn exogenous(&self, k: usize) -> Exogenous {
        let a = self.accels.get(k).copied().flatten();
        match self.target {
            DisturbanceTarget::Head => Exogenous { head_accel: a.unwrap_or(0.0), forced: None },
            DisturbanceTarget::Vehicle(j) => Exogenous { head_accel: 0.0, forced: a.map(|a| (j, a)) },
        }
    }

    pub fn len(&self) -> usize {
        self.accels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accels.is_empty()
    }
}

/// Builds the exogenous acceleration schedule of `profile` over `horizon` steps.
///
/// Pulse schedules track the nominal speed of the target starting from
/// `cfg.v_eq` so they never command a negative speed and stop exactly at
/// `v_eq` when recovering.
pub fn head_velocity_sequence(
    profile: &DisturbanceProfile,
    rng_seed: u64,
    horizon: usize,
    cfg: &PlatoonConfig,
) -> Result<DisturbanceSequence, DynamicsError> {
    if horizon == 0 {
        return Err(DynamicsError::InvalidDisturbance("horizon must be positive".into()));
    }
    match *profile {
        DisturbanceProfile::None => Ok(DisturbanceSequence {
            target: DisturbanceTarget::Head,
            accels: vec![None; horizon],
        }),
        DisturbanceProfile::GaussianRandom { std } => {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(DynamicsError::InvalidDisturbance(format!("std={std}")));
            }
            let accels = if std == 0.0 {
                vec![Some(0.0); horizon]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                let normal = Normal::new(0.0, std)
                    .map_err(|e| DynamicsError::InvalidDisturbance(e.to_string()))?;
                (0..horizon).map(|_| Some(normal.sample(&mut rng))).collect()
            };
            Ok(DisturbanceSequence { target: DisturbanceTarget::Head, accels })
        }
        DisturbanceProfile::Pulse { accel, active_duration, hold_duration, recovery_rate, target } => {
            if !(active_duration >= 0.0 && hold_duration >= 0.0 && recovery_rate > 0.0) {
                return Err(DynamicsError::InvalidDisturbance(format!(
                    "durations must be non-negative and recovery_rate positive \
                     (active={active_duration}, hold={hold_duration}, rate={recovery_rate})"
                )));
            }
            if let DisturbanceTarget::Vehicle(j) = target {
                if cfg.hdv(j).is_none() {
                    return Err(DynamicsError::InvalidDisturbance(format!(
                        "pulse target {j} is not an HDV"
                    )));
                }
            }
            Ok(DisturbanceSequence {
                target,
                accels: pulse_schedule(accel, active_duration, hold_duration, recovery_rate, horizon, cfg),
            })
        }
    }
}

fn pulse_schedule(
    accel: f64,
    active: f64,
    hold: f64,
    rate: f64,
    horizon: usize,
    cfg: &PlatoonConfig,
) -> Vec<Option<f64>> {
    let dt = cfg.dt;
    let active_steps = (active / dt).round() as usize;
    let hold_steps = (hold / dt).round() as usize;
    let mut out = Vec::with_capacity(horizon);
    let mut v = cfg.v_eq;
    for k in 0..horizon {
        let a = if k < active_steps {
            // never command a speed below zero
            accel.max(-v / dt)
        } else if k < active_steps + hold_steps {
            0.0
        } else {
            let gap = cfg.v_eq - v;
            if gap.abs() <= 1e-12 {
                out.push(None);
                continue;
            }
            gap.signum() * rate.min(gap.abs() / dt)
        };
        v += dt * a;
        out.push(Some(a));
    }
    out
}
