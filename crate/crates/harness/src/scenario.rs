//! Structured disturbance case studies.

use platoon_core::dynamics::{self, DisturbanceProfile, DisturbanceTarget, Exogenous};
use platoon_core::policy::{self, PolicyBundle};
use serde::{Deserialize, Serialize};

use crate::config::{PulseSection, RunConfig};
use crate::sim::{self, ControllerKind, Estimators, StepRecord};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub disturbance: DisturbanceProfile,
    pub controller: ControllerKind,
    /// Equilibrium driving before the disturbance starts (s).
    pub warmup_s: f64,
    /// Time simulated after the disturbance starts (s).
    pub horizon_s: f64,
}

pub fn pulse_profile(p: &PulseSection) -> DisturbanceProfile {
    DisturbanceProfile::Pulse {
        accel: p.accel,
        active_duration: p.duration,
        hold_duration: p.hold,
        recovery_rate: p.recovery_rate,
        target: if p.vehicle == 0 { DisturbanceTarget::Head } else { DisturbanceTarget::Vehicle(p.vehicle) },
    }
}

impl ScenarioSpec {
    /// `s1` (braking ahead of the CAV) or `s2` (a follower speeding up), as configured.
    pub fn named(name: &str, controller: ControllerKind, cfg: &RunConfig) -> Result<Self, HarnessError> {
        let pulse = match name {
            "s1" => &cfg.scenario.s1,
            "s2" => &cfg.scenario.s2,
            _ => return Err(HarnessError::Config(format!("unknown scenario {name:?}; expected s1 or s2"))),
        };
        Ok(Self::with_pulse(name, pulse, controller, cfg))
    }

    pub fn with_pulse(name: &str, pulse: &PulseSection, controller: ControllerKind, cfg: &RunConfig) -> Self {
        Self {
            name: name.to_string(),
            disturbance: pulse_profile(pulse),
            controller,
            warmup_s: cfg.scenario.warmup_s,
            horizon_s: cfg.scenario.horizon_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    /// Smallest spacing of each vehicle, in platoon order.
    pub min_spacing: Vec<f64>,
    pub min_h_cav: f64,
    /// Smallest `h_j` of each follower.
    pub min_h_followers: Vec<f64>,
    /// Time (s) during which some barrier value was negative.
    pub time_below_threshold: f64,
    pub collision: bool,
    pub collision_time: Option<f64>,
    pub max_abs_u_safe: f64,
    /// Steps whose executed action `u_rl + u_safe` left `[a_min, a_max]`.
    pub actuator_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub spec: ScenarioSpec,
    pub records: Vec<StepRecord>,
    pub metrics: ScenarioMetrics,
}

/// Simulates `spec`. `bundle` is required for the learned controllers;
/// `estimators` feed the safety layer and keep learning online.
pub fn run_scenario(
    spec: &ScenarioSpec,
    cfg: &RunConfig,
    bundle: Option<&PolicyBundle>,
    mut estimators: Estimators,
) -> Result<ScenarioResult, HarnessError> {
    let pc = cfg.platoon_config();
    let bundle = match (spec.controller.uses_policy(), bundle) {
        (true, None) => {
            return Err(HarnessError::Config(format!("controller {} needs a checkpoint", spec.controller)))
        }
        (_, b) => b,
    };
    let warmup = (spec.warmup_s / pc.dt).round() as usize;
    let horizon = ((spec.horizon_s / pc.dt).round() as usize).max(1);
    let seq = dynamics::head_velocity_sequence(&spec.disturbance, 0, horizon, &pc)?;
    let tau = bundle.map_or(cfg.safety.tau, |b| b.safety.tau);

    let mut x = pc.equilibrium_state();
    let mut records = Vec::with_capacity(warmup + horizon);
    for k in 0..warmup + horizon {
        let exo = if k < warmup { Exogenous::default() } else { seq.exogenous(k - warmup) };
        let f = match (spec.controller, bundle) {
            (ControllerKind::PureHdv, _) | (_, None) => {
                let u = sim::hdv_like_accel(&x, &pc);
                let params = cfg.safety.params(&pc);
                sim::filter_action(&x, &pc, u, &params, None)?
            }
            (c, Some(b)) => {
                let obs = policy::observe(&x, &pc);
                let (mean, _) = b.policy_forward(&obs).map_err(|e| HarnessError::Numerical {
                    context: format!("{} step {k}: {e}", spec.name),
                    dump: None,
                })?;
                let est = c.uses_safety().then(|| estimators.estimates(&x, &pc, exo.head_accel));
                sim::filter_action(&x, &pc, mean, &b.safety, est.as_ref())?
            }
        };
        let next = sim::advance(&x, &pc, f.u_final, exo)?;
        estimators.observe(&x, &next, &pc);
        records.push(StepRecord::new(&next, &pc, tau, &f));
        x = next;
    }
    let metrics = summarize(&records, pc.dt, (pc.a_min, pc.a_max));
    Ok(ScenarioResult { spec: spec.clone(), records, metrics })
}

fn summarize(records: &[StepRecord], dt: f64, (a_min, a_max): (f64, f64)) -> ScenarioMetrics {
    let n = records[0].state.spacing.len();
    let m = records[0].h.len() - 1;
    let mut min_spacing = vec![f64::INFINITY; n];
    let mut min_h = vec![f64::INFINITY; m + 1];
    let mut below = 0usize;
    let mut collision_time = None;
    let mut max_abs_u_safe: f64 = 0.0;
    let mut actuator_violations = 0;
    for r in records {
        if !(a_min..=a_max).contains(&(r.u_rl + r.u_safe)) {
            actuator_violations += 1;
        }
        for (lo, s) in min_spacing.iter_mut().zip(&r.state.spacing) {
            *lo = lo.min(*s);
        }
        for (lo, h) in min_h.iter_mut().zip(&r.h) {
            *lo = lo.min(*h);
        }
        if r.h.iter().any(|&h| h < 0.0) {
            below += 1;
        }
        if r.state.collided && collision_time.is_none() {
            collision_time = Some(r.state.t);
        }
        max_abs_u_safe = max_abs_u_safe.max(r.u_safe.abs());
    }
    ScenarioMetrics {
        min_spacing,
        min_h_cav: min_h[0],
        min_h_followers: min_h[1..].to_vec(),
        time_below_threshold: below as f64 * dt,
        collision: collision_time.is_some(),
        collision_time,
        max_abs_u_safe,
        actuator_violations,
    }
}
