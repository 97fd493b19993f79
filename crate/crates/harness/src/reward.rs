//! Per-step reward of the CAV: string stability, headway efficiency and
//! time-to-collision safety.

use platoon_core::dynamics::{PlatoonConfig, PlatoonState};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Stability weight per follower, each in `(0, 1]`.
    pub kappa: Vec<f64>,
    /// Time headway (s) at or above which the efficiency penalty applies.
    pub headway_threshold: f64,
    /// Time to collision (s) below which the safety term is active.
    pub ttc_threshold: f64,
    /// Lower clamp on the time to collision inside the logarithm.
    pub ttc_floor: f64,
    /// Clamp on each velocity difference in the stability term (m/s).
    pub dv_clamp: f64,
    /// Added once on the step a collision happens; the episode then ends.
    pub collision_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            kappa: vec![1.0; 2],
            headway_threshold: 2.5,
            ttc_threshold: 4.0,
            ttc_floor: 0.1,
            dv_clamp: 30.0,
            collision_penalty: -100.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self, n_followers: usize) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(format!("reward: {m}")));
        if self.kappa.len() != n_followers {
            return bad(format!("{} kappa values for {n_followers} followers", self.kappa.len()));
        }
        if self.kappa.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
            return bad("kappa values must lie in (0, 1]".into());
        }
        if !(self.headway_threshold > 0.0 && self.ttc_threshold > 0.0) {
            return bad("thresholds must be positive".into());
        }
        if !(self.ttc_floor > 0.0 && self.ttc_floor <= self.ttc_threshold && self.dv_clamp > 0.0) {
            return bad("need 0 < ttc_floor <= ttc_threshold and dv_clamp > 0".into());
        }
        if !(self.collision_penalty <= 0.0 && self.collision_penalty.is_finite()) {
            return bad("collision_penalty must be finite and non-positive".into());
        }
        Ok(())
    }

    /// Largest possible `|r_total|` under the configured clamps.
    pub fn bound(&self) -> f64 {
        let kappa: f64 = self.kappa.iter().sum();
        (1.0 + kappa) * self.dv_clamp.powi(2)
            + 1.0
            + (self.ttc_floor / self.ttc_threshold).ln().abs()
            + self.collision_penalty.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub stability: f64,
    pub efficiency: f64,
    pub safety: f64,
    pub collision: f64,
    pub total: f64,
}

/// Time headway `s_i / v_i`; infinite for a stopped CAV.
pub fn time_headway(s: f64, v: f64) -> f64 {
    if v <= 0.0 {
        f64::INFINITY
    } else {
        s / v
    }
}

/// Time to collision with the predecessor; `None` unless the CAV is closing in.
pub fn time_to_collision(s: f64, v: f64, v_prev: f64) -> Option<f64> {
    let closing = v - v_prev;
    (closing > 0.0).then(|| s.max(0.0) / closing)
}

/// Reward for arriving in `next`. `collided_now` marks the step on which
/// the collision flag first latched.
pub fn reward(next: &PlatoonState, cfg: &PlatoonConfig, rc: &RewardConfig, collided_now: bool) -> RewardTerms {
    let i = cfg.cav_index;
    let v_pred = next.v(i - 1);
    let dv = |v: f64| (v - v_pred).clamp(-rc.dv_clamp, rc.dv_clamp);
    let stability =
        -dv(next.v(i)).powi(2) - cfg.followers().zip(&rc.kappa).map(|(j, k)| k * dv(next.v(j)).powi(2)).sum::<f64>();
    let efficiency = if time_headway(next.s(i), next.v(i)) >= rc.headway_threshold { -1.0 } else { 0.0 };
    let safety = match time_to_collision(next.s(i), next.v(i), v_pred) {
        Some(ttc) if ttc <= rc.ttc_threshold => (ttc.max(rc.ttc_floor) / rc.ttc_threshold).ln(),
        _ => 0.0,
    };
    let collision = if collided_now { rc.collision_penalty } else { 0.0 };
    RewardTerms { stability, efficiency, safety, collision, total: stability + efficiency + safety + collision }
}
