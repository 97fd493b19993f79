//! Pieces shared by training, evaluation and the scenario studies: HDV
//! acceleration estimators, controllers and one filtered simulation step.

use platoon_core::dynamics::{self, Exogenous, PlatoonConfig, PlatoonState};
use platoon_core::safety::{self, AccelEstimates, SafeActionResult, SafetyParams};
use platoon_core::sysid::{HdvEstimate, OnlineEstimator, Sample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{SysidMode, SysidSection};
use crate::HarnessError;

/// Seed of an independent random stream derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub mod streams {
    pub const NETWORK_INIT: u64 = 1;
    pub const POLICY_NOISE: u64 = 2;
    pub const MINIBATCH: u64 = 3;
    pub const DISTURBANCE: u64 = 4;
    pub const SYSID: u64 = 5;
    pub const EVAL: u64 = 6;
}

/// Source of the follower accelerations fed to the safety layer.
#[derive(Debug, Clone)]
pub enum Estimators {
    Zero,
    Oracle,
    /// One online estimator per follower, in platoon order.
    Learned(Vec<OnlineEstimator>),
}

impl Estimators {
    /// Untrained learned estimators, or the zero/oracle variants.
    pub fn new(mode: SysidMode, cfg: &PlatoonConfig, sec: &SysidSection, seed: u64) -> Self {
        match mode {
            SysidMode::Off => Self::Zero,
            SysidMode::Oracle => Self::Oracle,
            SysidMode::On => Self::Learned(
                cfg.followers()
                    .map(|j| {
                        let s = derive_seed(seed, streams::SYSID, j as u64);
                        let est = HdvEstimate::new(cfg.s_eq, cfg.v_eq, cfg.a_max, sec.lr, s);
                        OnlineEstimator::new(est, sec.window, sec.online_updates_per_step, sec.batch, s)
                    })
                    .collect(),
            ),
        }
    }

    /// Learned estimators restored from a checkpoint.
    pub fn from_snapshot(snapshot: Vec<HdvEstimate>, cfg: &PlatoonConfig, sec: &SysidSection, seed: u64) -> Self {
        Self::Learned(
            snapshot
                .into_iter()
                .zip(cfg.followers())
                .map(|(est, j)| {
                    let s = derive_seed(seed, streams::SYSID, j as u64);
                    OnlineEstimator::new(est, sec.window, sec.online_updates_per_step, sec.batch, s)
                })
                .collect(),
        )
    }

    /// Learned estimators trained on a random-disturbance rollout of the
    /// platoon with the CAV driving like an HDV.
    pub fn pretrained(cfg: &PlatoonConfig, sec: &SysidSection, seed: u64) -> Result<Self, HarnessError> {
        let mut est = Self::new(SysidMode::On, cfg, sec, seed);
        if sec.warmup_steps == 0 {
            return Ok(est);
        }
        est.set_updates_per_step(sec.warmup_updates_per_step);
        let profile = dynamics::DisturbanceProfile::GaussianRandom { std: sec.warmup_std };
        let dist_seed = derive_seed(seed, streams::SYSID, 0);
        let seq = dynamics::head_velocity_sequence(&profile, dist_seed, sec.warmup_steps, cfg)?;
        let mut x = cfg.equilibrium_state();
        for k in 0..sec.warmup_steps {
            let u = hdv_like_accel(&x, cfg);
            let next = dynamics::step_with(&x, cfg, u, seq.exogenous(k))?;
            est.observe(&x, &next, cfg);
            // restart from equilibrium instead of learning from a wreck
            x = if next.collided { cfg.equilibrium_state() } else { next };
        }
        est.set_updates_per_step(sec.online_updates_per_step);
        Ok(est)
    }

    fn set_updates_per_step(&mut self, n: usize) {
        if let Self::Learned(v) = self {
            v.iter_mut().for_each(|e| e.updates_per_step = n);
        }
    }

    pub fn snapshot(&self) -> Option<Vec<HdvEstimate>> {
        match self {
            Self::Learned(v) => Some(v.iter().map(|e| e.est.clone()).collect()),
            _ => None,
        }
    }

    /// Estimated accelerations in state `x`. `head_accel` is used when the
    /// CAV's predecessor is the head vehicle.
    pub fn estimates(&self, x: &PlatoonState, cfg: &PlatoonConfig, head_accel: f64) -> AccelEstimates {
        let truth = |j: usize| match cfg.hdv(j) {
            Some(p) => cfg.clamp_accel(p.accel(x.s(j), x.v(j), x.v(j - 1))),
            None => head_accel,
        };
        let pred = cfg.cav_index - 1;
        match self {
            Self::Zero => AccelEstimates {
                predecessor: if pred == 0 { head_accel } else { 0.0 },
                followers: vec![0.0; cfg.n_followers()],
            },
            Self::Oracle => AccelEstimates { predecessor: truth(pred), followers: cfg.followers().map(truth).collect() },
            Self::Learned(v) => AccelEstimates {
                predecessor: if pred == 0 { head_accel } else { truth(pred) },
                followers: cfg.followers().zip(v).map(|(j, e)| e.est.predict(x.s(j), x.v(j), x.v(j - 1))).collect(),
            },
        }
    }

    /// Feeds the observed follower transitions `prev → next` to learned estimators.
    pub fn observe(&mut self, prev: &PlatoonState, next: &PlatoonState, cfg: &PlatoonConfig) {
        if let Self::Learned(v) = self {
            for (j, e) in cfg.followers().zip(v.iter_mut()) {
                e.observe(Sample {
                    s: prev.s(j),
                    v: prev.v(j),
                    v_prev: prev.v(j - 1),
                    accel: (next.v(j) - prev.v(j)) / cfg.dt,
                });
            }
        }
    }
}

/// The CAV driving with the first HDV's car-following law.
pub fn hdv_like_accel(x: &PlatoonState, cfg: &PlatoonConfig) -> f64 {
    let i = cfg.cav_index;
    cfg.clamp_accel(cfg.hdv_params[0].accel(x.s(i), x.v(i), x.v(i - 1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    PureHdv,
    Ppo,
    PpoSafety,
    PpoSafetySysid,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [Self::PureHdv, Self::Ppo, Self::PpoSafety, Self::PpoSafetySysid];

    pub fn name(self) -> &'static str {
        match self {
            Self::PureHdv => "pure_hdv",
            Self::Ppo => "ppo",
            Self::PpoSafety => "ppo_safety",
            Self::PpoSafetySysid => "ppo_safety_sysid",
        }
    }

    pub fn uses_policy(self) -> bool {
        self != Self::PureHdv
    }

    pub fn uses_safety(self) -> bool {
        matches!(self, Self::PpoSafety | Self::PpoSafetySysid)
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown controller {s:?}; expected pure_hdv, ppo, ppo_safety or ppo_safety_sysid"))
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Executed action and everything the learner and the logs need about it.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub u_rl: f64,
    pub u_final: f64,
    pub u_safe: f64,
    pub du_final_dk: Vec<f64>,
    pub safety: Option<SafeActionResult>,
}

/// Passes `u_rl` through the safety layer, or only through the actuator
/// limits when the layer is off. Without the layer the coefficients have no
/// effect on the action, so their sensitivities are zero.
pub fn filter_action(
    x: &PlatoonState,
    cfg: &PlatoonConfig,
    u_rl: f64,
    params: &SafetyParams,
    est: Option<&AccelEstimates>,
) -> Result<Filtered, HarnessError> {
    match est {
        Some(est) => {
            let r = safety::safe_action(x, cfg, u_rl, params, est)?;
            Ok(Filtered {
                u_rl,
                u_final: r.u_final,
                u_safe: r.u_safe,
                du_final_dk: r.du_final_dk.clone(),
                safety: Some(r),
            })
        }
        None => {
            let u_final = cfg.clamp_accel(u_rl);
            Ok(Filtered {
                u_rl,
                u_final,
                u_safe: u_final - u_rl,
                du_final_dk: vec![0.0; params.trainable().len()],
                safety: None,
            })
        }
    }
}

/// One logged simulation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// State after the step.
    pub state: PlatoonState,
    pub u_rl: f64,
    pub u_safe: f64,
    /// `h_i` then one `h_j` per follower, in the post-step state.
    pub h: Vec<f64>,
    pub active_mask: u32,
    pub slacks: Vec<f64>,
}

impl StepRecord {
    pub fn new(next: &PlatoonState, cfg: &PlatoonConfig, tau: f64, f: &Filtered) -> Self {
        let (h_i, h_j) = safety::cbf_values(next, cfg, tau);
        let (active_mask, slacks) = match &f.safety {
            Some(r) => (r.active_mask(), r.slacks.clone()),
            None => (0, vec![0.0; cfg.n_followers()]),
        };
        Self {
            state: next.clone(),
            u_rl: f.u_rl,
            u_safe: f.u_safe,
            h: std::iter::once(h_i).chain(h_j).collect(),
            active_mask,
            slacks,
        }
    }
}

/// Steps the platoon once with `u_final`, returning the new state.
pub fn advance(x: &PlatoonState, cfg: &PlatoonConfig, u_final: f64, exo: Exogenous) -> Result<PlatoonState, HarnessError> {
    Ok(dynamics::step_with(x, cfg, u_final, exo)?)
}

/// Fresh RNG for a derived stream.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_across_streams_and_indices() {
        let a = derive_seed(7, 1, 0);
        assert_ne!(a, derive_seed(7, 2, 0));
        assert_ne!(a, derive_seed(7, 1, 1));
        assert_ne!(a, derive_seed(8, 1, 0));
        assert_eq!(a, derive_seed(7, 1, 0));
    }

    #[test]
    fn oracle_estimates_are_zero_at_equilibrium() {
        let cfg = PlatoonConfig::default();
        let e = Estimators::Oracle.estimates(&cfg.equilibrium_state(), &cfg, 0.0);
        // V(s_eq) = v_eq up to rounding
        assert!(e.followers.iter().chain([&e.predecessor]).all(|a| a.abs() < 1e-12));
        assert_eq!(e.followers.len(), 2);
    }

    #[test]
    fn controller_names_round_trip() {
        for c in ControllerKind::ALL {
            assert_eq!(c.name().parse::<ControllerKind>().unwrap(), c);
        }
        assert!("ppo_magic".parse::<ControllerKind>().is_err());
    }

    #[test]
    fn unfiltered_action_is_clamped() {
        let cfg = PlatoonConfig::default();
        let p = SafetyParams::for_platoon(&cfg);
        let f = filter_action(&cfg.equilibrium_state(), &cfg, 7.0, &p, None).unwrap();
        assert_eq!(f.u_final, 5.0);
        assert_eq!(f.u_safe, -2.0);
        assert!(f.safety.is_none());
    }

    #[test]
    fn pretraining_moves_the_estimators() {
        let cfg = PlatoonConfig::default();
        let sec = SysidSection { warmup_steps: 200, warmup_updates_per_step: 2, ..SysidSection::default() };
        let est = Estimators::pretrained(&cfg, &sec, 3).unwrap();
        let snap = est.snapshot().unwrap();
        assert_eq!(snap.len(), 2);
        assert!(snap.iter().all(|e| e.coeffs.iter().any(|&c| c != 0.0)));
    }
}
