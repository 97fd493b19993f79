//! Run configuration, read from a TOML file. Every field has a default, so an
//! empty file (or no file) is a valid configuration.

use std::path::Path;

use platoon_core::dynamics::{OvmParams, PlatoonConfig};
use platoon_core::policy::PpoHyper;
use platoon_core::safety::SafetyParams;
use serde::{Deserialize, Serialize};

use crate::bench::BenchSection;
use crate::reward::RewardConfig;
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SysidMode {
    /// Online-learned estimates.
    #[default]
    On,
    /// All estimates zero.
    Off,
    /// The true car-following laws.
    Oracle,
}

impl std::str::FromStr for SysidMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "on" => Ok(Self::On),
            "off" => Ok(Self::Off),
            "oracle" => Ok(Self::Oracle),
            _ => Err(format!("expected on, off or oracle, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatoonSection {
    pub n_vehicles: usize,
    /// 1-based.
    pub cav_index: usize,
    /// Shared by every HDV.
    pub ovm: OvmParams,
    pub dt: f64,
    pub s_eq: f64,
    pub v_eq: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for PlatoonSection {
    fn default() -> Self {
        let c = PlatoonConfig::default();
        Self {
            n_vehicles: c.n_vehicles,
            cav_index: c.cav_index,
            ovm: OvmParams::default(),
            dt: c.dt,
            s_eq: c.s_eq,
            v_eq: c.v_eq,
            a_min: c.a_min,
            a_max: c.a_max,
        }
    }
}

impl PlatoonSection {
    pub fn to_config(&self) -> PlatoonConfig {
        PlatoonConfig {
            n_vehicles: self.n_vehicles,
            cav_index: self.cav_index,
            hdv_params: vec![self.ovm; self.n_vehicles.saturating_sub(1)],
            dt: self.dt,
            s_eq: self.s_eq,
            v_eq: self.v_eq,
            a_min: self.a_min,
            a_max: self.a_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetySection {
    pub enabled: bool,
    pub tau: f64,
    /// Initial class-K coefficient for the CAV and every follower.
    pub k_init: f64,
    pub k_f_init: f64,
    pub slack_penalty: f64,
    /// Learn the barrier coefficients together with the policy.
    pub train_coefficients: bool,
}

impl Default for SafetySection {
    fn default() -> Self {
        Self { enabled: true, tau: 0.3, k_init: 1.0, k_f_init: 10.0, slack_penalty: 1.0, train_coefficients: true }
    }
}

impl SafetySection {
    pub fn params(&self, cfg: &PlatoonConfig) -> SafetyParams {
        let m = cfg.n_followers();
        SafetyParams { tau: self.tau, k: vec![self.k_init; m + 1], k_f: self.k_f_init, b: vec![self.slack_penalty; m] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysidSection {
    pub mode: SysidMode,
    pub lr: f64,
    pub window: usize,
    /// Minibatch updates per observation while pre-training.
    pub warmup_updates_per_step: usize,
    /// Minibatch updates per observation once the estimator is in use.
    pub online_updates_per_step: usize,
    pub batch: usize,
    /// Length of the random-disturbance rollout that pre-trains the estimators.
    pub warmup_steps: usize,
    pub warmup_std: f64,
}

impl Default for SysidSection {
    fn default() -> Self {
        Self {
            mode: SysidMode::On,
            lr: 1e-4,
            window: 5000,
            warmup_updates_per_step: 20,
            online_updates_per_step: 1,
            batch: 64,
            warmup_steps: 3000,
            warmup_std: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub episodes: usize,
    pub episode_steps: usize,
    /// Standard deviation of the head vehicle's white-noise acceleration.
    pub disturbance_std: f64,
    pub hidden: Vec<usize>,
    /// Episodes run by `eval`.
    pub eval_episodes: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self { episodes: 500, episode_steps: 600, disturbance_std: 2.0, hidden: vec![64, 64], eval_episodes: 20 }
    }
}

/// One braking or acceleration pulse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSection {
    pub accel: f64,
    pub duration: f64,
    /// Time the reached speed is held before recovering.
    pub hold: f64,
    /// Recovery toward the equilibrium speed (m/s²).
    pub recovery_rate: f64,
    /// `0` for the head vehicle, otherwise the 1-based index of an HDV.
    pub vehicle: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// Equilibrium driving before the disturbance starts.
    pub warmup_s: f64,
    /// Time simulated after the disturbance starts.
    pub horizon_s: f64,
    pub s1: PulseSection,
    pub s2: PulseSection,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            warmup_s: 5.0,
            horizon_s: 40.0,
            s1: PulseSection { accel: -4.0, duration: 2.5, hold: 2.5, recovery_rate: 1.0, vehicle: 2 },
            s2: PulseSection { accel: 1.0, duration: 4.0, hold: 4.0, recovery_rate: 1.0, vehicle: 5 },
        }
    }
}

/// Evenly spaced magnitude and duration axes of one sweep, and the vehicle
/// the pulse is applied to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub magnitude: [f64; 2],
    pub duration: [f64; 2],
    /// Same convention as [`PulseSection::vehicle`].
    pub vehicle: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionSection {
    pub coarse_points: usize,
    pub fine_points: usize,
    pub s1: GridAxes,
    pub s2: GridAxes,
}

impl Default for RegionSection {
    fn default() -> Self {
        Self {
            coarse_points: 10,
            fine_points: 20,
            // the CAV's direct predecessor and direct follower
            s1: GridAxes { magnitude: [-1.0, -5.0], duration: [0.5, 5.0], vehicle: 2 },
            s2: GridAxes { magnitude: [0.25, 2.0], duration: [1.0, 8.0], vehicle: 4 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub platoon: PlatoonSection,
    pub reward: RewardConfig,
    pub ppo: PpoHyper,
    pub training: TrainingSection,
    pub safety: SafetySection,
    pub sysid: SysidSection,
    pub scenario: ScenarioSection,
    pub region: RegionSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            platoon: PlatoonSection::default(),
            reward: RewardConfig::default(),
            ppo: PpoHyper::default(),
            training: TrainingSection::default(),
            safety: SafetySection::default(),
            sysid: SysidSection::default(),
            scenario: ScenarioSection::default(),
            region: RegionSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn platoon_config(&self) -> PlatoonConfig {
        self.platoon.to_config()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = self.platoon_config();
        cfg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.safety.params(&cfg).validate(&cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
        self.reward.validate(cfg.n_followers())?;
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let p = &self.ppo;
        if !(p.lr > 0.0 && p.clip > 0.0 && p.epochs > 0 && p.rollout_steps > 0 && p.minibatch > 0) {
            return bad("ppo: lr, clip, epochs, rollout_steps and minibatch must be positive".into());
        }
        if !(0.0 < p.gamma && p.gamma <= 1.0 && (0.0..=1.0).contains(&p.lam)) {
            return bad(format!("ppo: need gamma in (0, 1] and lam in [0, 1], got {} and {}", p.gamma, p.lam));
        }
        let t = &self.training;
        if t.episode_steps == 0 || t.hidden.is_empty() || t.hidden.contains(&0) || !(t.disturbance_std >= 0.0) {
            return bad("training: episode_steps and hidden widths must be positive".into());
        }
        let s = &self.sysid;
        if !(s.lr > 0.0) || s.window == 0 || s.batch == 0 || !(s.warmup_std >= 0.0) {
            return bad("sysid: lr, window and batch must be positive".into());
        }
        let sc = &self.scenario;
        if !(sc.warmup_s >= 0.0 && sc.horizon_s > 0.0) {
            return bad("scenario: warmup_s must be non-negative and horizon_s positive".into());
        }
        for (name, pulse) in [("s1", &sc.s1), ("s2", &sc.s2)] {
            if pulse.vehicle != 0 && cfg.hdv(pulse.vehicle).is_none() {
                return bad(format!("scenario.{name}: vehicle {} is not an HDV", pulse.vehicle));
            }
            if !(pulse.duration >= 0.0 && pulse.hold >= 0.0 && pulse.recovery_rate > 0.0) {
                return bad(format!("scenario.{name}: invalid pulse timing"));
            }
        }
        for (name, axes) in [("s1", &self.region.s1), ("s2", &self.region.s2)] {
            if axes.vehicle != 0 && cfg.hdv(axes.vehicle).is_none() {
                return bad(format!("region.{name}: vehicle {} is not an HDV", axes.vehicle));
            }
        }
        if self.region.coarse_points < 2 || self.region.fine_points < 2 {
            return bad("region: grids need at least two points per axis".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[training]\nepisodes = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.training.episodes, 3);
        assert_eq!(cfg.training.episode_steps, 600);
        assert_eq!(cfg.ppo.rollout_steps, 2048);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("[training]\nepisodez = 3\n").is_err());
        assert!(RunConfig::from_toml("[safety]\ntau = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[platoon]\ncav_index = 9\n").is_err());
        assert!(RunConfig::from_toml("[scenario.s2]\naccel = 1.0\nduration = 4.0\nhold = 0.0\nrecovery_rate = 1.0\nvehicle = 3\n").is_err());
    }
}
