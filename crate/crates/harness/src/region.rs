//! Safety-region sweeps over pulse magnitude and duration.
//!
//! A cell is safe when the platoon finishes the scenario without any
//! collision. Cells are independent simulations and run in parallel.

use platoon_core::policy::PolicyBundle;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GridAxes, PulseSection, RunConfig};
use crate::scenario::{run_scenario, ScenarioSpec};
use crate::sim::{ControllerKind, Estimators};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    /// Per controller, in the grid's controller order.
    pub safe_counts: Vec<usize>,
    /// `(safe(ppo_safety) - safe(ppo)) / safe(ppo)`; `None` when either
    /// controller is missing or `ppo` has no safe cell.
    pub expansion_ratio: Option<f64>,
    /// Mean over magnitudes of the gain in longest safe duration of
    /// `ppo_safety` over `ppo` (s).
    pub mean_safe_duration_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyRegionGrid {
    pub scenario: String,
    pub magnitudes: Vec<f64>,
    pub durations: Vec<f64>,
    pub controllers: Vec<ControllerKind>,
    /// `safe[c][m][d]` for controller `c`, magnitude `m`, duration `d`.
    pub safe: Vec<Vec<Vec<bool>>>,
    /// Smallest spacing in the platoon, same layout as `safe`.
    pub min_spacing: Vec<Vec<Vec<f64>>>,
    pub stats: RegionStats,
    /// Steps, over all cells, whose executed action left the actuator bounds.
    pub actuator_violations: usize,
}

/// `n` evenly spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

pub fn axes(grid: &GridAxes, points: usize) -> (Vec<f64>, Vec<f64>) {
    (
        linspace(grid.magnitude[0], grid.magnitude[1], points),
        linspace(grid.duration[0], grid.duration[1], points),
    )
}

/// Policies and estimators available to the sweep.
#[derive(Debug, Clone)]
pub struct Controllers<'a> {
    pub ppo: Option<&'a PolicyBundle>,
    pub ppo_safety: Option<&'a PolicyBundle>,
    /// Estimates used by `ppo_safety`.
    pub safety_estimators: Estimators,
    /// Estimates used by `ppo_safety_sysid`.
    pub learned_estimators: Option<Estimators>,
}

impl Controllers<'_> {
    pub fn setup(&self, c: ControllerKind) -> Result<(Option<&PolicyBundle>, Estimators), HarnessError> {
        let missing = || HarnessError::Config(format!("no checkpoint for controller {c}"));
        Ok(match c {
            ControllerKind::PureHdv => (None, Estimators::Zero),
            ControllerKind::Ppo => (Some(self.ppo.ok_or_else(missing)?), Estimators::Zero),
            ControllerKind::PpoSafety => (Some(self.ppo_safety.ok_or_else(missing)?), self.safety_estimators.clone()),
            ControllerKind::PpoSafetySysid => (
                Some(self.ppo_safety.ok_or_else(missing)?),
                self.learned_estimators.clone().ok_or_else(|| {
                    HarnessError::Config("ppo_safety_sysid needs learned estimators".into())
                })?,
            ),
        })
    }
}

/// Sweeps `base` over `magnitudes × durations` for every controller.
pub fn safety_region_sweep(
    scenario: &str,
    base: &PulseSection,
    magnitudes: &[f64],
    durations: &[f64],
    controllers: &[ControllerKind],
    available: &Controllers<'_>,
    cfg: &RunConfig,
) -> Result<SafetyRegionGrid, HarnessError> {
    if magnitudes.is_empty() || durations.is_empty() || controllers.is_empty() {
        return Err(HarnessError::Config("region grids and controller list must be non-empty".into()));
    }
    let setups = controllers.iter().map(|&c| available.setup(c)).collect::<Result<Vec<_>, _>>()?;
    let cells: Vec<(usize, usize, usize)> = (0..controllers.len())
        .flat_map(|c| (0..magnitudes.len()).flat_map(move |m| (0..durations.len()).map(move |d| (c, m, d))))
        .collect();
    let outcomes = cells
        .par_iter()
        .map(|&(c, m, d)| {
            let pulse = PulseSection { accel: magnitudes[m], duration: durations[d], ..base.clone() };
            let spec = ScenarioSpec::with_pulse(scenario, &pulse, controllers[c], cfg);
            let (bundle, est) = &setups[c];
            let r = run_scenario(&spec, cfg, *bundle, est.clone())?;
            let min_s = r.metrics.min_spacing.iter().copied().fold(f64::INFINITY, f64::min);
            Ok((!r.metrics.collision, min_s, r.metrics.actuator_violations))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let (nm, nd) = (magnitudes.len(), durations.len());
    let mut safe = vec![vec![vec![false; nd]; nm]; controllers.len()];
    let mut min_spacing = vec![vec![vec![0.0; nd]; nm]; controllers.len()];
    for (&(c, m, d), &(ok, s, _)) in cells.iter().zip(&outcomes) {
        safe[c][m][d] = ok;
        min_spacing[c][m][d] = s;
    }
    let actuator_violations = outcomes.iter().map(|o| o.2).sum();
    let stats = region_stats(controllers, &safe, durations);
    Ok(SafetyRegionGrid {
        scenario: scenario.to_string(),
        magnitudes: magnitudes.to_vec(),
        durations: durations.to_vec(),
        controllers: controllers.to_vec(),
        safe,
        min_spacing,
        stats,
        actuator_violations,
    })
}

/// Sweeps the configured `s1` or `s2` grid with `points` values per axis.
pub fn sweep_configured(
    scenario: &str,
    points: usize,
    controllers: &[ControllerKind],
    available: &Controllers<'_>,
    cfg: &RunConfig,
) -> Result<SafetyRegionGrid, HarnessError> {
    let (grid, pulse) = match scenario {
        "s1" => (&cfg.region.s1, &cfg.scenario.s1),
        "s2" => (&cfg.region.s2, &cfg.scenario.s2),
        _ => return Err(HarnessError::Config(format!("unknown scenario {scenario:?}; expected s1 or s2"))),
    };
    let (mags, durs) = axes(grid, points);
    let pulse = PulseSection { vehicle: grid.vehicle, ..pulse.clone() };
    safety_region_sweep(scenario, &pulse, &mags, &durs, controllers, available, cfg)
}

/// Longest duration up to which every cell of a magnitude column is safe.
fn longest_safe_duration(column: &[bool], durations: &[f64]) -> f64 {
    column.iter().zip(durations).take_while(|(ok, _)| **ok).last().map_or(0.0, |(_, &d)| d)
}

pub fn region_stats(controllers: &[ControllerKind], safe: &[Vec<Vec<bool>>], durations: &[f64]) -> RegionStats {
    let safe_counts: Vec<usize> = safe.iter().map(|g| g.iter().flatten().filter(|&&ok| ok).count()).collect();
    let find = |k: ControllerKind| controllers.iter().position(|&c| c == k);
    let (mut expansion_ratio, mut mean_safe_duration_gain) = (None, None);
    if let (Some(p), Some(s)) = (find(ControllerKind::Ppo), find(ControllerKind::PpoSafety)) {
        if safe_counts[p] > 0 {
            expansion_ratio = Some((safe_counts[s] as f64 - safe_counts[p] as f64) / safe_counts[p] as f64);
        }
        let gains: Vec<f64> = safe[s]
            .iter()
            .zip(&safe[p])
            .map(|(cs, cp)| longest_safe_duration(cs, durations) - longest_safe_duration(cp, durations))
            .collect();
        mean_safe_duration_gain = Some(gains.iter().sum::<f64>() / gains.len() as f64);
    }
    RegionStats { safe_counts, expansion_ratio, mean_safe_duration_gain }
}
