//! Artifact formats: CSV tables with six significant digits, versioned JSON
//! checkpoints and the region summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use platoon_core::dynamics::PlatoonConfig;
use platoon_core::policy::PolicyBundle;
use platoon_core::sysid::HdvEstimate;
use serde::{Deserialize, Serialize};

use crate::bench::BenchRow;
use crate::config::SysidMode;
use crate::region::{RegionStats, SafetyRegionGrid};
use crate::sim::StepRecord;
use crate::train::{EpisodeLog, EvalEpisode};
use crate::HarnessError;

pub const CHECKPOINT_VERSION: &str = "platoon-checkpoint/1";

/// `x` rounded to six significant digits, printed in its shortest form.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    // avoid "-0"
    if rounded == 0.0 {
        return "0".into();
    }
    rounded.to_string()
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn row(fields: impl IntoIterator<Item = String>) -> String {
    let mut line = fields.into_iter().collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}

pub fn trajectory_header(cfg: &PlatoonConfig) -> String {
    let mut cols = vec!["t".to_string(), "v_head".to_string()];
    for i in 1..=cfg.n_vehicles {
        cols.push(format!("s_{i}"));
        cols.push(format!("v_{i}"));
    }
    cols.extend(["u_rl", "u_safe", "collision"].map(String::from));
    cols.push(format!("h_{}", cfg.cav_index));
    cols.extend(cfg.followers().map(|j| format!("h_{j}")));
    cols.push("active_mask".into());
    cols.extend(cfg.followers().map(|j| format!("sigma_{j}")));
    row(cols)
}

/// One line per step: the platoon state, the actions, the collision flag and
/// the safety-layer diagnostics.
pub fn trajectory_csv(records: &[StepRecord], cfg: &PlatoonConfig) -> String {
    let mut out = trajectory_header(cfg);
    for r in records {
        let x = &r.state;
        let mut f = vec![sig6(x.t), sig6(x.v_head)];
        for (s, v) in x.spacing.iter().zip(&x.velocity) {
            f.push(sig6(*s));
            f.push(sig6(*v));
        }
        f.push(sig6(r.u_rl));
        f.push(sig6(r.u_safe));
        f.push(u8::from(x.collided).to_string());
        f.extend(r.h.iter().map(|h| sig6(*h)));
        f.push(r.active_mask.to_string());
        f.extend(r.slacks.iter().map(|s| sig6(*s)));
        out.push_str(&row(f));
    }
    out
}

pub fn training_log_csv(log: &[EpisodeLog]) -> String {
    let mut out = String::from("episode,mean_reward,actor_loss,critic_loss,mean_u_safe,collisions,k_values\n");
    for e in log {
        let ks = e.k_values.iter().map(|k| sig6(*k)).collect::<Vec<_>>().join(";");
        out.push_str(&row([
            e.episode.to_string(),
            sig6(e.mean_reward),
            sig6(e.actor_loss),
            sig6(e.critic_loss),
            sig6(e.mean_u_safe),
            e.collisions.to_string(),
            ks,
        ]));
    }
    out
}

pub fn eval_csv(episodes: &[EvalEpisode]) -> String {
    let mut out = String::from("episode,mean_reward,collision,min_spacing\n");
    for e in episodes {
        out.push_str(&row([
            e.episode.to_string(),
            sig6(e.mean_reward),
            u8::from(e.collision).to_string(),
            sig6(e.min_spacing),
        ]));
    }
    out
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("step,mse_combined,mse_linear,mse_rls\n");
    for r in rows {
        out.push_str(&row([r.step.to_string(), sig6(r.mse_combined), sig6(r.mse_linear), sig6(r.mse_rls)]));
    }
    out
}

pub fn region_cells_csv(grids: &[SafetyRegionGrid]) -> String {
    let mut out = String::from("scenario,controller,magnitude,duration,safe,min_spacing\n");
    for g in grids {
        for (c, ctrl) in g.controllers.iter().enumerate() {
            for (m, mag) in g.magnitudes.iter().enumerate() {
                for (d, dur) in g.durations.iter().enumerate() {
                    out.push_str(&row([
                        g.scenario.clone(),
                        ctrl.to_string(),
                        sig6(*mag),
                        sig6(*dur),
                        u8::from(g.safe[c][m][d]).to_string(),
                        sig6(g.min_spacing[c][m][d]),
                    ]));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAxes {
    pub magnitude: Vec<f64>,
    pub duration: Vec<f64>,
}

/// One grid as stored in `region.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub scenario: String,
    pub axes: RegionAxes,
    /// Controller name → `[magnitude][duration]` safe flags.
    pub matrices: BTreeMap<String, Vec<Vec<bool>>>,
    pub stats: RegionStats,
}

impl From<&SafetyRegionGrid> for RegionEntry {
    fn from(g: &SafetyRegionGrid) -> Self {
        Self {
            scenario: g.scenario.clone(),
            axes: RegionAxes { magnitude: g.magnitudes.clone(), duration: g.durations.clone() },
            matrices: g.controllers.iter().zip(&g.safe).map(|(c, m)| (c.to_string(), m.clone())).collect(),
            stats: g.stats.clone(),
        }
    }
}

pub fn region_json(grids: &[SafetyRegionGrid]) -> String {
    let entries: Vec<RegionEntry> = grids.iter().map(RegionEntry::from).collect();
    serde_json::to_string_pretty(&entries).expect("region entries serialize")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub seed: u64,
    pub safety: bool,
    pub sysid_mode: SysidMode,
    pub bundle: PolicyBundle,
    /// Learned HDV estimators, one per follower, when trained with them.
    pub sysid: Option<Vec<HdvEstimate>>,
}

impl Checkpoint {
    pub fn new(seed: u64, safety: bool, sysid_mode: SysidMode, bundle: PolicyBundle, sysid: Option<Vec<HdvEstimate>>) -> Self {
        Self { version: CHECKPOINT_VERSION.into(), seed, safety, sysid_mode, bundle, sysid }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        #[derive(Deserialize)]
        struct Header {
            version: String,
        }
        let header: Header =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("unreadable checkpoint: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(HarnessError::Config(format!(
                "checkpoint version {:?}, expected {CHECKPOINT_VERSION:?}",
                header.version
            )));
        }
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("unreadable checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        write_file(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        if !path.exists() {
            return Err(HarnessError::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Default checkpoint location for a controller family.
pub fn checkpoint_path(out_dir: &Path, safety: bool) -> PathBuf {
    out_dir.join(if safety { "ppo_safety.json" } else { "ppo.json" })
}

pub fn save_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    write_file(path, text)
}

/// Human-readable summary lines.
pub fn format_metrics(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}: {v}");
    }
    s
}
