//! Held-out comparison of the learned estimator, its linear part alone, and
//! recursive least squares.
//!
//! One random-disturbance rollout is recorded with the CAV driving like an
//! HDV. The estimators learn online from the first part and are scored,
//! frozen, on the rest.

use platoon_core::dynamics::{self, DisturbanceProfile};
use platoon_core::sysid::{rls_update, HdvEstimate, OnlineEstimator, RlsState, Sample};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::sim;
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub steps: usize,
    pub train_fraction: f64,
    /// Held-out scores are recorded every this many training steps.
    pub eval_every: usize,
    pub disturbance_std: f64,
    /// 1-based index of the identified HDV.
    pub vehicle: usize,
    pub rls_forgetting: f64,
    pub rls_delta: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            steps: 5000,
            train_fraction: 0.8,
            eval_every: 500,
            disturbance_std: 2.0,
            vehicle: 4,
            rls_forgetting: 0.999,
            rls_delta: 1e3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub step: usize,
    pub mse_combined: f64,
    pub mse_linear: f64,
    pub mse_rls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub estimate: HdvEstimate,
    pub rls: RlsState,
}

impl BenchResult {
    pub fn last(&self) -> BenchRow {
        *self.rows.last().expect("at least one row")
    }
}

/// Transitions of `vehicle` along a random-disturbance rollout.
pub fn record_rollout(cfg: &RunConfig) -> Result<Vec<Sample>, HarnessError> {
    let pc = cfg.platoon_config();
    let b = &cfg.bench;
    if pc.hdv(b.vehicle).is_none() {
        return Err(HarnessError::Config(format!("bench.vehicle {} is not an HDV", b.vehicle)));
    }
    let profile = DisturbanceProfile::GaussianRandom { std: b.disturbance_std };
    let seq = dynamics::head_velocity_sequence(&profile, cfg.seed, b.steps, &pc)?;
    let mut x = pc.equilibrium_state();
    let j = b.vehicle;
    let mut out = Vec::with_capacity(b.steps);
    for k in 0..b.steps {
        let next = sim::advance(&x, &pc, sim::hdv_like_accel(&x, &pc), seq.exogenous(k))?;
        out.push(Sample { s: x.s(j), v: x.v(j), v_prev: x.v(j - 1), accel: (next.v(j) - x.v(j)) / pc.dt });
        x = next;
    }
    Ok(out)
}

pub fn sysid_bench(cfg: &RunConfig) -> Result<BenchResult, HarnessError> {
    let pc = cfg.platoon_config();
    let b = &cfg.bench;
    if !(b.train_fraction > 0.0 && b.train_fraction < 1.0) || b.eval_every == 0 {
        return Err(HarnessError::Config("bench: need 0 < train_fraction < 1 and eval_every > 0".into()));
    }
    let samples = record_rollout(cfg)?;
    let split = (samples.len() as f64 * b.train_fraction).round() as usize;
    let (train, test) = samples.split_at(split);
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::Config("bench: both splits must be non-empty".into()));
    }
    let s = &cfg.sysid;
    let est = HdvEstimate::new(pc.s_eq, pc.v_eq, pc.a_max, s.lr, cfg.seed);
    let mut online = OnlineEstimator::new(est, s.window, s.warmup_updates_per_step, s.batch, cfg.seed);
    let mut rls = RlsState::new(b.rls_forgetting, b.rls_delta);
    let mut rows = Vec::new();
    for (k, smp) in train.iter().enumerate() {
        online.observe(*smp);
        let x = online.est.features(smp.s, smp.v, smp.v_prev);
        rls = rls_update(&rls, &x, smp.accel);
        if (k + 1) % b.eval_every == 0 || k + 1 == train.len() {
            rows.push(score(k + 1, &online.est, &rls, test, pc.a_max));
        }
    }
    Ok(BenchResult { rows, estimate: online.est, rls })
}

fn score(step: usize, est: &HdvEstimate, rls: &RlsState, test: &[Sample], a_max: f64) -> BenchRow {
    let n = test.len() as f64;
    let mse = |f: &dyn Fn(&Sample) -> f64| test.iter().map(|s| (f(s) - s.accel).powi(2)).sum::<f64>() / n;
    BenchRow {
        step,
        mse_combined: mse(&|s| est.predict(s.s, s.v, s.v_prev)),
        mse_linear: mse(&|s| est.predict_linear(s.s, s.v, s.v_prev)),
        // same output clamp as the learned estimator
        mse_rls: mse(&|s| rls.predict(&est.features(s.s, s.v, s.v_prev)).clamp(-a_max, a_max)),
    }
}
