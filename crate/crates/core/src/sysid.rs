//! Online identification of human car-following behaviour.
//!
//! Each HDV gets an estimator `F̂ = η + ζ` in error coordinates
//! `x = (s - s_eq, v - v_eq, v_prev - v_eq)`:
//!
//! * `η(x) = α̂1 x0 - α̂2 x1 + α̂3 x2`, the linearized car-following law;
//! * `ζ(x)`, a small tanh network fitted to what `η` leaves unexplained.
//!
//! The two parts are trained separately: `η` on the observed acceleration,
//! then `ζ` on the residual with `η` frozen. [`RlsState`] is the classical
//! recursive-least-squares baseline on the same features.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Adam, Mlp};

/// Update rule shared by both phases. Plain SGD at the estimator's learning
/// rate barely moves within a few thousand transitions, so Adam is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SysIdOptimizer {
    Sgd,
    Adam,
}

/// One observed car-following transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub s: f64,
    pub v: f64,
    pub v_prev: f64,
    /// `(v_next - v) / dt`.
    pub accel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdvEstimate {
    /// `(α̂1, α̂2, α̂3)`.
    pub coeffs: [f64; 3],
    pub residual: Mlp,
    pub s_eq: f64,
    pub v_eq: f64,
    /// Divides the error coordinates before they enter the residual network.
    pub input_scale: [f64; 3],
    /// Predictions and the residual output are clamped to `±a_max`.
    pub a_max: f64,
    pub lr: f64,
    pub optimizer: SysIdOptimizer,
    adam_linear: Adam,
    adam_residual: Adam,
    pub updates: u64,
    pub skipped: u64,
}

impl HdvEstimate {
    pub const HIDDEN: [usize; 2] = [16, 16];

    /// Zero linear part and a residual network with zero output layer, so the
    /// initial prediction is 0 everywhere.
    pub fn new(s_eq: f64, v_eq: f64, a_max: f64, lr: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [3, Self::HIDDEN[0], Self::HIDDEN[1], 1];
        let residual = Mlp::init(&sizes, 0.0, &mut rng);
        Self {
            coeffs: [0.0; 3],
            adam_linear: Adam::new(3, lr),
            adam_residual: Adam::new(residual.n_params(), lr),
            optimizer: SysIdOptimizer::Adam,
            residual,
            s_eq,
            v_eq,
            input_scale: [10.0, 5.0, 5.0],
            a_max,
            lr,
            updates: 0,
            skipped: 0,
        }
    }

    pub fn features(&self, s: f64, v: f64, v_prev: f64) -> [f64; 3] {
        [s - self.s_eq, v - self.v_eq, v_prev - self.v_eq]
    }

    pub fn eta(&self, x: &[f64; 3]) -> f64 {
        self.coeffs[0] * x[0] - self.coeffs[1] * x[1] + self.coeffs[2] * x[2]
    }

    fn net_input(&self, x: &[f64; 3]) -> [f64; 3] {
        [x[0] / self.input_scale[0], x[1] / self.input_scale[1], x[2] / self.input_scale[2]]
    }

    /// Residual network output, clamped to `±a_max`.
    pub fn zeta(&self, x: &[f64; 3]) -> f64 {
        self.residual.forward(&self.net_input(x))[0].clamp(-self.a_max, self.a_max)
    }

    /// Linear part only.
    pub fn predict_linear(&self, s: f64, v: f64, v_prev: f64) -> f64 {
        self.eta(&self.features(s, v, v_prev)).clamp(-self.a_max, self.a_max)
    }

    pub fn predict(&self, s: f64, v: f64, v_prev: f64) -> f64 {
        let x = self.features(s, v, v_prev);
        (self.eta(&x) + self.zeta(&x)).clamp(-self.a_max, self.a_max)
    }

    /// Gradient step on `½ (η - a)²` averaged over `batch`. Returns false and
    /// leaves the coefficients alone when the gradient is not finite.
    pub fn update_linear(&mut self, batch: &[Sample]) -> bool {
        if batch.is_empty() {
            return true;
        }
        let mut grad = [0.0; 3];
        for smp in batch {
            let x = self.features(smp.s, smp.v, smp.v_prev);
            let e = self.eta(&x) - smp.accel;
            grad[0] += e * x[0];
            grad[1] -= e * x[1];
            grad[2] += e * x[2];
        }
        let n = batch.len() as f64;
        if grad.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return false;
        }
        let grad = grad.map(|g| g / n);
        match self.optimizer {
            SysIdOptimizer::Sgd => {
                for (c, g) in self.coeffs.iter_mut().zip(grad) {
                    *c -= self.lr * g;
                }
            }
            SysIdOptimizer::Adam => self.adam_linear.step(&mut self.coeffs, &grad),
        }
        true
    }

    /// Gradient step on `½ (ζ - (a - η))²` averaged over `batch`, with `η`
    /// held fixed.
    pub fn update_residual(&mut self, batch: &[Sample]) -> bool {
        if batch.is_empty() {
            return true;
        }
        let mut grad = vec![0.0; self.residual.n_params()];
        for smp in batch {
            let x = self.features(smp.s, smp.v, smp.v_prev);
            let target = smp.accel - self.eta(&x);
            let cache = self.residual.forward_cached(&self.net_input(&x));
            let e = cache.output()[0] - target;
            self.residual.backward(&cache, &[e], &mut grad);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return false;
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        match self.optimizer {
            SysIdOptimizer::Sgd => {
                for (p, g) in self.residual.params.iter_mut().zip(&grad) {
                    *p -= self.lr * g;
                }
            }
            SysIdOptimizer::Adam => self.adam_residual.step(&mut self.residual.params, &grad),
        }
        true
    }

    /// Both phases on one batch: linear part first, then the residual.
    pub fn update(&mut self, batch: &[Sample]) {
        if self.update_linear(batch) {
            self.update_residual(batch);
        }
        self.updates += 1;
    }
}

/// Online wrapper: keeps a window of recent transitions and replays
/// minibatches from it after every observation.
#[derive(Debug, Clone)]
pub struct OnlineEstimator {
    pub est: HdvEstimate,
    window: VecDeque<Sample>,
    pub window_len: usize,
    pub updates_per_step: usize,
    pub batch_size: usize,
    rng: ChaCha8Rng,
}

impl OnlineEstimator {
    pub const DEFAULT_WINDOW: usize = 5000;
    pub const DEFAULT_UPDATES_PER_STEP: usize = 20;
    pub const DEFAULT_BATCH: usize = 64;

    pub fn with_defaults(est: HdvEstimate, seed: u64) -> Self {
        Self::new(est, Self::DEFAULT_WINDOW, Self::DEFAULT_UPDATES_PER_STEP, Self::DEFAULT_BATCH, seed)
    }

    pub fn new(est: HdvEstimate, window_len: usize, updates_per_step: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            est,
            window: VecDeque::with_capacity(window_len),
            window_len: window_len.max(1),
            updates_per_step,
            batch_size: batch_size.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn observe(&mut self, smp: Sample) {
        if ![smp.s, smp.v, smp.v_prev, smp.accel].iter().all(|x| x.is_finite()) {
            self.est.skipped += 1;
            return;
        }
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back(smp);
        let mut batch = Vec::with_capacity(self.batch_size);
        for _ in 0..self.updates_per_step {
            batch.clear();
            // the newest sample is always part of the batch
            batch.push(smp);
            while batch.len() < self.batch_size.min(self.window.len()) {
                let k = self.rng.gen_range(0..self.window.len());
                batch.push(self.window[k]);
            }
            self.est.update(&batch);
        }
    }

    pub fn n_observed(&self) -> usize {
        self.window.len()
    }
}

/// Recursive least squares with exponential forgetting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlsState {
    pub theta: Vector3<f64>,
    pub p: Matrix3<f64>,
    pub forgetting: f64,
    /// Initial covariance scale, reused on reset.
    pub delta: f64,
    pub resets: u64,
}

impl RlsState {
    pub const MAX_CONDITION: f64 = 1e12;

    pub fn new(forgetting: f64, delta: f64) -> Self {
        Self { theta: Vector3::zeros(), p: Matrix3::identity() * delta, forgetting, delta, resets: 0 }
    }

    pub fn predict(&self, x: &[f64; 3]) -> f64 {
        self.theta.dot(&Vector3::from(*x))
    }

    pub fn condition(&self) -> f64 {
        let eig = SymmetricEigen::new(self.p).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

/// One RLS step toward `target ≈ θ·x`.
pub fn rls_update(rls: &RlsState, x: &[f64; 3], target: f64) -> RlsState {
    let phi = Vector3::from(*x);
    if phi.iter().all(|&f| f == 0.0) || !target.is_finite() || !phi.iter().all(|f| f.is_finite()) {
        return rls.clone();
    }
    let lam = rls.forgetting;
    let p_phi = rls.p * phi;
    let gain = p_phi / (lam + phi.dot(&p_phi));
    let err = target - rls.theta.dot(&phi);
    let mut next = rls.clone();
    next.theta = rls.theta + gain * err;
    let p = (rls.p - gain * p_phi.transpose()) / lam;
    next.p = (p + p.transpose()) * 0.5;
    if !next.p.iter().all(|v| v.is_finite()) || next.condition() > RlsState::MAX_CONDITION {
        log::debug!("RLS covariance reset");
        next.p = Matrix3::identity() * rls.delta;
        next.resets += 1;
    }
    next
}
