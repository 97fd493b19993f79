//! Gaussian actor-critic and the PPO update, including the gradient path
//! through the safety layer.
//!
//! The log-probability in the PPO ratio is always that of the pre-filter
//! action `u_rl`. The safety layer enters the actor update through the
//! sensitivities stored at rollout time: with `e_t` the surrogate's
//! derivative with respect to the policy mean, the actor mean receives
//! `e_t · ∂u_final/∂u_rl` and the barrier coefficients receive
//! `e_t · ∂u_final/∂u_rl · ∂u_final/∂k`. When the filter saturates
//! (`∂u_final/∂u_rl = 0`) neither gets a signal from that step.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{PlatoonConfig, PlatoonState};
use crate::nn::{Adam, Mlp};
use crate::safety::SafetyParams;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
pub const LOG_STD_INIT: f64 = -0.5;
/// Divisors applied to spacing and velocity errors in the observation.
pub const OBS_SPACING_SCALE: f64 = 10.0;
pub const OBS_VELOCITY_SCALE: f64 = 5.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("empty rollout buffer")]
    EmptyBuffer,
    #[error("observation has {got} entries, network expects {expected}")]
    ObsDim { got: usize, expected: usize },
}

pub fn obs_dim(cfg: &PlatoonConfig) -> usize {
    2 * cfg.n_vehicles + 1
}

/// Scaled error coordinates: `(s_j - s_eq, v_j - v_eq)` for every vehicle,
/// then `v_head - v_eq`.
pub fn observe(state: &PlatoonState, cfg: &PlatoonConfig) -> Vec<f64> {
    let mut obs = Vec::with_capacity(obs_dim(cfg));
    for (s, v) in state.spacing.iter().zip(&state.velocity) {
        obs.push((s - cfg.s_eq) / OBS_SPACING_SCALE);
        obs.push((v - cfg.v_eq) / OBS_VELOCITY_SCALE);
    }
    obs.push((state.v_head - cfg.v_eq) / OBS_VELOCITY_SCALE);
    obs
}

pub fn gaussian_log_prob(u: f64, mean: f64, log_std: f64) -> f64 {
    let z = (u - mean) / log_std.exp();
    -0.5 * z * z - log_std - 0.5 * LN_2PI
}

/// `min(r·A, clip(r, 1-ε, 1+ε)·A)`.
pub fn clipped_objective(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// True when the clipped branch is strictly the smaller one, so the sample
/// contributes no gradient.
fn clip_binds(ratio: f64, adv: f64, eps: f64) -> bool {
    (adv > 0.0 && ratio > 1.0 + eps) || (adv < 0.0 && ratio < 1.0 - eps)
}

/// Everything the agent learns: `θ_RL` (actor and `log_std`), the critic,
/// and the barrier coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub actor: Mlp,
    pub log_std: f64,
    pub critic: Mlp,
    pub safety: SafetyParams,
}

impl PolicyBundle {
    pub const HIDDEN: [usize; 2] = [64, 64];

    pub fn new<R: Rng>(obs_dim: usize, hidden: &[usize], safety: SafetyParams, rng: &mut R) -> Self {
        let sizes = |out: usize| [&[obs_dim][..], hidden, &[out]].concat();
        // a small last layer keeps the initial policy close to zero action
        let actor = Mlp::init(&sizes(1), 0.01, rng);
        let critic = Mlp::init(&sizes(1), 1.0, rng);
        Self { actor, log_std: LOG_STD_INIT, critic, safety }
    }

    fn check_obs(&self, obs: &[f64]) -> Result<(), PolicyError> {
        if obs.len() != self.actor.input_dim() {
            return Err(PolicyError::ObsDim { got: obs.len(), expected: self.actor.input_dim() });
        }
        Ok(())
    }

    /// Mean action and `log_std`.
    pub fn policy_forward(&self, obs: &[f64]) -> Result<(f64, f64), PolicyError> {
        self.check_obs(obs)?;
        let mean = self.actor.forward(obs)[0];
        if !mean.is_finite() {
            return Err(PolicyError::NonFinite("actor output"));
        }
        Ok((mean, self.log_std))
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64, PolicyError> {
        self.check_obs(obs)?;
        let v = self.critic.forward(obs)[0];
        if !v.is_finite() {
            return Err(PolicyError::NonFinite("critic output"));
        }
        Ok(v)
    }

    /// Draws `u_rl = mean + std·ε` and returns it with its log-probability.
    pub fn sample<R: Rng>(&self, obs: &[f64], rng: &mut R) -> Result<(f64, f64), PolicyError> {
        let (mean, log_std) = self.policy_forward(obs)?;
        let eps: f64 = StandardNormal.sample(rng);
        let u = mean + log_std.exp() * eps;
        Ok((u, gaussian_log_prob(u, mean, log_std)))
    }

    /// Clamps `log_std` and the barrier coefficients back into range.
    pub fn project(&mut self, dt: f64) {
        self.log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
        self.safety.project(dt);
    }
}

/// One environment step as seen by the learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub u_rl: f64,
    pub u_final: f64,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    /// Critic value of the successor state, used unless `done`.
    pub next_value: f64,
    /// The episode terminated here (no bootstrap).
    pub done: bool,
    /// The episode was cut off here (bootstrap from `next_value`).
    pub truncated: bool,
    /// Sensitivity of the executed action to each barrier coefficient, in
    /// [`SafetyParams::trainable`] order.
    pub du_final_dk: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutBuffer {
    pub steps: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn push(&mut self, t: Transition) {
        self.steps.push(t);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.advantages.clear();
        self.returns.clear();
    }
}

/// Generalized advantage estimation. The recursion restarts at every episode
/// boundary and at the end of the buffer; returns are `advantage + value`.
pub fn gae_and_returns(buf: &mut RolloutBuffer, gamma: f64, lam: f64) -> Result<(), PolicyError> {
    if buf.is_empty() {
        return Err(PolicyError::EmptyBuffer);
    }
    let n = buf.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let st = &buf.steps[t];
        let boundary = st.done || st.truncated || t + 1 == n;
        let bootstrap = if st.done { 0.0 } else { st.next_value };
        let delta = st.reward + gamma * bootstrap - st.value;
        let carry = if boundary { 0.0 } else { next_adv };
        adv[t] = delta + gamma * lam * carry;
        next_adv = adv[t];
    }
    buf.returns = adv.iter().zip(&buf.steps).map(|(a, s)| a + s.value).collect();
    buf.advantages = adv;
    Ok(())
}

/// Zero mean, unit variance. A constant batch maps to all zeros.
pub fn standardize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / std).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoHyper {
    pub lr: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Transitions collected per update.
    pub rollout_steps: usize,
    pub minibatch: usize,
    pub gamma: f64,
    pub lam: f64,
    pub ent_coef: f64,
    /// Whether the barrier coefficients are updated.
    pub train_safety: bool,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            clip: 0.2,
            epochs: 10,
            rollout_steps: 2048,
            minibatch: 64,
            gamma: 0.99,
            lam: 0.95,
            ent_coef: 0.0,
            train_safety: true,
        }
    }
}

/// Learning rate after `done` of `total` updates, decaying linearly to 0.
pub fn linear_decay(lr0: f64, done: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 - done as f64 / total as f64).max(0.0)
}

/// Optimizer state, one Adam per parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoOptimizers {
    pub actor: Adam,
    pub log_std: Adam,
    pub critic: Adam,
    pub safety: Adam,
}

impl PpoOptimizers {
    pub fn new(bundle: &PolicyBundle, lr: f64) -> Self {
        Self {
            actor: Adam::new(bundle.actor.n_params(), lr),
            log_std: Adam::new(1, lr),
            critic: Adam::new(bundle.critic.n_params(), lr),
            safety: Adam::new(bundle.safety.trainable().len(), lr),
        }
    }

    fn set_lr(&mut self, lr: f64) {
        self.actor.lr = lr;
        self.log_std.lr = lr;
        self.critic.lr = lr;
        self.safety.lr = lr;
    }
}

/// Actor-side loss and gradients on a minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorGrad {
    /// `-mean(clipped objective) - ent_coef·entropy`.
    pub loss: f64,
    pub actor: Vec<f64>,
    pub log_std: f64,
    pub safety: Vec<f64>,
    /// Share of samples whose clip bound was binding.
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Loss and gradients of the clipped surrogate over `steps` with
/// standardized advantages `adv`. Fails on a non-finite ratio.
pub fn actor_loss_and_grad(
    bundle: &PolicyBundle,
    steps: &[&Transition],
    adv: &[f64],
    clip: f64,
    ent_coef: f64,
) -> Result<ActorGrad, PolicyError> {
    let n = steps.len() as f64;
    let n_k = bundle.safety.trainable().len();
    let mut g = ActorGrad {
        loss: 0.0,
        actor: vec![0.0; bundle.actor.n_params()],
        log_std: 0.0,
        safety: vec![0.0; n_k],
        clip_fraction: 0.0,
        approx_kl: 0.0,
    };
    let log_std = bundle.log_std;
    let var = (2.0 * log_std).exp();
    for (st, &a) in steps.iter().zip(adv) {
        let cache = bundle.actor.forward_cached(&st.obs);
        let mean = cache.output()[0];
        let logp = gaussian_log_prob(st.u_rl, mean, log_std);
        let ratio = (logp - st.log_prob).exp();
        if !ratio.is_finite() {
            return Err(PolicyError::NonFinite("probability ratio"));
        }
        g.loss -= clipped_objective(ratio, a, clip) / n;
        g.approx_kl += (st.log_prob - logp) / n;
        if clip_binds(ratio, a, clip) {
            g.clip_fraction += 1.0 / n;
            continue;
        }
        // d(objective)/d(log π) for the unclipped branch
        let c = ratio * a;
        let z2 = (st.u_rl - mean).powi(2) / var;
        g.log_std -= c * (z2 - 1.0) / n;
        // the ratio is over u_rl, so the mean takes the plain likelihood-ratio
        // gradient; the coefficients only act through u_final
        let e = c * (st.u_rl - mean) / var;
        bundle.actor.backward(&cache, &[-e / n], &mut g.actor);
        for (gk, dk) in g.safety.iter_mut().zip(&st.du_final_dk) {
            *gk -= e * dk / n;
        }
    }
    // entropy of a Gaussian is log_std + ½ ln(2πe)
    g.loss -= ent_coef * (log_std + 0.5 * (LN_2PI + 1.0));
    g.log_std -= ent_coef;
    Ok(g)
}

/// `½·mean((V - R)²)` and its gradient.
pub fn critic_loss_and_grad(critic: &Mlp, obs: &[&[f64]], returns: &[f64]) -> (f64, Vec<f64>) {
    let n = obs.len() as f64;
    let mut grad = vec![0.0; critic.n_params()];
    let mut loss = 0.0;
    for (o, &r) in obs.iter().zip(returns) {
        let cache = critic.forward_cached(o);
        let err = cache.output()[0] - r;
        loss += 0.5 * err * err / n;
        critic.backward(&cache, &[err / n], &mut grad);
    }
    (loss, grad)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub actor_loss: f64,
    /// Mean squared error of the critic against the returns.
    pub critic_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
    pub skipped_minibatches: usize,
}

/// Runs `hyper.epochs` passes of shuffled minibatches over `buf` at
/// learning rate `lr`, then projects `log_std` and the barrier
/// coefficients back into range. `buf` must already hold advantages.
pub fn ppo_update<R: Rng>(
    bundle: &mut PolicyBundle,
    opt: &mut PpoOptimizers,
    buf: &RolloutBuffer,
    hyper: &PpoHyper,
    lr: f64,
    dt: f64,
    rng: &mut R,
) -> Result<UpdateStats, PolicyError> {
    if buf.is_empty() {
        return Err(PolicyError::EmptyBuffer);
    }
    assert_eq!(buf.advantages.len(), buf.len(), "run gae_and_returns first");
    opt.set_lr(lr);
    let adv = standardize(&buf.advantages);
    let mut idx: Vec<usize> = (0..buf.len()).collect();
    let mb = hyper.minibatch.max(1);
    let mut stats = UpdateStats::default();
    for _ in 0..hyper.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(mb) {
            let steps: Vec<&Transition> = chunk.iter().map(|&i| &buf.steps[i]).collect();
            let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
            let g = match actor_loss_and_grad(bundle, &steps, &a, hyper.clip, hyper.ent_coef) {
                Ok(g) => g,
                Err(PolicyError::NonFinite(what)) => {
                    log::warn!("skipping minibatch: non-finite {what}");
                    stats.skipped_minibatches += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let obs: Vec<&[f64]> = steps.iter().map(|s| s.obs.as_slice()).collect();
            let ret: Vec<f64> = chunk.iter().map(|&i| buf.returns[i]).collect();
            let (c_loss, c_grad) = critic_loss_and_grad(&bundle.critic, &obs, &ret);
            if !(g.loss.is_finite() && c_loss.is_finite()) {
                return Err(PolicyError::NonFinite("loss"));
            }
            opt.actor.step(&mut bundle.actor.params, &g.actor);
            let mut ls = [bundle.log_std];
            opt.log_std.step(&mut ls, &[g.log_std]);
            bundle.log_std = ls[0];
            opt.critic.step(&mut bundle.critic.params, &c_grad);
            if hyper.train_safety {
                let mut theta = bundle.safety.trainable();
                opt.safety.step(&mut theta, &g.safety);
                bundle.safety.set_trainable(&theta);
            }
            bundle.project(dt);
            stats.actor_loss += g.loss;
            stats.critic_loss += 2.0 * c_loss;
            stats.clip_fraction += g.clip_fraction;
            stats.approx_kl += g.approx_kl;
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        let m = stats.minibatches as f64;
        stats.actor_loss /= m;
        stats.critic_loss /= m;
        stats.clip_fraction /= m;
        stats.approx_kl /= m;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn step(reward: f64, value: f64, next_value: f64, done: bool) -> Transition {
        Transition {
            obs: vec![0.0; 4],
            u_rl: 0.0,
            u_final: 0.0,
            log_prob: 0.0,
            reward,
            value,
            next_value,
            done,
            truncated: false,
            du_final_dk: vec![],
        }
    }

    #[test]
    fn observation_is_zero_at_equilibrium() {
        let cfg = PlatoonConfig::default();
        let obs = observe(&cfg.equilibrium_state(), &cfg);
        assert_eq!(obs.len(), obs_dim(&cfg));
        assert_eq!(obs.len(), 11);
        assert!(obs.iter().all(|&o| o == 0.0));
    }

    #[test]
    fn zero_actor_has_zero_mean() {
        let cfg = PlatoonConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = PolicyBundle::new(11, &[8, 8], SafetyParams::for_platoon(&cfg), &mut rng);
        b.actor = Mlp::zeros(&b.actor.sizes);
        for o in [vec![0.0; 11], vec![3.0; 11]] {
            assert_eq!(b.policy_forward(&o).unwrap().0, 0.0);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let cfg = PlatoonConfig::default();
        let b = PolicyBundle::new(11, &[8, 8], SafetyParams::for_platoon(&cfg), &mut ChaCha8Rng::seed_from_u64(1));
        let obs = vec![0.1; 11];
        let a = b.sample(&obs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = b.sample(&obs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn tiny_std_keeps_samples_near_the_mean() {
        let cfg = PlatoonConfig::default();
        let mut b = PolicyBundle::new(11, &[8, 8], SafetyParams::for_platoon(&cfg), &mut ChaCha8Rng::seed_from_u64(1));
        b.log_std = LOG_STD_MIN;
        let obs = vec![0.2; 11];
        let (mean, _) = b.policy_forward(&obs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // P(|ε| > 4) ≈ 6e-5, so a thousand draws stay inside with probability ≈ 0.94
        let bound = 4.0 * LOG_STD_MIN.exp();
        let inside = (0..1000).filter(|_| (b.sample(&obs, &mut rng).unwrap().0 - mean).abs() <= bound).count();
        assert!(inside >= 998, "{inside}");
    }

    #[test]
    fn log_prob_matches_closed_form() {
        let (u, m, ls) = (0.7, 0.2, -0.3_f64);
        let s = ls.exp();
        let expected = -((u - m) * (u - m)) / (2.0 * s * s) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((gaussian_log_prob(u, m, ls) - expected).abs() < 1e-14);
    }

    #[test]
    fn clip_arithmetic() {
        assert!((clipped_objective(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_objective(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(clipped_objective(1.1, 1.0, 0.2), 1.1);
        // pessimistic side is never clipped
        assert_eq!(clipped_objective(1.5, -1.0, 0.2), -1.5);
    }

    #[test]
    fn gae_zero_rewards_and_values() {
        let mut buf = RolloutBuffer::default();
        for k in 0..5 {
            buf.push(step(0.0, 0.0, 0.0, k == 4));
        }
        gae_and_returns(&mut buf, 0.99, 0.95).unwrap();
        assert!(buf.advantages.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn gae_single_terminal_step() {
        let mut buf = RolloutBuffer::default();
        buf.push(step(1.0, 0.0, 123.0, true));
        gae_and_returns(&mut buf, 0.99, 0.95).unwrap();
        assert_eq!(buf.advantages, vec![1.0]);
        assert_eq!(buf.returns, vec![1.0]);
    }

    #[test]
    fn gae_two_step_hand_case() {
        let (gamma, lam) = (0.99, 0.95);
        let mut buf = RolloutBuffer::default();
        buf.push(step(1.0, 0.5, 0.5, false));
        buf.push(step(1.0, 0.5, 0.0, true));
        gae_and_returns(&mut buf, gamma, lam).unwrap();
        // δ2 = 1 - 0.5, δ1 = 1 + 0.99·0.5 - 0.5, A1 = δ1 + 0.99·0.95·δ2
        assert!((buf.advantages[1] - 0.5).abs() < 1e-15);
        assert!((buf.advantages[0] - 1.46525).abs() < 1e-12);
        assert!((buf.returns[0] - 1.96525).abs() < 1e-12);
    }

    #[test]
    fn gae_bootstraps_on_truncation() {
        let mut buf = RolloutBuffer::default();
        let mut st = step(1.0, 0.0, 2.0, false);
        st.truncated = true;
        buf.push(st);
        buf.push(step(5.0, 0.0, 0.0, true));
        gae_and_returns(&mut buf, 0.5, 1.0).unwrap();
        // no carry across the boundary
        assert_eq!(buf.advantages, vec![2.0, 5.0]);
    }

    #[test]
    fn gae_rejects_empty_buffer() {
        assert!(matches!(gae_and_returns(&mut RolloutBuffer::default(), 0.99, 0.95), Err(PolicyError::EmptyBuffer)));
    }

    #[test]
    fn standardize_handles_constant_input() {
        assert_eq!(standardize(&[2.0, 2.0, 2.0]), vec![0.0; 3]);
        let s = standardize(&[1.0, 2.0, 3.0, 4.0]);
        assert!(s.iter().sum::<f64>().abs() < 1e-12);
        assert!((s.iter().map(|x| x * x).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn learning_rate_decays_linearly_to_zero() {
        assert_eq!(linear_decay(3e-4, 0, 10), 3e-4);
        assert!((linear_decay(3e-4, 5, 10) - 1.5e-4).abs() < 1e-18);
        assert_eq!(linear_decay(3e-4, 10, 10), 0.0);
    }
}
