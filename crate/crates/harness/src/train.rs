//! PPO training on random head-vehicle disturbances.

use platoon_core::dynamics::{self, DisturbanceProfile};
use platoon_core::policy::{self, PolicyBundle, PpoOptimizers, RolloutBuffer, Transition, UpdateStats};
use platoon_core::sysid::HdvEstimate;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SysidMode};
use crate::reward::reward;
use crate::sim::{self, streams, Estimators};
use crate::HarnessError;

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    /// Mean per-step reward over the episode.
    pub mean_reward: f64,
    /// From the most recent PPO update (0 before the first one).
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Mean `|u_safe|` over the episode.
    pub mean_u_safe: f64,
    /// 1 if the episode ended in a collision.
    pub collisions: usize,
    /// Barrier coefficients at the end of the episode, in trainable order.
    pub k_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub bundle: PolicyBundle,
    pub sysid: Option<Vec<HdvEstimate>>,
    pub log: Vec<EpisodeLog>,
}

/// Fresh policy for the configured platoon.
pub fn initial_bundle(cfg: &RunConfig) -> PolicyBundle {
    let pc = cfg.platoon_config();
    let mut rng = sim::stream_rng(cfg.seed, streams::NETWORK_INIT, 0);
    PolicyBundle::new(policy::obs_dim(&pc), &cfg.training.hidden, cfg.safety.params(&pc), &mut rng)
}

fn numerical(context: String, bundle: &PolicyBundle) -> HarnessError {
    HarnessError::Numerical { context, dump: serde_json::to_string(bundle).ok() }
}

/// Runs `cfg.training.episodes` episodes, updating after every
/// `cfg.ppo.rollout_steps` transitions. The safety layer follows
/// `cfg.safety.enabled` and its estimates follow `cfg.sysid.mode`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutput, HarnessError> {
    cfg.validate()?;
    let pc = cfg.platoon_config();
    let tr = &cfg.training;
    let hyper = cfg.ppo.clone();
    let safety_on = cfg.safety.enabled;
    let mut bundle = initial_bundle(cfg);
    let mut opt = PpoOptimizers::new(&bundle, hyper.lr);
    let mut hyper_update = hyper.clone();
    hyper_update.train_safety = safety_on && cfg.safety.train_coefficients;

    let mut estimators = match (safety_on, cfg.sysid.mode) {
        (false, _) => Estimators::Zero,
        (true, SysidMode::On) => Estimators::pretrained(&pc, &cfg.sysid, cfg.seed)?,
        (true, mode) => Estimators::new(mode, &pc, &cfg.sysid, cfg.seed),
    };

    let mut noise = sim::stream_rng(cfg.seed, streams::POLICY_NOISE, 0);
    let mut shuffle = sim::stream_rng(cfg.seed, streams::MINIBATCH, 0);
    let total_updates = (tr.episodes * tr.episode_steps / hyper.rollout_steps).max(1);
    let mut updates_done = 0;
    let mut last = UpdateStats::default();
    let mut buf = RolloutBuffer::default();
    let mut log = Vec::with_capacity(tr.episodes);
    let profile = DisturbanceProfile::GaussianRandom { std: tr.disturbance_std };

    for episode in 0..tr.episodes {
        let dist_seed = sim::derive_seed(cfg.seed, streams::DISTURBANCE, episode as u64);
        let seq = dynamics::head_velocity_sequence(&profile, dist_seed, tr.episode_steps, &pc)?;
        let mut x = pc.equilibrium_state();
        let (mut reward_sum, mut u_safe_sum, mut steps) = (0.0, 0.0, 0usize);
        let mut collided = false;
        for k in 0..tr.episode_steps {
            let exo = seq.exogenous(k);
            let obs = policy::observe(&x, &pc);
            let value = bundle.value(&obs).map_err(|e| numerical(format!("episode {episode}: {e}"), &bundle))?;
            let (u_rl, log_prob) =
                bundle.sample(&obs, &mut noise).map_err(|e| numerical(format!("episode {episode}: {e}"), &bundle))?;
            let est = safety_on.then(|| estimators.estimates(&x, &pc, exo.head_accel));
            let f = sim::filter_action(&x, &pc, u_rl, &bundle.safety, est.as_ref())?;
            let next = sim::advance(&x, &pc, f.u_final, exo)?;
            estimators.observe(&x, &next, &pc);
            let collided_now = next.collided && !x.collided;
            let r = reward(&next, &pc, &cfg.reward, collided_now).total;
            if !r.is_finite() {
                return Err(numerical(format!("episode {episode} step {k}: non-finite reward"), &bundle));
            }
            let done = next.collided;
            let next_value = if done {
                0.0
            } else {
                bundle
                    .value(&policy::observe(&next, &pc))
                    .map_err(|e| numerical(format!("episode {episode}: {e}"), &bundle))?
            };
            buf.push(Transition {
                obs,
                u_rl,
                u_final: f.u_final,
                log_prob,
                reward: r,
                value,
                next_value,
                done,
                truncated: !done && k + 1 == tr.episode_steps,
                du_final_dk: f.du_final_dk,
            });
            reward_sum += r;
            u_safe_sum += f.u_safe.abs();
            steps += 1;
            x = next;

            if buf.len() >= hyper.rollout_steps {
                policy::gae_and_returns(&mut buf, hyper.gamma, hyper.lam)
                    .map_err(|e| numerical(e.to_string(), &bundle))?;
                let lr = policy::linear_decay(hyper.lr, updates_done, total_updates);
                last = policy::ppo_update(&mut bundle, &mut opt, &buf, &hyper_update, lr, pc.dt, &mut shuffle)
                    .map_err(|e| numerical(format!("update {updates_done}: {e}"), &bundle))?;
                updates_done += 1;
                buf.clear();
            }
            if done {
                collided = true;
                break;
            }
        }
        let entry = EpisodeLog {
            episode,
            mean_reward: reward_sum / steps as f64,
            actor_loss: last.actor_loss,
            critic_loss: last.critic_loss,
            mean_u_safe: u_safe_sum / steps as f64,
            collisions: usize::from(collided),
            k_values: bundle.safety.trainable(),
        };
        log::info!(
            "episode {episode}: mean reward {:.4}, collisions {}, |u_safe| {:.3}",
            entry.mean_reward,
            entry.collisions,
            entry.mean_u_safe
        );
        log.push(entry);
    }
    Ok(TrainOutput { bundle, sysid: estimators.snapshot(), log })
}

/// Outcome of one evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub episode: usize,
    pub mean_reward: f64,
    pub collision: bool,
    pub min_spacing: f64,
}

/// Runs `cfg.training.eval_episodes` random-disturbance episodes with the
/// policy mean. The safety layer is used when `estimators` is given.
pub fn evaluate(
    cfg: &RunConfig,
    bundle: &PolicyBundle,
    mut estimators: Option<Estimators>,
) -> Result<Vec<EvalEpisode>, HarnessError> {
    cfg.validate()?;
    let pc = cfg.platoon_config();
    let tr = &cfg.training;
    let profile = DisturbanceProfile::GaussianRandom { std: tr.disturbance_std };
    let mut out = Vec::with_capacity(tr.eval_episodes);
    for episode in 0..tr.eval_episodes {
        let dist_seed = sim::derive_seed(cfg.seed, streams::EVAL, episode as u64);
        let seq = dynamics::head_velocity_sequence(&profile, dist_seed, tr.episode_steps, &pc)?;
        let mut x = pc.equilibrium_state();
        let (mut reward_sum, mut steps, mut min_spacing) = (0.0, 0usize, f64::INFINITY);
        for k in 0..tr.episode_steps {
            let exo = seq.exogenous(k);
            let (mean, _) = bundle
                .policy_forward(&policy::observe(&x, &pc))
                .map_err(|e| numerical(format!("eval episode {episode}: {e}"), bundle))?;
            let est = estimators.as_ref().map(|e| e.estimates(&x, &pc, exo.head_accel));
            let f = sim::filter_action(&x, &pc, mean, &bundle.safety, est.as_ref())?;
            let next = sim::advance(&x, &pc, f.u_final, exo)?;
            if let Some(e) = estimators.as_mut() {
                e.observe(&x, &next, &pc);
            }
            let collided_now = next.collided && !x.collided;
            reward_sum += reward(&next, &pc, &cfg.reward, collided_now).total;
            steps += 1;
            min_spacing = next.spacing.iter().copied().fold(min_spacing, f64::min);
            x = next;
            if x.collided {
                break;
            }
        }
        out.push(EvalEpisode { episode, mean_reward: reward_sum / steps as f64, collision: x.collided, min_spacing });
    }
    Ok(out)
}
