//! Experience collection.

use crate::env::{Environment, SimRng};
use crate::normalizer::Normalizer;
use crate::policy::{Policy, ValueFunction};
use crate::Result;

/// On-policy experience from one learner. Index `t` of every vector refers
/// to the same transition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub learner_id: usize,
    /// Observations as produced by the environment.
    pub raw_obs: Vec<Vec<f64>>,
    /// Observations after the learner's normalizer, as fed to the networks.
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    /// Learning reward after return scaling.
    pub rewards: Vec<f64>,
    /// Task reward, unscaled.
    pub sparse_rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value estimate of the observation following the last transition.
    pub last_value: f64,
    /// Sparse returns of the episodes that finished inside this rollout.
    pub episode_returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Where a learner's environment stands between rollouts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnvCursor {
    pub obs: Option<Vec<f64>>,
    pub episode_sparse_return: f64,
}

/// Runs `steps` environment steps with stochastic actions, resetting
/// episodes as they end. Observation and return statistics are updated
/// along the way when `update_normalizer` is set.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollout(
    learner_id: usize,
    policy: &Policy,
    value: &ValueFunction,
    env: &mut dyn Environment,
    normalizer: &mut Normalizer,
    cursor: &mut EnvCursor,
    steps: usize,
    update_normalizer: bool,
    rng: &mut SimRng,
) -> Result<RolloutBuffer> {
    if steps == 0 {
        return Err(crate::Error::InvalidArgument("rollout needs at least one step".into()));
    }
    let mut buf = RolloutBuffer {
        learner_id,
        ..Default::default()
    };
    for _ in 0..steps {
        let raw = match cursor.obs.take() {
            Some(o) => o,
            None => {
                cursor.episode_sparse_return = 0.0;
                env.reset(rng)
            }
        };
        if update_normalizer {
            normalizer.obs.update(&raw);
        }
        let obs = normalizer.normalize_obs(&raw);
        let dist = policy.forward(&obs)?;
        let action = dist.sample(rng);
        let log_prob = dist.log_prob(&action);
        let v = value.value(&obs)?;
        let out = env.step(&action, rng);
        let reward = if update_normalizer {
            normalizer.scale_reward(out.reward, out.done)
        } else {
            out.reward / (normalizer.ret.var[0] + 1e-8).sqrt()
        };
        cursor.episode_sparse_return += out.sparse_reward;
        if out.done {
            buf.episode_returns.push(cursor.episode_sparse_return);
        } else {
            cursor.obs = Some(out.obs);
        }
        buf.raw_obs.push(raw);
        buf.obs.push(obs);
        buf.actions.push(action);
        buf.log_probs.push(log_prob);
        buf.rewards.push(reward);
        buf.sparse_rewards.push(out.sparse_reward);
        buf.values.push(v);
        buf.dones.push(out.done);
    }
    buf.last_value = match &cursor.obs {
        Some(raw) => value.value(&normalizer.normalize_obs(raw))?,
        None => 0.0,
    };
    Ok(buf)
}
