//! The reward phase: rollouts, advantages, clipped policy updates and
//! evaluation, bundled per learner.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvSpec, Environment, SimRng};
use crate::normalizer::Normalizer;
use crate::optim::Adam;
use crate::policy::{Policy, PolicyConfig, ValueFunction};
use crate::Result;

pub mod eval;
pub mod gae;
pub mod ppo;
pub mod rollout;

pub use eval::{evaluate, Evaluation};
pub use gae::{gae, gae_raw, Advantages};
pub use ppo::{ppo_policy_gradient, ppo_update, value_gradient, PpoBatch, PpoConfig, PpoStats};
pub use rollout::{collect_rollout, EnvCursor, RolloutBuffer};

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Everything a learner trains, without its environment. This is the
/// payload copied during exploitation and stored in archives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub policy: Policy,
    pub value: ValueFunction,
    pub policy_opt: Adam,
    pub value_opt: Adam,
    pub normalizer: Normalizer,
}

impl AgentState {
    pub fn new(obs_dim: usize, env: &dyn Environment, policy_cfg: &PolicyConfig, ppo: &PpoConfig, rng: &mut SimRng) -> Self {
        let policy = Policy::new(obs_dim, env.action_space(), policy_cfg, rng);
        let value = ValueFunction::new(obs_dim, &policy_cfg.hidden, policy_cfg.activation, rng);
        Self {
            policy_opt: Adam::new(policy.num_params(), ppo.policy_lr),
            value_opt: Adam::new(value.params().len(), ppo.value_lr),
            normalizer: Normalizer::new(obs_dim, ppo.gamma),
            policy,
            value,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub steps: usize,
    /// Mean sparse return of episodes finished during the rollout.
    pub episode_return: Option<f64>,
    pub ppo: PpoStats,
}

/// A single population member with its own environment and random stream.
pub struct Learner {
    pub id: usize,
    pub spec: EnvSpec,
    pub agent: AgentState,
    pub env: Box<dyn Environment>,
    pub cursor: EnvCursor,
    pub rng: SimRng,
    pub total_steps: u64,
    /// Experience from the most recent reward phase.
    pub last_buffer: Option<RolloutBuffer>,
}

impl Learner {
    pub fn new(id: usize, spec: &EnvSpec, policy_cfg: &PolicyConfig, ppo: &PpoConfig, seed: u64) -> Self {
        let env = spec.build();
        let mut rng = stream_rng(seed, id as u64);
        let agent = AgentState::new(env.obs_dim(), env.as_ref(), policy_cfg, ppo, &mut rng);
        Self {
            id,
            spec: spec.clone(),
            agent,
            env,
            cursor: EnvCursor::default(),
            rng,
            total_steps: 0,
            last_buffer: None,
        }
    }

    /// Collects a rollout with the current policy and turns it into an
    /// update batch. The raw buffer is kept in `last_buffer`.
    pub fn collect(&mut self, cfg: &PpoConfig) -> Result<PpoBatch> {
        let buf = collect_rollout(
            self.id,
            &self.agent.policy,
            &self.agent.value,
            self.env.as_mut(),
            &mut self.agent.normalizer,
            &mut self.cursor,
            cfg.rollout_steps,
            true,
            &mut self.rng,
        )?;
        let adv = gae(&buf.rewards, &buf.values, &buf.dones, buf.last_value, cfg.gamma, cfg.lam);
        let batch = PpoBatch::from_rollout(&buf, &adv);
        self.total_steps += buf.len() as u64;
        self.last_buffer = Some(buf);
        Ok(batch)
    }

    /// Mean sparse return of the episodes finished in the last rollout.
    pub fn last_episode_return(&self) -> Option<f64> {
        let b = self.last_buffer.as_ref()?;
        (!b.episode_returns.is_empty()).then(|| b.episode_returns.iter().sum::<f64>() / b.episode_returns.len() as f64)
    }

    /// One iteration of collect, estimate, update.
    pub fn reward_phase(&mut self, cfg: &PpoConfig) -> Result<IterationStats> {
        let batch = self.collect(cfg)?;
        let a = &mut self.agent;
        let (policy, value, stats) =
            ppo_update(&a.policy, &a.value, &mut a.policy_opt, &mut a.value_opt, &batch, cfg, &mut self.rng)?;
        a.policy = policy;
        a.value = value;
        Ok(IterationStats {
            steps: batch.len(),
            episode_return: self.last_episode_return(),
            ppo: stats,
        })
    }

    /// Evaluates the current policy on a fresh environment so the training
    /// episode in progress is left untouched.
    pub fn evaluate(&self, episodes: usize, rng: &mut SimRng) -> Result<Evaluation> {
        let mut env = self.spec.build();
        evaluate(&self.agent.policy, &self.agent.normalizer, env.as_mut(), episodes, true, rng)
    }

    /// Replaces the trained payload. The environment restarts its episode so
    /// the new policy never continues a trajectory it did not start.
    pub fn load(&mut self, agent: AgentState) {
        self.agent = agent;
        self.cursor = EnvCursor::default();
    }
}
