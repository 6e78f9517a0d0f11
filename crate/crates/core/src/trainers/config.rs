//! Run configuration with full defaulting.

use serde::{Deserialize, Serialize};

use crate::archive::ArchiveKind;
use crate::diversity::AscentConfig;
use crate::env::EnvSpec;
use crate::kernels::{KernelConfig, Metric, NormalizationStat};
use crate::policy::PolicyConfig;
use crate::rl::PpoConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainerKind {
    /// Reward phase plus a diversity phase on archive elites.
    Pdo,
    /// Reward phase with archive-driven exploitation only.
    Pbt,
    /// Joint reward and diversity updates, coefficient chosen by Thompson sampling.
    Dvd,
    /// Joint updates on the full-distribution kernel, coefficient chosen by UCB.
    DseUcb,
    /// Population reset to one elite per behavior cluster.
    EdoCs,
    /// Independent learners.
    PpoSingle,
}

impl TrainerKind {
    pub fn name(&self) -> &'static str {
        match self {
            TrainerKind::Pdo => "pdo",
            TrainerKind::Pbt => "pbt",
            TrainerKind::Dvd => "dvd",
            TrainerKind::DseUcb => "dse-ucb",
            TrainerKind::EdoCs => "edo-cs",
            TrainerKind::PpoSingle => "ppo-single",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown trainer {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub trainer: TrainerKind,
    pub env: EnvSpec,
    pub archive: ArchiveKind,
    /// Population size M.
    pub population: usize,
    pub seed: u64,
    /// Multiplies every step budget below.
    pub scale: f64,
    /// Environment steps per learner before scaling.
    pub total_steps: f64,
    /// Environment steps per learner between exploitations, before scaling.
    /// `None` disables exploitation.
    pub exploit_period: Option<f64>,
    /// Ascent steps per diversity phase; 0 turns the phase off.
    pub diversity_iters: usize,
    pub aux_lr: f64,
    pub aux_grad_clip: f64,
    pub beta: f64,
    pub duplicate_jitter: f64,
    pub metric: Metric,
    pub normalization: NormalizationStat,
    /// Compare mean actions only. Defaults by environment.
    pub deterministic_kernel: Option<bool>,
    pub probe_states: usize,
    pub lambda_arms: Vec<f64>,
    pub eval_episodes: usize,
    /// Iterations between evaluations. Defaults by environment.
    pub eval_every: Option<usize>,
    /// Environment steps per learner per iteration. Defaults by environment.
    pub rollout_steps: Option<usize>,
    pub ppo: PpoConfig,
    pub policy: PolicyConfig,
    /// Run every learner on the calling thread in a fixed order.
    pub deterministic: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            trainer: TrainerKind::Pdo,
            env: EnvSpec::Toy(Default::default()),
            archive: ArchiveKind::grid(),
            population: 5,
            seed: 0,
            scale: 1.0 / 50.0,
            total_steps: 3e6,
            exploit_period: Some(6e5),
            diversity_iters: 20,
            aux_lr: 1e-3,
            aux_grad_clip: 1.0,
            beta: 0.99,
            duplicate_jitter: 1e-4,
            metric: Metric::W2,
            normalization: NormalizationStat::Std,
            deterministic_kernel: None,
            probe_states: 256,
            lambda_arms: vec![0.0, 0.5],
            eval_episodes: 10,
            eval_every: None,
            rollout_steps: None,
            ppo: PpoConfig::default(),
            policy: PolicyConfig::default(),
            deterministic: false,
        }
    }
}

impl TrainerConfig {
    /// Fills environment-dependent defaults and validates. The result is
    /// what gets echoed to `config.json`; resolving it again is a no-op.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        let toy = matches!(c.env, EnvSpec::Toy(_));
        c.eval_every.get_or_insert(if toy { 1 } else { 25 });
        c.rollout_steps.get_or_insert(if toy { 500 } else { 2048 });
        c.deterministic_kernel.get_or_insert(c.env.deterministic_kernel());
        c.ppo.rollout_steps = c.rollout_steps.expect("set above");
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trainer != TrainerKind::PpoSingle && self.population < 2 {
            return bad(format!("population must be at least 2, got {}", self.population));
        }
        if self.population == 0 {
            return bad("population must be positive".into());
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if !(self.total_steps > 0.0) {
            return bad("total_steps must be positive".into());
        }
        if let Some(p) = self.exploit_period {
            if !(p > 0.0) {
                return bad("exploit_period must be positive or null".into());
            }
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if self.eval_episodes == 0 || self.probe_states == 0 || self.eval_every == Some(0) || self.rollout_steps == Some(0) {
            return bad("eval_episodes, probe_states, eval_every and rollout_steps must be positive".into());
        }
        if matches!(self.trainer, TrainerKind::Dvd | TrainerKind::DseUcb) {
            if self.lambda_arms.is_empty() {
                return bad("lambda_arms must not be empty".into());
            }
            if self.lambda_arms.iter().any(|l| !(0.0..=1.0).contains(l)) {
                return bad("lambda_arms must lie in [0, 1]".into());
            }
        }
        if self.metric == Metric::Jsd {
            return bad("the jsd metric needs discrete actions; both environments are continuous".into());
        }
        if let ArchiveKind::Grid { shape, bd_bounds } = &self.archive {
            if shape.contains(&0) || bd_bounds.iter().any(|[lo, hi]| !(hi > lo)) {
                return bad("grid shape must be positive and bounds increasing".into());
            }
        }
        if let ArchiveKind::Queue { capacity } = self.archive {
            if capacity == 0 {
                return bad("queue capacity must be positive".into());
            }
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        let per_iter = self.ppo.rollout_steps as f64;
        ((self.total_steps * self.scale) / per_iter).ceil().max(1.0) as usize
    }

    /// Iterations between exploitations, if enabled.
    pub fn exploit_every(&self) -> Option<usize> {
        self.exploit_period
            .map(|p| ((p * self.scale) / self.ppo.rollout_steps as f64).round().max(1.0) as usize)
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig {
            metric: self.metric,
            deterministic: self.deterministic_kernel.unwrap_or(self.env.deterministic_kernel()),
            normalization: self.normalization,
        }
    }

    pub fn ascent(&self) -> AscentConfig {
        AscentConfig {
            iterations: self.diversity_iters,
            lr: self.aux_lr,
            grad_clip: self.aux_grad_clip,
            beta: self.beta,
            duplicate_jitter: self.duplicate_jitter,
        }
    }
}
