//! Environments. Each instance is owned by a single learner and is driven
//! with an explicit random stream so runs replay bit-for-bit.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::policy::ActionSpace;

pub mod dogfight;
pub mod toy;

pub use dogfight::{DogfightConfig, DogfightEnv};
pub use toy::{ToyConfig, ToyEnv};

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    /// Reward used for learning (may include shaping).
    pub reward: f64,
    /// Task reward counted toward fitness.
    pub sparse_reward: f64,
    pub done: bool,
}

pub trait Environment: Send {
    fn obs_dim(&self) -> usize;

    fn action_space(&self) -> ActionSpace;

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64>;

    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> StepResult;

    /// Behavior descriptor of the episode in progress (or just finished),
    /// in `[0, 1]^2`. `None` before the first step.
    fn behavior_descriptor(&self) -> Option<Vec<f64>>;
}

/// Serializable environment selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    Toy(ToyConfig),
    Dogfight(DogfightConfig),
}

impl EnvSpec {
    pub fn build(&self) -> Box<dyn Environment> {
        match self {
            EnvSpec::Toy(c) => Box::new(ToyEnv::new(c.clone())),
            EnvSpec::Dogfight(c) => Box::new(DogfightEnv::new(c.clone())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Toy(_) => "toy",
            EnvSpec::Dogfight(_) => "dogfight",
        }
    }

    /// Fixed QD-score offset: the lowest fitness an episode can reach.
    pub fn qd_offset(&self) -> f64 {
        match self {
            EnvSpec::Toy(_) => 0.0,
            EnvSpec::Dogfight(_) => -2000.0,
        }
    }

    /// Whether episodes yield a behavior descriptor, as grid archives need.
    pub fn has_descriptor(&self) -> bool {
        match self {
            EnvSpec::Toy(_) | EnvSpec::Dogfight(_) => true,
        }
    }

    /// Whether the similarity kernel compares mean actions only.
    pub fn deterministic_kernel(&self) -> bool {
        matches!(self, EnvSpec::Dogfight(_))
    }
}
