//! Multi-goal point navigation in `[-1, 1]^2`.
//!
//! The agent starts at the origin and moves by `0.05 * action` per step. The
//! reward at each step is `max_g r_g * exp(-|pos - g|^2 / 0.02)`, so every
//! goal is a separate optimum and the goals' rewards differ.

use serde::{Deserialize, Serialize};

use super::{Environment, SimRng, StepResult};
use crate::policy::ActionSpace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub position: [f64; 2],
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub goals: Vec<Goal>,
    pub step_size: f64,
    pub width: f64,
    pub horizon: usize,
    pub spawn: [f64; 2],
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            goals: vec![
                Goal {
                    position: [0.5, 0.5],
                    reward: 1.0,
                },
                Goal {
                    position: [-0.4, -0.4],
                    reward: 0.7,
                },
            ],
            step_size: 0.05,
            width: 0.02,
            horizon: 100,
            spawn: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyState {
    pub position: [f64; 2],
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct ToyEnv {
    config: ToyConfig,
    state: ToyState,
    started: bool,
    trace: Vec<[f64; 2]>,
}

impl ToyEnv {
    pub fn new(config: ToyConfig) -> Self {
        assert!(config.goals.len() >= 2, "toy environment needs at least two goals");
        let state = ToyState {
            position: config.spawn,
            step: 0,
        };
        Self {
            config,
            state,
            started: false,
            trace: Vec::new(),
        }
    }

    /// Positions visited in the current episode, spawn included.
    pub fn trace(&self) -> &[[f64; 2]] {
        &self.trace
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,x,y\n");
        for (t, p) in self.trace.iter().enumerate() {
            out.push_str(&format!("{t},{},{}\n", p[0], p[1]));
        }
        out
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn state(&self) -> &ToyState {
        &self.state
    }

    pub fn reward_at(&self, pos: [f64; 2]) -> f64 {
        self.config
            .goals
            .iter()
            .map(|g| {
                let d2 = (pos[0] - g.position[0]).powi(2) + (pos[1] - g.position[1]).powi(2);
                g.reward * (-d2 / self.config.width).exp()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn observe(&self) -> Vec<f64> {
        vec![
            self.state.position[0],
            self.state.position[1],
            self.state.step as f64 / self.config.horizon as f64,
        ]
    }

    /// Pure transition: returns the next state, its reward and `done`.
    pub fn transition(&self, state: &ToyState, action: &[f64]) -> (ToyState, f64, bool) {
        let mut position = state.position;
        for k in 0..2 {
            let a = action.get(k).copied().unwrap_or(0.0).clamp(-1.0, 1.0);
            position[k] = (position[k] + self.config.step_size * a).clamp(-1.0, 1.0);
        }
        let step = state.step + 1;
        let reward = self.reward_at(position);
        (ToyState { position, step }, reward, step >= self.config.horizon)
    }
}

impl Environment for ToyEnv {
    fn obs_dim(&self) -> usize {
        3
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(2)
    }

    fn reset(&mut self, _rng: &mut SimRng) -> Vec<f64> {
        self.state = ToyState {
            position: self.config.spawn,
            step: 0,
        };
        self.started = false;
        self.trace.clear();
        self.trace.push(self.state.position);
        self.observe()
    }

    fn step(&mut self, action: &[f64], _rng: &mut SimRng) -> StepResult {
        let (next, reward, done) = self.transition(&self.state, action);
        self.state = next;
        self.started = true;
        self.trace.push(self.state.position);
        StepResult {
            obs: self.observe(),
            reward,
            sparse_reward: reward,
            done,
        }
    }

    /// Final (current) position mapped to `[0, 1]^2`.
    fn behavior_descriptor(&self) -> Option<Vec<f64>> {
        self.started
            .then(|| self.state.position.iter().map(|p| (p + 1.0) / 2.0).collect())
    }
}
