//! Two-armed (or more) bandits over the diversity coefficient.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BanditKind {
    Thompson,
    Ucb,
}

/// Bernoulli bandit: each pull succeeds when the population's best fitness
/// strictly improved over the selection cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    pub kind: BanditKind,
    pub arms: Vec<f64>,
    pub successes: Vec<u64>,
    pub failures: Vec<u64>,
    pub best_fitness: f64,
    pub current: usize,
}

impl BanditState {
    pub fn new(kind: BanditKind, arms: Vec<f64>) -> Result<Self> {
        if arms.is_empty() {
            return Err(Error::Config("bandit needs at least one arm".into()));
        }
        let n = arms.len();
        Ok(Self {
            kind,
            arms,
            successes: vec![0; n],
            failures: vec![0; n],
            best_fitness: f64::NEG_INFINITY,
            current: 0,
        })
    }

    pub fn pulls(&self, arm: usize) -> u64 {
        self.successes[arm] + self.failures[arm]
    }

    /// Chooses an arm, remembers it as current, and returns its value.
    pub fn select<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        self.current = match self.kind {
            BanditKind::Thompson => thompson_select(&self.successes, &self.failures, rng),
            BanditKind::Ucb => ucb_select(&self.successes, &self.failures),
        };
        self.arms[self.current]
    }

    pub fn update(&mut self, improved: bool) {
        if improved {
            self.successes[self.current] += 1;
        } else {
            self.failures[self.current] += 1;
        }
    }

    /// Scores the cycle that just ended against the best fitness seen so far.
    pub fn observe(&mut self, best_fitness: f64) {
        let improved = best_fitness > self.best_fitness;
        self.update(improved);
        if improved {
            self.best_fitness = best_fitness;
        }
    }
}

/// Index of the arm with the largest draw from `Beta(s + 1, f + 1)`.
pub fn thompson_select<R: Rng + ?Sized>(successes: &[u64], failures: &[u64], rng: &mut R) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (s, f)) in successes.iter().zip(failures).enumerate() {
        let beta = Beta::new(*s as f64 + 1.0, *f as f64 + 1.0).expect("positive shape parameters");
        let draw = beta.sample(rng);
        if draw > best.1 {
            best = (i, draw);
        }
    }
    best.0
}

/// UCB1: an unpulled arm first, otherwise the largest
/// `mean + sqrt(2 ln N / n_i)`.
pub fn ucb_select(successes: &[u64], failures: &[u64]) -> usize {
    let pulls: Vec<u64> = successes.iter().zip(failures).map(|(s, f)| s + f).collect();
    if let Some(i) = pulls.iter().position(|&n| n == 0) {
        return i;
    }
    let total = pulls.iter().sum::<u64>() as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (&s, &n)) in successes.iter().zip(&pulls).enumerate() {
        let score = s as f64 / n as f64 + (2.0 * total.ln() / n as f64).sqrt();
        if score > best.1 {
            best = (i, score);
        }
    }
    best.0
}
