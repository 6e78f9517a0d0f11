//! Generalized advantage estimation.

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    /// Advantages before normalization.
    pub raw: Vec<f64>,
    /// Advantages normalized to zero mean and unit std across the batch
    /// (left raw for a single transition, where the std is undefined).
    pub normalized: Vec<f64>,
    /// Value targets: raw advantage plus value estimate.
    pub returns: Vec<f64>,
}

/// Raw GAE(gamma, lambda). A `done` at step `t` cuts bootstrapping from
/// `t + 1`; `last_value` bootstraps the final step when it is not terminal.
pub fn gae_raw(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lam: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lam * live * running;
        adv[t] = running;
    }
    adv
}

pub fn normalize(xs: &[f64]) -> Vec<f64> {
    if xs.len() < 2 {
        return xs.to_vec();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    xs.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
}

pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lam: f64) -> Advantages {
    let raw = gae_raw(rewards, values, dones, last_value, gamma, lam);
    let returns = raw.iter().zip(values).map(|(a, v)| a + v).collect();
    Advantages {
        normalized: normalize(&raw),
        raw,
        returns,
    }
}
