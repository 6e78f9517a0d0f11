//! Running observation and return statistics.

use serde::{Deserialize, Serialize};

/// Per-dimension running mean and population variance (Chan et al.'s
/// parallel update, so batches and merges give the same result as one pass).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMeanStd {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningMeanStd {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, x: &[f64]) {
        self.update_batch(std::slice::from_ref(&x.to_vec()));
    }

    pub fn update_batch(&mut self, batch: &[Vec<f64>]) {
        if batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        let dim = self.dim();
        let mut mean = vec![0.0; dim];
        for x in batch {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for x in batch {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        self.merge(&RunningMeanStd { mean, var, count: n });
    }

    /// Combines two sets of statistics.
    pub fn merge(&mut self, other: &RunningMeanStd) {
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = other.clone();
            return;
        }
        let total = self.count + other.count;
        for k in 0..self.dim() {
            let delta = other.mean[k] - self.mean[k];
            let m2 = self.var[k] * self.count
                + other.var[k] * other.count
                + delta * delta * self.count * other.count / total;
            self.mean[k] += delta * other.count / total;
            self.var[k] = (m2 / total).max(0.0);
        }
        self.count = total;
    }
}

const OBS_CLIP: f64 = 10.0;
const EPS: f64 = 1e-8;

/// Observation normalizer plus a scalar reward scaler driven by the running
/// discounted return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub obs: RunningMeanStd,
    pub ret: RunningMeanStd,
    /// Discounted return accumulated for the episode in progress.
    pub running_return: f64,
    pub gamma: f64,
}

impl Normalizer {
    pub fn new(obs_dim: usize, gamma: f64) -> Self {
        Self {
            obs: RunningMeanStd::new(obs_dim),
            ret: RunningMeanStd::new(1),
            running_return: 0.0,
            gamma,
        }
    }

    pub fn normalize_obs(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.obs.mean)
            .zip(&self.obs.var)
            .map(|((v, m), s)| ((v - m) / (s + EPS).sqrt()).clamp(-OBS_CLIP, OBS_CLIP))
            .collect()
    }

    /// Feeds a reward into the return statistics and returns it scaled.
    pub fn scale_reward(&mut self, reward: f64, done: bool) -> f64 {
        self.running_return = self.running_return * self.gamma + reward;
        self.ret.update(&[self.running_return]);
        if done {
            self.running_return = 0.0;
        }
        reward / (self.ret.var[0] + EPS).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn offline(stream: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = stream.len() as f64;
        let dim = stream[0].len();
        let mean: Vec<f64> = (0..dim).map(|k| stream.iter().map(|x| x[k]).sum::<f64>() / n).collect();
        let var = (0..dim)
            .map(|k| stream.iter().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / n)
            .collect();
        (mean, var)
    }

    proptest! {
        #[test]
        fn running_stats_match_offline(
            stream in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 3), 2..60),
            split in 1usize..10,
        ) {
            let mut rms = RunningMeanStd::new(3);
            for chunk in stream.chunks(split) {
                rms.update_batch(chunk);
            }
            let (mean, var) = offline(&stream);
            for k in 0..3 {
                prop_assert!((rms.mean[k] - mean[k]).abs() < 1e-6);
                prop_assert!((rms.var[k] - var[k]).abs() < 1e-6 * var[k].max(1.0));
            }
        }

        #[test]
        fn merge_is_order_independent(
            a in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 1..20),
            b in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 1..20),
        ) {
            let mut x = RunningMeanStd::new(2);
            x.update_batch(&a);
            let mut y = RunningMeanStd::new(2);
            y.update_batch(&b);
            let mut xy = x.clone();
            xy.merge(&y);
            let mut yx = y.clone();
            yx.merge(&x);
            for k in 0..2 {
                prop_assert!((xy.mean[k] - yx.mean[k]).abs() < 1e-9);
                prop_assert!((xy.var[k] - yx.var[k]).abs() < 1e-9);
                prop_assert!(xy.var[k] >= 0.0);
            }
        }
    }

    #[test]
    fn normalized_obs_is_clipped() {
        let mut n = Normalizer::new(1, 0.99);
        n.obs.update_batch(&[vec![0.0], vec![0.0], vec![0.0]]);
        assert_eq!(n.normalize_obs(&[1.0]), vec![OBS_CLIP]);
    }

    #[test]
    fn return_scaler_resets_on_done() {
        let mut n = Normalizer::new(1, 0.5);
        n.scale_reward(1.0, false);
        assert_eq!(n.running_return, 1.0);
        n.scale_reward(1.0, true);
        assert_eq!(n.running_return, 0.0);
    }
}
