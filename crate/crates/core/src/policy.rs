//! Stochastic policies and value functions over flat parameter vectors.
//!
//! A continuous policy stores its state-independent `log_std` after the
//! network parameters, so a single slice copy moves the whole policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{ActionDist, DiagGaussian, DiscreteDist, LOG_STD_MAX, LOG_STD_MIN};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ForwardCache, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "n")]
pub enum ActionSpace {
    Continuous(usize),
    Discrete(usize),
}

impl ActionSpace {
    pub fn dim(&self) -> usize {
        match *self {
            ActionSpace::Continuous(n) | ActionSpace::Discrete(n) => n,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActionSpace::Continuous(_) => "continuous",
            ActionSpace::Discrete(_) => "discrete",
        }
    }
}

/// Gradient of some scalar with respect to the distribution parameters of
/// one state's output.
#[derive(Debug, Clone, PartialEq)]
pub enum DistGrad {
    Gaussian { d_mean: Vec<f64>, d_log_std: Vec<f64> },
    Discrete { d_logits: Vec<f64> },
}

impl DistGrad {
    pub fn zeros(space: ActionSpace) -> Self {
        match space {
            ActionSpace::Continuous(n) => DistGrad::Gaussian {
                d_mean: vec![0.0; n],
                d_log_std: vec![0.0; n],
            },
            ActionSpace::Discrete(n) => DistGrad::Discrete {
                d_logits: vec![0.0; n],
            },
        }
    }

    pub fn scale(&mut self, s: f64) {
        match self {
            DistGrad::Gaussian { d_mean, d_log_std } => {
                d_mean.iter_mut().chain(d_log_std.iter_mut()).for_each(|v| *v *= s)
            }
            DistGrad::Discrete { d_logits } => d_logits.iter_mut().for_each(|v| *v *= s),
        }
    }
}

/// Chains a gradient on softmax probabilities back to the logits.
pub fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(d_probs).map(|(p, g)| p * (g - dot)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub log_std_init: f64,
    /// Scale of the final layer at initialization; small values start every
    /// policy near the zero action.
    pub output_gain: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            log_std_init: 0.0,
            output_gain: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    topology: Topology,
    action_space: ActionSpace,
    params: Vec<f64>,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, action_space: ActionSpace, config: &PolicyConfig, rng: &mut R) -> Self {
        let topology = Topology::new(obs_dim, &config.hidden, action_space.dim(), config.activation);
        let mut params = topology.init_params(rng, config.output_gain);
        if let ActionSpace::Continuous(n) = action_space {
            params.extend(std::iter::repeat_n(config.log_std_init, n));
        }
        Self {
            topology,
            action_space,
            params,
        }
    }

    pub fn from_parts(topology: Topology, action_space: ActionSpace, params: Vec<f64>) -> Result<Self> {
        topology.validate()?;
        if topology.output_dim() != action_space.dim() {
            return Err(Error::DimensionMismatch {
                expected: action_space.dim(),
                got: topology.output_dim(),
            });
        }
        let expected = Self::expected_len(&topology, action_space);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            topology,
            action_space,
            params,
        })
    }

    fn expected_len(topology: &Topology, space: ActionSpace) -> usize {
        topology.param_count()
            + match space {
                ActionSpace::Continuous(n) => n,
                ActionSpace::Discrete(_) => 0,
            }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }

    pub fn obs_dim(&self) -> usize {
        self.topology.input_dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// A policy with the same topology and new parameters.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        Ok(Self {
            topology: self.topology.clone(),
            action_space: self.action_space,
            params,
        })
    }

    fn raw_log_std(&self) -> &[f64] {
        &self.params[self.topology.param_count()..]
    }

    pub fn forward(&self, obs: &[f64]) -> Result<ActionDist> {
        self.forward_cached(obs).map(|(d, _)| d)
    }

    pub fn forward_cached(&self, obs: &[f64]) -> Result<(ActionDist, ForwardCache)> {
        let cache = nn::forward(&self.topology, &self.params, obs)?;
        let dist = match self.action_space {
            ActionSpace::Continuous(_) => ActionDist::Gaussian(DiagGaussian::new(
                cache.output().to_vec(),
                self.raw_log_std().to_vec(),
            )?),
            ActionSpace::Discrete(_) => ActionDist::Discrete(DiscreteDist::from_logits(cache.output())),
        };
        Ok((dist, cache))
    }

    /// Accumulates the parameter gradient for one state given its cache.
    pub fn backward_one(&self, cache: &ForwardCache, upstream: &DistGrad, grad: &mut [f64]) {
        let net = self.topology.param_count();
        match upstream {
            DistGrad::Gaussian { d_mean, d_log_std } => {
                nn::backward(&self.topology, &self.params, cache, d_mean, &mut grad[..net]);
                for (k, (g, raw)) in grad[net..].iter_mut().zip(self.raw_log_std()).enumerate() {
                    // Clamped log_std has zero gradient outside its range.
                    if (LOG_STD_MIN..=LOG_STD_MAX).contains(raw) {
                        *g += d_log_std[k];
                    }
                }
            }
            DistGrad::Discrete { d_logits } => {
                nn::backward(&self.topology, &self.params, cache, d_logits, &mut grad[..net]);
            }
        }
    }

    /// Exact reverse-mode gradient of `sum_s <upstream_s, dist_params(s)>`.
    pub fn backward(&self, obs_batch: &[Vec<f64>], upstream: &[DistGrad]) -> Result<Vec<f64>> {
        if obs_batch.len() != upstream.len() {
            return Err(Error::DimensionMismatch {
                expected: obs_batch.len(),
                got: upstream.len(),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        for (obs, up) in obs_batch.iter().zip(upstream) {
            let cache = nn::forward(&self.topology, &self.params, obs)?;
            self.backward_one(&cache, up, &mut grad);
        }
        Ok(grad)
    }
}

/// State-value estimator with a scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    topology: Topology,
    params: Vec<f64>,
}

impl ValueFunction {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], activation: Activation, rng: &mut R) -> Self {
        let topology = Topology::new(obs_dim, hidden, 1, activation);
        let params = topology.init_params(rng, 1.0);
        Self { topology, params }
    }

    pub fn from_parts(topology: Topology, params: Vec<f64>) -> Result<Self> {
        topology.validate()?;
        if topology.output_dim() != 1 || params.len() != topology.param_count() {
            return Err(Error::DimensionMismatch {
                expected: topology.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { topology, params })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.topology.clone(), params)
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(nn::forward(&self.topology, &self.params, obs)?.output()[0])
    }

    pub fn value_cached(&self, obs: &[f64]) -> Result<(f64, ForwardCache)> {
        let cache = nn::forward(&self.topology, &self.params, obs)?;
        Ok((cache.output()[0], cache))
    }

    pub fn backward_one(&self, cache: &ForwardCache, d_value: f64, grad: &mut [f64]) {
        nn::backward(&self.topology, &self.params, cache, &[d_value], grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_policy(seed: u64) -> Policy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PolicyConfig {
            hidden: vec![5, 4],
            output_gain: 1.0,
            log_std_init: -0.3,
            ..Default::default()
        };
        Policy::new(3, ActionSpace::Continuous(2), &cfg, &mut rng)
    }

    #[test]
    fn zero_final_layer_gives_zero_mean() {
        let mut p = gaussian_policy(1);
        let t = p.topology().clone();
        let net = t.param_count();
        let last_block = t.layer_sizes[t.layer_sizes.len() - 2] * 2 + 2;
        for v in &mut p.params[net - last_block..net] {
            *v = 0.0;
        }
        let d = p.forward(&[0.4, -1.0, 2.0]).unwrap();
        let g = d.as_gaussian().unwrap();
        assert_eq!(g.mean(), &[0.0, 0.0]);
        assert_eq!(g.std(), vec![(-0.3f64).exp(); 2]);
    }

    #[test]
    fn forward_is_deterministic() {
        let p = gaussian_policy(2);
        let a = p.forward(&[0.1, 0.2, 0.3]).unwrap();
        let b = p.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = gaussian_policy(3);
        let obs = vec![vec![0.5, 0.1, -0.2]; 4];
        let up = vec![DistGrad::zeros(p.action_space()); 4];
        assert!(p.backward(&obs, &up).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let p = gaussian_policy(4);
        let json = serde_json::to_string(&p).unwrap();
        let q: Policy = serde_json::from_str(&json).unwrap();
        let obs = [0.3, -0.7, 1.1];
        assert_eq!(p.forward(&obs).unwrap(), q.forward(&obs).unwrap());
        assert!(p.params().iter().zip(q.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn from_parts_rejects_wrong_length() {
        let p = gaussian_policy(5);
        let mut params = p.params().to_vec();
        params.pop();
        assert!(Policy::from_parts(p.topology().clone(), p.action_space(), params).is_err());
    }

    fn fd_check(p: &Policy, obs: &[Vec<f64>], up: &[DistGrad]) {
        let grad = p.backward(obs, up).unwrap();
        let objective = |q: &Policy| -> f64 {
            obs.iter()
                .zip(up)
                .map(|(o, u)| match (q.forward(o).unwrap(), u) {
                    (ActionDist::Gaussian(g), DistGrad::Gaussian { d_mean, d_log_std }) => {
                        g.mean().iter().zip(d_mean).map(|(a, b)| a * b).sum::<f64>()
                            + g.log_std().iter().zip(d_log_std).map(|(a, b)| a * b).sum::<f64>()
                    }
                    (ActionDist::Discrete(_), DistGrad::Discrete { d_logits }) => {
                        let logits = nn::forward(q.topology(), q.params(), o).unwrap();
                        logits.output().iter().zip(d_logits).map(|(a, b)| a * b).sum()
                    }
                    _ => unreachable!(),
                })
                .sum()
        };
        let h = 1e-5;
        for k in 0..p.num_params() {
            let mut plus = p.params().to_vec();
            let mut minus = p.params().to_vec();
            plus[k] += h;
            minus[k] -= h;
            let fd = (objective(&p.with_params(plus).unwrap()) - objective(&p.with_params(minus).unwrap())) / (2.0 * h);
            if fd.abs() < 1e-7 && grad[k].abs() < 1e-7 {
                continue;
            }
            assert_relative_eq!(fd, grad[k], max_relative = 1e-4);
        }
    }

    #[test]
    fn gaussian_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let p = gaussian_policy(100 + seed);
            let obs: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let up: Vec<DistGrad> = (0..3)
                .map(|_| DistGrad::Gaussian {
                    d_mean: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    d_log_std: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
                })
                .collect();
            fd_check(&p, &obs, &up);
        }
    }

    #[test]
    fn discrete_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = PolicyConfig {
            hidden: vec![4],
            output_gain: 1.0,
            ..Default::default()
        };
        let p = Policy::new(2, ActionSpace::Discrete(3), &cfg, &mut rng);
        let obs = vec![vec![0.2, -0.5], vec![1.0, 0.3]];
        let up = vec![
            DistGrad::Discrete { d_logits: vec![0.1, -0.4, 0.9] },
            DistGrad::Discrete { d_logits: vec![-1.0, 0.2, 0.0] },
        ];
        fd_check(&p, &obs, &up);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let logits = [0.3, -1.2, 0.8];
        let d_probs = [0.5, -0.25, 1.0];
        let analytic = softmax_backward(DiscreteDist::from_logits(&logits).probs(), &d_probs);
        let h = 1e-6;
        for k in 0..3 {
            let f = |delta: f64| {
                let mut l = logits;
                l[k] += delta;
                DiscreteDist::from_logits(&l).probs().iter().zip(&d_probs).map(|(p, g)| p * g).sum::<f64>()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert_relative_eq!(fd, analytic[k], max_relative = 1e-6);
        }
    }

    #[test]
    fn value_function_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = ValueFunction::new(4, &[8], Activation::Tanh, &mut rng);
        assert!(v.value(&[0.0, 1.0, 2.0, 3.0]).unwrap().is_finite());
        assert!(v.value(&[0.0]).is_err());
    }
}
