//! Clipped-surrogate policy optimization with a separate value network.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::gae::Advantages;
use super::rollout::RolloutBuffer;
use crate::dist::ActionDist;
use crate::env::SimRng;
use crate::optim::{clip_grad_norm, Adam};
use crate::policy::{DistGrad, Policy, ValueFunction};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lam: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub rollout_steps: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lam: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            policy_lr: 3e-4,
            value_lr: 3e-4,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            rollout_steps: 2048,
        }
    }
}

/// The slice of a rollout that the update consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn from_rollout(buf: &RolloutBuffer, adv: &Advantages) -> Self {
        Self {
            obs: buf.obs.clone(),
            actions: buf.actions.clone(),
            log_probs: buf.log_probs.clone(),
            advantages: adv.normalized.clone(),
            returns: adv.returns.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Set when a non-finite loss or gradient stopped the update.
    pub aborted: bool,
}

/// Gradient of `log p(action)` with respect to the distribution parameters.
pub fn log_prob_grad(dist: &ActionDist, action: &[f64]) -> DistGrad {
    match dist {
        ActionDist::Gaussian(g) => {
            let mut d_mean = Vec::with_capacity(g.dim());
            let mut d_log_std = Vec::with_capacity(g.dim());
            for ((m, l), a) in g.mean().iter().zip(g.log_std()).zip(action) {
                let s = l.exp();
                let z = (a - m) / s;
                d_mean.push(z / s);
                d_log_std.push(z * z - 1.0);
            }
            DistGrad::Gaussian { d_mean, d_log_std }
        }
        ActionDist::Discrete(d) => {
            let k = action[0] as usize;
            let d_logits = d
                .probs()
                .iter()
                .enumerate()
                .map(|(j, p)| if j == k { 1.0 - p } else { -p })
                .collect();
            DistGrad::Discrete { d_logits }
        }
    }
}

/// Gradient of the entropy with respect to the distribution parameters.
pub fn entropy_grad(dist: &ActionDist) -> DistGrad {
    match dist {
        ActionDist::Gaussian(g) => DistGrad::Gaussian {
            d_mean: vec![0.0; g.dim()],
            d_log_std: vec![1.0; g.dim()],
        },
        ActionDist::Discrete(d) => {
            let h = d.entropy();
            let d_logits = d
                .probs()
                .iter()
                .map(|&p| if p > 0.0 { -p * (p.ln() + h) } else { 0.0 })
                .collect();
            DistGrad::Discrete { d_logits }
        }
    }
}

fn add_scaled(acc: &mut DistGrad, other: &DistGrad, s: f64) {
    match (acc, other) {
        (
            DistGrad::Gaussian { d_mean, d_log_std },
            DistGrad::Gaussian {
                d_mean: om,
                d_log_std: ol,
            },
        ) => {
            d_mean.iter_mut().zip(om).for_each(|(a, b)| *a += s * b);
            d_log_std.iter_mut().zip(ol).for_each(|(a, b)| *a += s * b);
        }
        (DistGrad::Discrete { d_logits }, DistGrad::Discrete { d_logits: o }) => {
            d_logits.iter_mut().zip(o).for_each(|(a, b)| *a += s * b);
        }
        _ => unreachable!("mismatched action spaces"),
    }
}

/// Ascent direction of `mean(min(r A, clip(r) A)) + entropy_coef * mean(H)`
/// over the transitions in `idx`, plus diagnostics.
pub fn ppo_policy_gradient(
    policy: &Policy,
    batch: &PpoBatch,
    idx: &[usize],
    clip: f64,
    entropy_coef: f64,
) -> Result<(Vec<f64>, PpoStats)> {
    let mut grad = vec![0.0; policy.num_params()];
    let mut stats = PpoStats::default();
    if idx.is_empty() {
        return Ok((grad, stats));
    }
    let n = idx.len() as f64;
    let mut clipped = 0usize;
    for &t in idx {
        let (dist, cache) = policy.forward_cached(&batch.obs[t])?;
        let action = &batch.actions[t];
        let logp = dist.log_prob(action);
        let log_ratio = logp - batch.log_probs[t];
        let ratio = log_ratio.exp();
        let a = batch.advantages[t];
        let unclipped = ratio * a;
        let clipped_obj = ratio.clamp(1.0 - clip, 1.0 + clip) * a;
        let surrogate = unclipped.min(clipped_obj);
        // The min selects the clipped branch exactly when the ratio has left
        // the trust region in the direction the advantage favors.
        let active = !((a > 0.0 && ratio > 1.0 + clip) || (a < 0.0 && ratio < 1.0 - clip));
        if !active {
            clipped += 1;
        }
        let entropy = dist.entropy();
        stats.policy_loss -= surrogate / n;
        stats.entropy += entropy / n;
        stats.approx_kl += ((ratio - 1.0) - log_ratio) / n;

        let mut up = DistGrad::zeros(policy.action_space());
        if active {
            add_scaled(&mut up, &log_prob_grad(&dist, action), ratio * a / n);
        }
        if entropy_coef != 0.0 {
            add_scaled(&mut up, &entropy_grad(&dist), entropy_coef / n);
        }
        policy.backward_one(&cache, &up, &mut grad);
    }
    stats.clip_fraction = clipped as f64 / n;
    Ok((grad, stats))
}

/// Gradient of `0.5 * mean((v - target)^2)` and the loss itself.
pub fn value_gradient(value: &ValueFunction, batch: &PpoBatch, idx: &[usize]) -> Result<(Vec<f64>, f64)> {
    let mut grad = vec![0.0; value.params().len()];
    let mut loss = 0.0;
    if idx.is_empty() {
        return Ok((grad, loss));
    }
    let n = idx.len() as f64;
    for &t in idx {
        let (v, cache) = value.value_cached(&batch.obs[t])?;
        let err = v - batch.returns[t];
        loss += 0.5 * err * err / n;
        value.backward_one(&cache, err / n, &mut grad);
    }
    Ok((grad, loss))
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Runs the configured epochs of minibatch updates. On any non-finite loss
/// or gradient the whole update is discarded: the returned networks and
/// optimizers equal the inputs and `aborted` is set.
pub fn ppo_update(
    policy: &Policy,
    value: &ValueFunction,
    policy_opt: &mut Adam,
    value_opt: &mut Adam,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    rng: &mut SimRng,
) -> Result<(Policy, ValueFunction, PpoStats)> {
    let saved = (policy_opt.clone(), value_opt.clone());
    let mut p = policy.clone();
    let mut v = value.clone();
    let mut totals = PpoStats::default();
    let mut count = 0usize;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let chunk = batch.len().div_ceil(cfg.minibatches.max(1)).max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(chunk) {
            let (mut pg, stats) = ppo_policy_gradient(&p, batch, idx, cfg.clip, cfg.entropy_coef)?;
            let (mut vg, vloss) = value_gradient(&v, batch, idx)?;
            if !(stats.policy_loss.is_finite() && vloss.is_finite() && all_finite(&pg) && all_finite(&vg)) {
                *policy_opt = saved.0;
                *value_opt = saved.1;
                return Ok((
                    policy.clone(),
                    value.clone(),
                    PpoStats {
                        aborted: true,
                        ..Default::default()
                    },
                ));
            }
            clip_grad_norm(&mut pg, cfg.max_grad_norm);
            clip_grad_norm(&mut vg, cfg.max_grad_norm);
            let mut pp = p.params().to_vec();
            policy_opt.ascend(&mut pp, &pg);
            p = p.with_params(pp)?;
            let mut vp = v.params().to_vec();
            value_opt.descend(&mut vp, &vg);
            v = v.with_params(vp)?;
            totals.policy_loss += stats.policy_loss;
            totals.value_loss += vloss;
            totals.entropy += stats.entropy;
            totals.approx_kl += stats.approx_kl;
            totals.clip_fraction += stats.clip_fraction;
            count += 1;
        }
    }
    if count > 0 {
        let c = count as f64;
        totals.policy_loss /= c;
        totals.value_loss /= c;
        totals.entropy /= c;
        totals.approx_kl /= c;
        totals.clip_fraction /= c;
    }
    Ok((p, v, totals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::policy::{ActionSpace, PolicyConfig};
    use rand::SeedableRng;

    fn nets(space: ActionSpace) -> (Policy, ValueFunction) {
        let mut rng = SimRng::seed_from_u64(4);
        let cfg = PolicyConfig {
            hidden: vec![8],
            output_gain: 1.0,
            ..Default::default()
        };
        (
            Policy::new(3, space, &cfg, &mut rng),
            ValueFunction::new(3, &[8], Activation::Tanh, &mut rng),
        )
    }

    fn batch_for(policy: &Policy, adv: f64, n: usize, seed: u64) -> PpoBatch {
        let mut rng = SimRng::seed_from_u64(seed);
        let mut b = PpoBatch {
            obs: vec![],
            actions: vec![],
            log_probs: vec![],
            advantages: vec![],
            returns: vec![],
        };
        for k in 0..n {
            let obs = vec![0.1 * k as f64, -0.2, 0.3];
            let d = policy.forward(&obs).unwrap();
            let a = d.sample(&mut rng);
            b.log_probs.push(d.log_prob(&a));
            b.obs.push(obs);
            b.actions.push(a);
            b.advantages.push(adv);
            b.returns.push(1.0);
        }
        b
    }

    #[test]
    fn zero_advantage_leaves_policy_unchanged() {
        let (p, v) = nets(ActionSpace::Continuous(2));
        let b = batch_for(&p, 0.0, 16, 1);
        let mut po = Adam::new(p.num_params(), 3e-4);
        let mut vo = Adam::new(v.params().len(), 3e-4);
        let (p2, v2, stats) =
            ppo_update(&p, &v, &mut po, &mut vo, &b, &PpoConfig::default(), &mut SimRng::seed_from_u64(0)).unwrap();
        assert_eq!(p2.params(), p.params());
        assert_ne!(v2.params(), v.params());
        assert!(!stats.aborted);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (p, v) = nets(ActionSpace::Discrete(3));
        let b = batch_for(&p, 1.0, 8, 2);
        let cfg = PpoConfig {
            policy_lr: 0.0,
            value_lr: 0.0,
            entropy_coef: 0.01,
            ..Default::default()
        };
        let mut po = Adam::new(p.num_params(), 0.0);
        let mut vo = Adam::new(v.params().len(), 0.0);
        let (p2, v2, _) = ppo_update(&p, &v, &mut po, &mut vo, &b, &cfg, &mut SimRng::seed_from_u64(0)).unwrap();
        assert_eq!(p2.params(), p.params());
        assert_eq!(v2.params(), v.params());
        assert_eq!(p2.num_params(), p.num_params());
    }

    #[test]
    fn positive_advantage_raises_log_prob() {
        for space in [ActionSpace::Continuous(2), ActionSpace::Discrete(3)] {
            let (p, v) = nets(space);
            let b = batch_for(&p, 1.0, 1, 3);
            let mut po = Adam::new(p.num_params(), 1e-3);
            let mut vo = Adam::new(v.params().len(), 1e-3);
            let cfg = PpoConfig {
                epochs: 1,
                minibatches: 1,
                ..Default::default()
            };
            let (p2, _, _) = ppo_update(&p, &v, &mut po, &mut vo, &b, &cfg, &mut SimRng::seed_from_u64(0)).unwrap();
            let before = p.forward(&b.obs[0]).unwrap().log_prob(&b.actions[0]);
            let after = p2.forward(&b.obs[0]).unwrap().log_prob(&b.actions[0]);
            assert!(after > before, "{space:?}: {before} -> {after}");
        }
    }

    #[test]
    fn nan_aborts_and_keeps_state() {
        let (p, v) = nets(ActionSpace::Continuous(2));
        let mut b = batch_for(&p, 1.0, 4, 5);
        b.advantages[2] = f64::NAN;
        let mut po = Adam::new(p.num_params(), 1e-3);
        let mut vo = Adam::new(v.params().len(), 1e-3);
        let po0 = po.clone();
        let (p2, v2, stats) =
            ppo_update(&p, &v, &mut po, &mut vo, &b, &PpoConfig::default(), &mut SimRng::seed_from_u64(0)).unwrap();
        assert!(stats.aborted);
        assert_eq!(p2, p);
        assert_eq!(v2, v);
        assert_eq!(po, po0);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        for space in [ActionSpace::Continuous(2), ActionSpace::Discrete(3)] {
            let (p, _) = nets(space);
            let mut b = batch_for(&p, 0.7, 5, 6);
            b.advantages = vec![0.7, -0.4, 1.2, -1.0, 0.3];
            let idx: Vec<usize> = (0..5).collect();
            // Old log-probs shifted so some ratios sit inside the trust region.
            let (g, _) = ppo_policy_gradient(&p, &b, &idx, 10.0, 0.05).unwrap();
            let objective = |q: &Policy| {
                let (_, s) = ppo_policy_gradient(q, &b, &idx, 10.0, 0.05).unwrap();
                -s.policy_loss + 0.05 * s.entropy
            };
            let h = 1e-6;
            for k in (0..p.num_params()).step_by(7) {
                let mut up = p.params().to_vec();
                up[k] += h;
                let mut dn = p.params().to_vec();
                dn[k] -= h;
                let fd = (objective(&p.with_params(up).unwrap()) - objective(&p.with_params(dn).unwrap())) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6, "{space:?} param {k}: fd {fd} vs {}", g[k]);
            }
        }
    }
}
