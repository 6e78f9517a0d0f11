//! Joint population update mixing the clipped surrogate with the log-det
//! diversity of the whole population.

use rand::seq::SliceRandom;

use crate::diversity::auxiliary_objective;
use crate::env::SimRng;
use crate::kernels::{KernelConfig, ProbedPolicy};
use crate::optim::clip_grad_norm;
use crate::policy::Policy;
use crate::rl::{ppo_policy_gradient, value_gradient, AgentState, PpoBatch, PpoConfig, PpoStats};
use crate::{Error, Result};

/// Settings of the diversity term.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityTerm<'a> {
    pub kernel: &'a KernelConfig,
    pub beta: f64,
    /// Per-member probe states, already in each member's input space.
    pub probes: &'a [Vec<Vec<f64>>],
    /// Normalizer scale held fixed for the whole update.
    pub scale: Option<f64>,
}

/// Ascent directions `(1 - lambda) * g_reward + lambda * g_diversity`, one
/// per member, before clipping.
pub fn dvd_gradients(
    policies: &[Policy],
    batches: &[PpoBatch],
    idx: &[&[usize]],
    div: &DiversityTerm<'_>,
    lambda: f64,
    cfg: &PpoConfig,
) -> Result<(Vec<Vec<f64>>, Vec<PpoStats>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let mut grads = Vec::with_capacity(policies.len());
    let mut stats = Vec::with_capacity(policies.len());
    for ((p, b), ix) in policies.iter().zip(batches).zip(idx) {
        let (g, s) = ppo_policy_gradient(p, b, ix, cfg.clip, cfg.entropy_coef)?;
        grads.push(g);
        stats.push(s);
    }
    if lambda > 0.0 {
        let members: Vec<ProbedPolicy<'_>> = policies
            .iter()
            .zip(div.probes)
            .map(|(p, s)| ProbedPolicy::new(p, s))
            .collect();
        let aux = auxiliary_objective(&members, div.kernel, div.beta, div.scale)?;
        for (g, d) in grads.iter_mut().zip(&aux.log_grads) {
            g.iter_mut().zip(d).for_each(|(x, y)| *x = (1.0 - lambda) * *x + lambda * y);
        }
    }
    Ok((grads, stats))
}

/// Epochs of joint minibatch steps over the population. Each member
/// shuffles with its own stream, so `lambda = 0` reproduces independent
/// per-member updates exactly. A non-finite value anywhere discards the
/// whole update.
pub fn dvd_update(
    agents: &mut [AgentState],
    batches: &[PpoBatch],
    div: &DiversityTerm<'_>,
    lambda: f64,
    cfg: &PpoConfig,
    rngs: &mut [SimRng],
) -> Result<Vec<PpoStats>> {
    let m = agents.len();
    if batches.len() != m || rngs.len() != m || div.probes.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: batches.len().min(rngs.len()).min(div.probes.len()),
        });
    }
    let saved: Vec<AgentState> = agents.to_vec();
    let mut orders: Vec<Vec<usize>> = batches.iter().map(|b| (0..b.len()).collect()).collect();
    let mut totals = vec![PpoStats::default(); m];
    let mut count = 0usize;
    let minibatches = cfg.minibatches.max(1);
    for _ in 0..cfg.epochs {
        for (o, r) in orders.iter_mut().zip(rngs.iter_mut()) {
            o.shuffle(r);
        }
        let chunks: Vec<Vec<&[usize]>> = orders
            .iter()
            .map(|o| o.chunks(o.len().div_ceil(minibatches).max(1)).collect())
            .collect();
        let steps = chunks.iter().map(|c| c.len()).min().unwrap_or(0);
        for k in 0..steps {
            let idx: Vec<&[usize]> = chunks.iter().map(|c| c[k]).collect();
            let policies: Vec<Policy> = agents.iter().map(|a| a.policy.clone()).collect();
            let (pgs, pstats) = dvd_gradients(&policies, batches, &idx, div, lambda, cfg)?;
            let mut vgs = Vec::with_capacity(m);
            let mut ok = true;
            for ((a, b), ix) in agents.iter().zip(batches).zip(&idx) {
                let (vg, vloss) = value_gradient(&a.value, b, ix)?;
                ok &= vloss.is_finite() && vg.iter().all(|x| x.is_finite());
                vgs.push((vg, vloss));
            }
            ok &= pgs.iter().flatten().all(|x| x.is_finite()) && pstats.iter().all(|s| s.policy_loss.is_finite());
            if !ok {
                agents.clone_from_slice(&saved);
                return Ok(vec![
                    PpoStats {
                        aborted: true,
                        ..Default::default()
                    };
                    m
                ]);
            }
            for (i, ((mut pg, (mut vg, vloss)), s)) in pgs.into_iter().zip(vgs).zip(pstats).enumerate() {
                let a = &mut agents[i];
                clip_grad_norm(&mut pg, cfg.max_grad_norm);
                clip_grad_norm(&mut vg, cfg.max_grad_norm);
                let mut pp = a.policy.params().to_vec();
                a.policy_opt.ascend(&mut pp, &pg);
                a.policy = a.policy.with_params(pp)?;
                let mut vp = a.value.params().to_vec();
                a.value_opt.descend(&mut vp, &vg);
                a.value = a.value.with_params(vp)?;
                let t = &mut totals[i];
                t.policy_loss += s.policy_loss;
                t.value_loss += vloss;
                t.entropy += s.entropy;
                t.approx_kl += s.approx_kl;
                t.clip_fraction += s.clip_fraction;
            }
            count += 1;
        }
    }
    if count > 0 {
        let c = count as f64;
        for t in &mut totals {
            t.policy_loss /= c;
            t.value_loss /= c;
            t.entropy /= c;
            t.approx_kl /= c;
            t.clip_fraction /= c;
        }
    }
    Ok(totals)
}
