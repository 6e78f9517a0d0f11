//! The auxiliary-phase objective: the determinant of the surrogate
//! population kernel, and gradient ascent on it.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, KernelMatrix, PopulationProbe, ProbedPolicy};
use crate::linalg::factor_with_fallback;
use crate::optim::{clip_grad_norm, Adam};
use crate::policy::Policy;

/// Value and gradients of `det(beta K + (1 - beta) I)`.
#[derive(Debug, Clone)]
pub struct AuxiliaryObjective {
    pub value: f64,
    pub log_value: f64,
    /// Gradient of the determinant, one vector per policy.
    pub grads: Vec<Vec<f64>>,
    /// Gradient of the log-determinant, one vector per policy.
    pub log_grads: Vec<Vec<f64>>,
    pub kernel: KernelMatrix,
    /// Surrogate weight actually used (lower than requested if the
    /// factorization needed the fallback).
    pub beta: f64,
    /// Normalization constant the kernel was computed with.
    pub scale: f64,
}

/// Evaluates the auxiliary objective. `scale = None` computes the distance
/// normalizer from the population; either way it is held constant for the
/// gradient.
pub fn auxiliary_objective(
    members: &[ProbedPolicy<'_>],
    cfg: &KernelConfig,
    beta: f64,
    scale: Option<f64>,
) -> Result<AuxiliaryObjective> {
    let probe = PopulationProbe::new(members, cfg, scale)?;
    let kernel = probe.kernel(cfg, (0..members.len()).collect())?;
    let (surrogate, factor) = factor_with_fallback(kernel.entries(), beta)?;
    let value = factor.det();
    let log_value = factor.log_det();
    // d log det(K~) / dK_ij for the symmetric pair (i, j), i < j.
    let inv = factor.inverse();
    let m = members.len();
    let mut adjoint = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            adjoint[(i, j)] = 2.0 * surrogate.beta() * inv[(i, j)];
        }
    }
    let log_grads = probe.backprop(members, cfg, &adjoint);
    let grads = log_grads
        .iter()
        .map(|g| g.iter().map(|v| v * value).collect())
        .collect();
    Ok(AuxiliaryObjective {
        value,
        log_value,
        grads,
        log_grads,
        kernel,
        beta: surrogate.beta(),
        scale: probe.scale(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub iterations: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub beta: f64,
    /// Standard deviation of the parameter noise applied when two members
    /// are exact duplicates (their kernel gradient is identically zero).
    pub duplicate_jitter: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            lr: 1e-3,
            grad_clip: 1.0,
            beta: 0.99,
            duplicate_jitter: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentOutcome {
    pub policies: Vec<Policy>,
    /// `det(K~)` before the first step and after every step.
    pub det_trace: Vec<f64>,
    pub scale: f64,
    pub jittered: bool,
}

fn has_duplicates(kernel: &KernelMatrix) -> bool {
    let k = kernel.entries();
    let m = k.nrows();
    (0..m).any(|i| (i + 1..m).any(|j| k[(i, j)] >= 1.0 - 1e-12))
}

/// Gradient ascent on `log det(K~)` over a population.
///
/// `states[i]` are the probe states as policy `i` observes them. The
/// distance normalizer is fixed from the population at the first step so
/// every step ascends the same function.
pub fn diversify<R: Rng + ?Sized>(
    policies: Vec<Policy>,
    states: &[Vec<Vec<f64>>],
    kernel_cfg: &KernelConfig,
    cfg: &AscentConfig,
    rng: &mut R,
) -> Result<AscentOutcome> {
    if policies.len() != states.len() {
        return Err(Error::DimensionMismatch {
            expected: policies.len(),
            got: states.len(),
        });
    }
    let mut policies = policies;
    fn members<'a>(ps: &'a [Policy], states: &'a [Vec<Vec<f64>>]) -> Vec<ProbedPolicy<'a>> {
        ps.iter().zip(states).map(|(p, s)| ProbedPolicy::new(p, s)).collect()
    }

    let mut jittered = false;
    let initial = auxiliary_objective(&members(&policies, states), kernel_cfg, cfg.beta, None)?;
    if cfg.iterations > 0 && cfg.duplicate_jitter > 0.0 && has_duplicates(&initial.kernel) {
        let noise = Normal::new(0.0, cfg.duplicate_jitter)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        policies = policies
            .iter()
            .map(|p| p.with_params(p.params().iter().map(|v| v + noise.sample(rng)).collect()))
            .collect::<Result<_>>()?;
        jittered = true;
    }

    let mut current = if jittered {
        auxiliary_objective(&members(&policies, states), kernel_cfg, cfg.beta, None)?
    } else {
        initial
    };
    let scale = current.scale;
    let mut det_trace = vec![current.value];
    let mut optimizers: Vec<Adam> = policies.iter().map(|p| Adam::new(p.num_params(), cfg.lr)).collect();

    for _ in 0..cfg.iterations {
        let mut next = Vec::with_capacity(policies.len());
        for ((p, opt), grad) in policies.iter().zip(&mut optimizers).zip(&current.log_grads) {
            let mut g = grad.clone();
            clip_grad_norm(&mut g, cfg.grad_clip);
            let mut params = p.params().to_vec();
            opt.ascend(&mut params, &g);
            next.push(p.with_params(params)?);
        }
        policies = next;
        current = auxiliary_objective(&members(&policies, states), kernel_cfg, cfg.beta, Some(scale))?;
        det_trace.push(current.value);
    }

    Ok(AscentOutcome {
        policies,
        det_trace,
        scale,
        jittered,
    })
}
