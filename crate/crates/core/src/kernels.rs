//! Pairwise similarity between stochastic policies.
//!
//! The similarity of two policies is the average, over a batch of probe
//! states, of a bounded function of the distance between their action
//! distributions at each state:
//!
//! * discrete actions: `1 - JSD(p, q) / ln 2`;
//! * continuous actions: `exp(-W2^2 / (2 c))` where `W2^2` is the squared
//!   2-Wasserstein distance between the diagonal Gaussians and `c` is a
//!   population-level normalization constant (the standard deviation of the
//!   off-diagonal squared distances by default), so no length-scale has to
//!   be tuned.
//!
//! Every entry is differentiable in both policies' parameters; the gradient
//! routines below push an adjoint `dL/dK` back into parameter space.

use std::f64::consts::LN_2;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{ActionDist, DiagGaussian, DiscreteDist};
use crate::error::{Error, Result};
use crate::linalg::check_symmetric;
use crate::nn::ForwardCache;
use crate::policy::{softmax_backward, DistGrad, Policy};

/// Default probe-state sample size.
pub const DEFAULT_PROBE_SIZE: usize = 256;

/// Below this the normalization statistic is treated as zero.
pub const NORMALIZATION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Jsd,
    W2,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Jsd => "jsd",
            Metric::W2 => "w2",
        }
    }
}

/// Statistic of the off-diagonal squared distances used to rescale them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationStat {
    #[default]
    Std,
    Variance,
    Mean,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub metric: Metric,
    /// Drop the covariance term of W2 (policies are evaluated by their mean
    /// action only).
    pub deterministic: bool,
    pub normalization: NormalizationStat,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            metric: Metric::W2,
            deterministic: false,
            normalization: NormalizationStat::Std,
        }
    }
}

/// Jensen–Shannon divergence in nats, using `0 log 0 = 0`.
pub fn jsd(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(jsd_raw(p.probs(), q.probs()))
}

fn jsd_raw(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).ln();
        }
    }
    total.clamp(0.0, LN_2)
}

/// `1 - d / ln 2`, clamped to `[0, 1]`. The flag reports whether clamping
/// was needed.
pub fn f_js(d: f64) -> (f64, bool) {
    let v = 1.0 - d / LN_2;
    let clamped = v.clamp(0.0, 1.0);
    (clamped, clamped != v)
}

/// Squared 2-Wasserstein distance between uncorrelated Gaussians:
/// `|m1 - m2|^2 + |s1 - s2|^2` with `s` the standard deviations.
pub fn w2_squared_diag(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(mean_term(a, b) + std_term(a, b))
}

fn mean_term(a: &DiagGaussian, b: &DiagGaussian) -> f64 {
    a.mean().iter().zip(b.mean()).map(|(x, y)| (x - y).powi(2)).sum()
}

fn std_term(a: &DiagGaussian, b: &DiagGaussian) -> f64 {
    a.log_std()
        .iter()
        .zip(b.log_std())
        .map(|(x, y)| (x.exp() - y.exp()).powi(2))
        .sum()
}

/// Symmetric PSD square root through an eigendecomposition, negative
/// eigenvalues clamped to zero.
pub fn sqrt_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared 2-Wasserstein distance between full-covariance Gaussians.
pub fn w2_squared_full(m1: &[f64], s1: &DMatrix<f64>, m2: &[f64], s2: &DMatrix<f64>) -> Result<f64> {
    let n = m1.len();
    if m2.len() != n || s1.nrows() != n || s2.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: m2.len().max(s1.nrows()).max(s2.nrows()),
        });
    }
    check_symmetric(s1)?;
    check_symmetric(s2)?;
    let mean: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    let root1 = sqrt_psd(s1);
    let cross = sqrt_psd(&(&root1 * s2 * &root1));
    let value = mean + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// Observations at which policies are compared.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBatch {
    pub states: Vec<Vec<f64>>,
    pub source: String,
}

impl StateBatch {
    pub fn new(states: Vec<Vec<f64>>, source: impl Into<String>) -> Result<Self> {
        let dim = states
            .first()
            .map(|s| s.len())
            .ok_or_else(|| Error::InvalidArgument("empty state batch".into()))?;
        if let Some(bad) = states.iter().find(|s| s.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(Self {
            states,
            source: source.into(),
        })
    }

    /// Uniform sample without replacement from the union of `pools`.
    pub fn sample_from<R: Rng + ?Sized>(pools: &[&[Vec<f64>]], size: usize, rng: &mut R) -> Result<Self> {
        let total: usize = pools.iter().map(|p| p.len()).sum();
        if total == 0 {
            return Err(Error::InvalidArgument("no states to sample from".into()));
        }
        let take = size.min(total);
        let mut picks = index::sample(rng, total, take).into_vec();
        picks.sort_unstable();
        let mut states = Vec::with_capacity(take);
        let (mut pool, mut base) = (0, 0);
        for i in picks {
            while i >= base + pools[pool].len() {
                base += pools[pool].len();
                pool += 1;
            }
            states.push(pools[pool][i - base].clone());
        }
        Self::new(states, format!("union of {} buffers", pools.len()))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// Applies `f` to every state, e.g. a policy's observation normalizer.
    pub fn map(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self {
            states: self.states.iter().map(|s| f(s)).collect(),
            source: self.source.clone(),
        }
    }
}

/// A policy paired with the probe states as that policy observes them
/// (normalized by its own observation statistics). All members of a
/// population must be probed on the same number of states.
#[derive(Debug, Clone, Copy)]
pub struct ProbedPolicy<'a> {
    pub policy: &'a Policy,
    pub states: &'a [Vec<f64>],
}

impl<'a> ProbedPolicy<'a> {
    pub fn new(policy: &'a Policy, states: &'a [Vec<f64>]) -> Self {
        Self { policy, states }
    }
}

/// M x M matrix of pairwise similarities with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
    policy_ids: Vec<usize>,
}

impl KernelMatrix {
    /// Validates symmetry, unit diagonal and the `[0, 1]` range.
    pub fn new(entries: DMatrix<f64>, policy_ids: Vec<usize>) -> Result<Self> {
        check_symmetric(&entries)?;
        let n = entries.nrows();
        if policy_ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: policy_ids.len(),
            });
        }
        for i in 0..n {
            if entries[(i, i)] != 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "kernel diagonal entry {i} is {}",
                    entries[(i, i)]
                )));
            }
        }
        if entries.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("kernel entry outside [0, 1]".into()));
        }
        Ok(Self { entries, policy_ids })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn policy_ids(&self) -> &[usize] {
        &self.policy_ids
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.entries
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Divides the off-diagonal squared distances by the configured statistic
/// of those distances. Returns the matrix and the divisor actually used
/// (1.0 when the statistic is below [`NORMALIZATION_FLOOR`]).
pub fn variance_normalize_with(squared: &DMatrix<f64>, stat: NormalizationStat) -> (DMatrix<f64>, f64) {
    let scale = normalization_scale(squared, stat);
    let mut out = squared / scale;
    for i in 0..out.nrows() {
        out[(i, i)] = squared[(i, i)];
    }
    (out, scale)
}

/// [`variance_normalize_with`] using the standard deviation.
pub fn variance_normalize(squared: &DMatrix<f64>) -> DMatrix<f64> {
    variance_normalize_with(squared, NormalizationStat::Std).0
}

/// The divisor [`variance_normalize_with`] would apply.
pub fn normalization_scale(squared: &DMatrix<f64>, stat: NormalizationStat) -> f64 {
    let n = squared.nrows();
    let upper: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| squared[(i, j)])
        .collect();
    if upper.is_empty() {
        return 1.0;
    }
    let mean = upper.iter().sum::<f64>() / upper.len() as f64;
    let var = upper.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / upper.len() as f64;
    let value = match stat {
        NormalizationStat::Std => var.sqrt(),
        NormalizationStat::Variance => var,
        NormalizationStat::Mean => mean,
        NormalizationStat::None => 1.0,
    };
    if value < NORMALIZATION_FLOOR {
        1.0
    } else {
        value
    }
}

/// Forward pass of one policy over all probe states.
struct Probe {
    dists: Vec<ActionDist>,
    caches: Vec<ForwardCache>,
}

fn probe(member: &ProbedPolicy<'_>, metric: Metric) -> Result<Probe> {
    let space = member.policy.action_space();
    match (metric, space) {
        (Metric::Jsd, crate::policy::ActionSpace::Continuous(_)) => {
            return Err(Error::MetricMismatch {
                metric: "jsd",
                space: "continuous",
            })
        }
        (Metric::W2, crate::policy::ActionSpace::Discrete(_)) => {
            return Err(Error::MetricMismatch {
                metric: "w2",
                space: "discrete",
            })
        }
        _ => {}
    }
    if member.states.is_empty() {
        return Err(Error::InvalidArgument("empty probe batch".into()));
    }
    let mut dists = Vec::with_capacity(member.states.len());
    let mut caches = Vec::with_capacity(member.states.len());
    for s in member.states {
        let (d, c) = member.policy.forward_cached(s)?;
        dists.push(d);
        caches.push(c);
    }
    Ok(Probe { dists, caches })
}

/// Per-state squared distance between two Gaussians for the kernel.
fn pair_squared_distance(a: &DiagGaussian, b: &DiagGaussian, deterministic: bool) -> f64 {
    if deterministic {
        mean_term(a, b)
    } else {
        mean_term(a, b) + std_term(a, b)
    }
}

/// Per-state similarity and its derivative with respect to the per-state
/// distance statistic, for one pair.
fn state_similarity(a: &ActionDist, b: &ActionDist, cfg: &KernelConfig, scale: f64) -> f64 {
    match (a, b) {
        (ActionDist::Gaussian(x), ActionDist::Gaussian(y)) => {
            (-pair_squared_distance(x, y, cfg.deterministic) / (2.0 * scale)).exp()
        }
        (ActionDist::Discrete(x), ActionDist::Discrete(y)) => f_js(jsd_raw(x.probs(), y.probs())).0,
        _ => unreachable!("probe() rejects mixed action spaces"),
    }
}

fn check_same_batch_size(members: &[ProbedPolicy<'_>]) -> Result<usize> {
    let n = members[0].states.len();
    for m in members {
        if m.states.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: m.states.len(),
            });
        }
    }
    Ok(n)
}

/// Similarity of two policies averaged over the probe states, without
/// population normalization. Identical parameters give exactly 1.
pub fn dse_kernel_entry(a: &ProbedPolicy<'_>, b: &ProbedPolicy<'_>, cfg: &KernelConfig) -> Result<f64> {
    dse_kernel_entry_scaled(a, b, cfg, 1.0)
}

/// [`dse_kernel_entry`] with squared distances divided by `scale`.
pub fn dse_kernel_entry_scaled(a: &ProbedPolicy<'_>, b: &ProbedPolicy<'_>, cfg: &KernelConfig, scale: f64) -> Result<f64> {
    let n = check_same_batch_size(&[*a, *b])?;
    if a.policy.params() == b.policy.params() && a.states == b.states {
        // Still validate the metric/action-space combination.
        probe(a, cfg.metric)?;
        return Ok(1.0);
    }
    let pa = probe(a, cfg.metric)?;
    let pb = probe(b, cfg.metric)?;
    let total: f64 = pa
        .dists
        .iter()
        .zip(&pb.dists)
        .map(|(x, y)| state_similarity(x, y, cfg, scale))
        .sum();
    Ok((total / n as f64).clamp(0.0, 1.0))
}

/// Probes for a population plus the normalization constant in use.
pub struct PopulationProbe {
    probes: Vec<Probe>,
    scale: f64,
    states: usize,
}

impl PopulationProbe {
    /// Runs every member forward on its probe states. With `scale = None`
    /// the normalization constant is computed from the population itself.
    pub fn new(members: &[ProbedPolicy<'_>], cfg: &KernelConfig, scale: Option<f64>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidArgument("kernel needs at least two policies".into()));
        }
        let states = check_same_batch_size(members)?;
        let probes = members.iter().map(|m| probe(m, cfg.metric)).collect::<Result<Vec<_>>>()?;
        let mut out = Self {
            probes,
            scale: 1.0,
            states,
        };
        out.scale = match (scale, cfg.metric) {
            (Some(s), _) => s,
            (None, Metric::W2) => normalization_scale(&out.mean_squared_distances(cfg), cfg.normalization),
            (None, Metric::Jsd) => 1.0,
        };
        Ok(out)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    /// State-averaged squared W2 distances (JSD values for discrete spaces).
    pub fn mean_squared_distances(&self, cfg: &KernelConfig) -> DMatrix<f64> {
        let m = self.probes.len();
        let mut out = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i + 1..m {
                let total: f64 = self.probes[i]
                    .dists
                    .iter()
                    .zip(&self.probes[j].dists)
                    .map(|(a, b)| match (a, b) {
                        (ActionDist::Gaussian(x), ActionDist::Gaussian(y)) => {
                            pair_squared_distance(x, y, cfg.deterministic)
                        }
                        (ActionDist::Discrete(x), ActionDist::Discrete(y)) => jsd_raw(x.probs(), y.probs()),
                        _ => unreachable!(),
                    })
                    .sum();
                let v = total / self.states as f64;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    pub fn kernel(&self, cfg: &KernelConfig, ids: Vec<usize>) -> Result<KernelMatrix> {
        let m = self.probes.len();
        let mut k = DMatrix::identity(m, m);
        for i in 0..m {
            for j in i + 1..m {
                let total: f64 = self.probes[i]
                    .dists
                    .iter()
                    .zip(&self.probes[j].dists)
                    .map(|(a, b)| state_similarity(a, b, cfg, self.scale))
                    .sum();
                let v = (total / self.states as f64).clamp(0.0, 1.0);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        KernelMatrix::new(k, ids)
    }

    /// Pulls a symmetric adjoint `G = dL/dK` back to per-policy parameter
    /// gradients. Only the strict upper triangle of `G` is read; each
    /// entry must already account for both `K_ij` and `K_ji`.
    pub fn backprop(&self, members: &[ProbedPolicy<'_>], cfg: &KernelConfig, adjoint: &DMatrix<f64>) -> Vec<Vec<f64>> {
        let m = self.probes.len();
        let mut dist_grads: Vec<Vec<DistGrad>> = members
            .iter()
            .map(|mem| vec![DistGrad::zeros(mem.policy.action_space()); self.states])
            .collect();
        let inv_n = 1.0 / self.states as f64;
        for i in 0..m {
            for j in i + 1..m {
                let g = adjoint[(i, j)];
                if g == 0.0 {
                    continue;
                }
                for s in 0..self.states {
                    let w = g * inv_n;
                    match (&self.probes[i].dists[s], &self.probes[j].dists[s]) {
                        (ActionDist::Gaussian(a), ActionDist::Gaussian(b)) => {
                            let d2 = pair_squared_distance(a, b, cfg.deterministic);
                            let k = (-d2 / (2.0 * self.scale)).exp();
                            // dL/d(d2)
                            let coef = -w * k / (2.0 * self.scale);
                            let (sa, sb) = (a.std(), b.std());
                            let (left, right) = dist_grads.split_at_mut(j);
                            let (gi, gj) = (&mut left[i][s], &mut right[0][s]);
                            if let (
                                DistGrad::Gaussian { d_mean: mi, d_log_std: li },
                                DistGrad::Gaussian { d_mean: mj, d_log_std: lj },
                            ) = (gi, gj)
                            {
                                for k in 0..a.dim() {
                                    let diff = a.mean()[k] - b.mean()[k];
                                    mi[k] += coef * 2.0 * diff;
                                    mj[k] -= coef * 2.0 * diff;
                                    if !cfg.deterministic {
                                        let sd = sa[k] - sb[k];
                                        li[k] += coef * 2.0 * sd * sa[k];
                                        lj[k] -= coef * 2.0 * sd * sb[k];
                                    }
                                }
                            }
                        }
                        (ActionDist::Discrete(a), ActionDist::Discrete(b)) => {
                            let d = jsd_raw(a.probs(), b.probs());
                            let raw = 1.0 - d / LN_2;
                            if !(0.0..=1.0).contains(&raw) {
                                continue;
                            }
                            let coef = -w / LN_2;
                            let (pa, pb) = (a.probs(), b.probs());
                            let grad_p = |p: &[f64], q: &[f64]| -> Vec<f64> {
                                p.iter()
                                    .zip(q)
                                    .map(|(&x, &y)| {
                                        if x > 0.0 {
                                            coef * 0.5 * (2.0 * x / (x + y)).ln()
                                        } else {
                                            0.0
                                        }
                                    })
                                    .collect()
                            };
                            let dla = softmax_backward(pa, &grad_p(pa, pb));
                            let dlb = softmax_backward(pb, &grad_p(pb, pa));
                            let (left, right) = dist_grads.split_at_mut(j);
                            if let (DistGrad::Discrete { d_logits: gi }, DistGrad::Discrete { d_logits: gj }) =
                                (&mut left[i][s], &mut right[0][s])
                            {
                                gi.iter_mut().zip(&dla).for_each(|(g, v)| *g += v);
                                gj.iter_mut().zip(&dlb).for_each(|(g, v)| *g += v);
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            }
        }
        members
            .iter()
            .zip(&self.probes)
            .zip(&dist_grads)
            .map(|((mem, pr), grads)| {
                let mut out = vec![0.0; mem.policy.num_params()];
                for (cache, up) in pr.caches.iter().zip(grads) {
                    mem.policy.backward_one(cache, up, &mut out);
                }
                out
            })
            .collect()
    }
}

/// Population kernel with the normalization constant computed from the
/// population.
pub fn build_kernel_matrix(members: &[ProbedPolicy<'_>], cfg: &KernelConfig) -> Result<KernelMatrix> {
    let probe = PopulationProbe::new(members, cfg, None)?;
    probe.kernel(cfg, (0..members.len()).collect())
}

/// Value and parameter gradients of a single entry `K(a, b)` at a fixed
/// normalization constant.
pub fn dse_entry_gradient(
    a: &ProbedPolicy<'_>,
    b: &ProbedPolicy<'_>,
    cfg: &KernelConfig,
    scale: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let members = [*a, *b];
    let probe = PopulationProbe::new(&members, cfg, Some(scale))?;
    let k = probe.kernel(cfg, vec![0, 1])?;
    let mut adjoint = DMatrix::zeros(2, 2);
    adjoint[(0, 1)] = 1.0;
    let mut grads = probe.backprop(&members, cfg, &adjoint);
    let gb = grads.pop().expect("two members");
    let ga = grads.pop().expect("two members");
    Ok((k.entries()[(0, 1)], ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ActionSpace, PolicyConfig};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dd(p: &[f64]) -> DiscreteDist {
        DiscreteDist::new(p.to_vec()).unwrap()
    }

    fn g(mean: &[f64], std: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), std.iter().map(|s| s.ln()).collect()).unwrap()
    }

    #[test]
    fn jsd_identical_is_zero() {
        assert_eq!(jsd(&dd(&[0.5, 0.5]), &dd(&[0.5, 0.5])).unwrap(), 0.0);
    }

    #[test]
    fn jsd_disjoint_is_ln2() {
        assert_abs_diff_eq!(jsd(&dd(&[1.0, 0.0]), &dd(&[0.0, 1.0])).unwrap(), LN_2, epsilon = 1e-15);
    }

    #[test]
    fn jsd_hand_value() {
        // m = (0.5, 0.5). KL(p || m) = 0.9 ln 1.8 + 0.1 ln 0.2, and by
        // symmetry KL(q || m) is the same, so JSD = KL(p || m).
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        let v = jsd(&dd(&[0.9, 0.1]), &dd(&[0.1, 0.9])).unwrap();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.368_064_207_168_497_1, epsilon = 1e-12);
    }

    #[test]
    fn jsd_dimension_mismatch() {
        assert!(jsd(&dd(&[1.0]), &dd(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn f_js_values() {
        assert_eq!(f_js(0.0), (1.0, false));
        assert_abs_diff_eq!(f_js(LN_2).0, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f_js(LN_2 / 2.0).0, 0.5, epsilon = 1e-15);
        assert_eq!(f_js(1.0), (0.0, true));
        assert_eq!(f_js(-0.1), (1.0, true));
    }

    #[test]
    fn w2_diag_examples() {
        assert_eq!(w2_squared_diag(&g(&[0.3], &[1.2]), &g(&[0.3], &[1.2])).unwrap(), 0.0);
        assert_abs_diff_eq!(w2_squared_diag(&g(&[0.0], &[1.0]), &g(&[2.0], &[1.0])).unwrap(), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            w2_squared_diag(&g(&[0.0, 0.0], &[1.0, 1.0]), &g(&[0.0, 0.0], &[2.0, 1.0])).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn w2_full_identity_and_diagonal_case() {
        let i = DMatrix::identity(2, 2);
        assert_abs_diff_eq!(w2_squared_full(&[1.0, 2.0], &i, &[1.0, 2.0], &i).unwrap(), 0.0, epsilon = 1e-12);
        let s1 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 4.0]));
        let s2 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![9.0, 0.25]));
        let full = w2_squared_full(&[0.0, 1.0], &s1, &[1.0, -1.0], &s2).unwrap();
        let diag = w2_squared_diag(&g(&[0.0, 1.0], &[1.0, 2.0]), &g(&[1.0, -1.0], &[3.0, 0.5])).unwrap();
        assert_abs_diff_eq!(full, diag, epsilon = 1e-9);
    }

    #[test]
    fn w2_full_rejects_asymmetric() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.1, 1.0]);
        let i = DMatrix::identity(2, 2);
        assert!(matches!(
            w2_squared_full(&[0.0, 0.0], &bad, &[0.0, 0.0], &i),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn variance_normalize_examples() {
        let same = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 2.0, 2.0, 0.0, 2.0, 2.0, 2.0, 0.0]);
        assert_eq!(variance_normalize(&same), same);
        let zero = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(variance_normalize(&zero), zero);

        let m = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 4.0, 1.0, 0.0, 9.0, 4.0, 9.0, 0.0]);
        // mean 14/3; squared deviations (11/3)^2, (2/3)^2, (13/3)^2
        let std = ((121.0 + 4.0 + 169.0) / 9.0 / 3.0f64).sqrt();
        let n = variance_normalize(&m);
        assert_abs_diff_eq!(n[(0, 1)], 1.0 / std, epsilon = 1e-15);
        assert_abs_diff_eq!(n[(0, 2)], 4.0 / std, epsilon = 1e-15);
        assert_abs_diff_eq!(n[(2, 1)], 9.0 / std, epsilon = 1e-15);
        assert_eq!(n[(1, 1)], 0.0);
    }

    /// Policy with no hidden layers whose mean is exactly its bias.
    fn constant_policy(obs_dim: usize, mean: &[f64], log_std: &[f64]) -> Policy {
        let topo = crate::nn::Topology::new(obs_dim, &[], mean.len(), crate::nn::Activation::Tanh);
        let mut params = vec![0.0; topo.param_count()];
        let bias_at = obs_dim * mean.len();
        params[bias_at..bias_at + mean.len()].copy_from_slice(mean);
        params.extend_from_slice(log_std);
        Policy::from_parts(topo, ActionSpace::Continuous(mean.len()), params).unwrap()
    }

    /// One input, one output, mean = w * s + b.
    fn linear_policy(w: f64, b: f64) -> Policy {
        let topo = crate::nn::Topology::new(1, &[], 1, crate::nn::Activation::Tanh);
        Policy::from_parts(topo, ActionSpace::Continuous(1), vec![w, b, 0.0]).unwrap()
    }

    #[test]
    fn identical_policies_have_unit_entry() {
        let p = constant_policy(2, &[0.3, -0.1], &[0.0, 0.0]);
        let states = vec![vec![0.0, 1.0], vec![2.0, 3.0]];
        let a = ProbedPolicy::new(&p, &states);
        assert_eq!(dse_kernel_entry(&a, &a, &KernelConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn distant_policies_have_vanishing_entry() {
        let states = vec![vec![0.0]];
        let p = constant_policy(1, &[0.0], &[0.0]);
        let q = constant_policy(1, &[1e3], &[0.0]);
        let v = dse_kernel_entry(&ProbedPolicy::new(&p, &states), &ProbedPolicy::new(&q, &states), &KernelConfig::default()).unwrap();
        assert!(v < 1e-100);
    }

    #[test]
    fn three_probe_states_hand_average() {
        // Means at s in {0, 1, 2}: p -> (0, 1, 2), q -> (0, 0, 0); equal std.
        // d^2 = (0, 1, 4); entry = (1 + e^-0.5 + e^-2) / 3.
        let p = linear_policy(1.0, 0.0);
        let q = linear_policy(0.0, 0.0);
        let states = vec![vec![0.0], vec![1.0], vec![2.0]];
        let v = dse_kernel_entry(&ProbedPolicy::new(&p, &states), &ProbedPolicy::new(&q, &states), &KernelConfig::default()).unwrap();
        assert_abs_diff_eq!(v, (1.0 + (-0.5f64).exp() + (-2.0f64).exp()) / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn jsd_metric_rejects_continuous_policies() {
        let p = constant_policy(1, &[0.0], &[0.0]);
        let states = vec![vec![0.0]];
        let cfg = KernelConfig {
            metric: Metric::Jsd,
            ..Default::default()
        };
        let a = ProbedPolicy::new(&p, &states);
        assert!(matches!(dse_kernel_entry(&a, &a, &cfg), Err(Error::MetricMismatch { .. })));
    }

    #[test]
    fn deterministic_flag_drops_covariance_term() {
        let p = constant_policy(1, &[0.0], &[0.0]);
        let q = constant_policy(1, &[0.0], &[1.0]);
        let states = vec![vec![0.0]];
        let cfg = KernelConfig {
            deterministic: true,
            ..Default::default()
        };
        let (a, b) = (ProbedPolicy::new(&p, &states), ProbedPolicy::new(&q, &states));
        assert_eq!(dse_kernel_entry(&a, &b, &cfg).unwrap(), 1.0);
        assert!(dse_kernel_entry(&a, &b, &KernelConfig::default()).unwrap() < 1.0);
    }

    #[test]
    fn kernel_matrix_two_identical() {
        let p = constant_policy(1, &[0.2], &[0.0]);
        let states = vec![vec![0.0], vec![1.0]];
        let members = [ProbedPolicy::new(&p, &states), ProbedPolicy::new(&p, &states)];
        let k = build_kernel_matrix(&members, &KernelConfig::default()).unwrap();
        assert_eq!(k.entries(), &DMatrix::from_element(2, 2, 1.0));
        assert_abs_diff_eq!(k.entries().determinant(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kernel_matrix_unit_normalized_distance() {
        // M = 2 has a single off-diagonal distance, so the normalizer is
        // inactive and d^2 = 1 maps to exp(-1/2).
        let p = constant_policy(1, &[0.0], &[0.0]);
        let q = constant_policy(1, &[1.0], &[0.0]);
        let states = vec![vec![0.0]];
        let members = [ProbedPolicy::new(&p, &states), ProbedPolicy::new(&q, &states)];
        let k = build_kernel_matrix(&members, &KernelConfig::default()).unwrap();
        assert_abs_diff_eq!(k.entries()[(0, 1)], (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(k.entries()[(0, 1)], 0.6065, epsilon = 1e-4);
    }

    #[test]
    fn kernel_matrix_with_duplicated_pair() {
        let p = constant_policy(1, &[0.0], &[0.0]);
        let q = constant_policy(1, &[1.5], &[0.0]);
        let states = vec![vec![0.0]];
        let members = [
            ProbedPolicy::new(&p, &states),
            ProbedPolicy::new(&p, &states),
            ProbedPolicy::new(&q, &states),
        ];
        let k = build_kernel_matrix(&members, &KernelConfig::default()).unwrap();
        assert_eq!(k.entries()[(0, 1)], 1.0);
        assert!(k.entries()[(0, 2)] < 1.0);
        assert!(k.min_eigenvalue() >= -1e-8);
    }

    #[test]
    fn kernel_matrix_needs_two_policies() {
        let p = constant_policy(1, &[0.0], &[0.0]);
        let states = vec![vec![0.0]];
        assert!(build_kernel_matrix(&[ProbedPolicy::new(&p, &states)], &KernelConfig::default()).is_err());
    }

    #[test]
    fn sample_from_union_without_replacement() {
        let a: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let b: Vec<Vec<f64>> = (10..15).map(|i| vec![i as f64]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = StateBatch::sample_from(&[&a, &b], 12, &mut rng).unwrap();
        assert_eq!(batch.len(), 12);
        let mut seen: Vec<i64> = batch.states.iter().map(|s| s[0] as i64).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 12);
        let all = StateBatch::sample_from(&[&a, &b], 256, &mut rng).unwrap();
        assert_eq!(all.len(), 15);
    }

    fn random_policy(rng: &mut ChaCha8Rng, space: ActionSpace) -> Policy {
        let cfg = PolicyConfig {
            hidden: vec![5],
            output_gain: 1.0,
            log_std_init: rng.random_range(-0.5..0.5),
            ..Default::default()
        };
        Policy::new(3, space, &cfg, rng)
    }

    fn check_entry_gradient(cfg: &KernelConfig, space: ActionSpace, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_policy(&mut rng, space);
        let q = random_policy(&mut rng, space);
        let states: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let scale = 0.7;
        let (_, ga, gb) = dse_entry_gradient(&ProbedPolicy::new(&p, &states), &ProbedPolicy::new(&q, &states), cfg, scale).unwrap();
        let h = 1e-5;
        for (which, grad) in [(0, &ga), (1, &gb)] {
            let base = if which == 0 { &p } else { &q };
            for k in 0..base.num_params() {
                let eval = |delta: f64| {
                    let mut params = base.params().to_vec();
                    params[k] += delta;
                    let moved = base.with_params(params).unwrap();
                    let (x, y) = if which == 0 { (&moved, &q) } else { (&p, &moved) };
                    dse_kernel_entry_scaled(&ProbedPolicy::new(x, &states), &ProbedPolicy::new(y, &states), cfg, scale).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                if fd.abs() < 1e-8 && grad[k].abs() < 1e-8 {
                    continue;
                }
                assert_relative_eq!(fd, grad[k], max_relative = 1e-4, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn w2_entry_gradient_matches_finite_differences() {
        for seed in 0..5 {
            check_entry_gradient(&KernelConfig::default(), ActionSpace::Continuous(2), seed);
            check_entry_gradient(
                &KernelConfig {
                    deterministic: true,
                    ..Default::default()
                },
                ActionSpace::Continuous(2),
                seed + 50,
            );
        }
    }

    #[test]
    fn jsd_entry_gradient_matches_finite_differences() {
        let cfg = KernelConfig {
            metric: Metric::Jsd,
            ..Default::default()
        };
        for seed in 0..5 {
            check_entry_gradient(&cfg, ActionSpace::Discrete(3), 100 + seed);
        }
    }
}
