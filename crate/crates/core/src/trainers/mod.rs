//! Population trainers: PDO, its PBT ablation and the diversity baselines.
//!
//! Every trainer shares one loop. Learners run their reward phase (in
//! parallel unless deterministic mode is on), get evaluated and offered to
//! the archive, and then the trainer-specific steps run on a single worker:
//! bandit bookkeeping, exploitation or clustering selection, and the
//! auxiliary diversity phase on archive copies.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{save_archive, AddOutcome, AgentSnapshot, Archive, Origin};
use crate::diversity::{auxiliary_objective, diversify};
use crate::env::{EnvSpec, SimRng};
use crate::kernels::{KernelConfig, ProbedPolicy, StateBatch};
use crate::rl::{evaluate, stream_rng, AgentState, Evaluation, Learner, PpoBatch, PpoStats};
use crate::{Error, Result};

pub mod bandit;
pub mod cluster;
pub mod config;
pub mod dvd;
pub mod metrics;

pub use bandit::{BanditKind, BanditState};
pub use cluster::{clustering_selection, kmeans};
pub use config::{TrainerConfig, TrainerKind};
pub use dvd::{dvd_gradients, dvd_update, DiversityTerm};
pub use metrics::{
    max_fitness_violations, read_metrics, ArchiveRecord, AuxRecord, ExploitRecord, IterationRecord, JsonlWriter,
    LearnerRecord,
};

const CONTROL_STREAM: u64 = 1 << 32;
const AUX_STREAM: u64 = (1 << 32) + 1;
const EVAL_STREAM: u64 = (1 << 32) + 2;

/// Evaluates a stored agent on a fresh environment.
pub fn evaluate_agent(spec: &EnvSpec, agent: &AgentState, episodes: usize, rng: &mut SimRng) -> Result<Evaluation> {
    let mut env = spec.build();
    evaluate(&agent.policy, &agent.normalizer, env.as_mut(), episodes, true, rng)
}

/// Probe states drawn from the union of the learners' latest raw observations.
fn sample_probe(learners: &[Learner], size: usize, rng: &mut SimRng) -> Result<StateBatch> {
    let pools: Vec<&[Vec<f64>]> = learners
        .iter()
        .filter_map(|l| l.last_buffer.as_ref().map(|b| b.raw_obs.as_slice()))
        .collect();
    StateBatch::sample_from(&pools, size, rng)
}

fn normalized(batch: &StateBatch, agent: &AgentState) -> Vec<Vec<f64>> {
    batch.map(|s| agent.normalizer.normalize_obs(s)).states
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub trainer: TrainerKind,
    pub seed: u64,
    pub iterations: usize,
    pub env_steps: u64,
    pub max_fitness: Option<f64>,
    pub min_fitness: Option<f64>,
    pub qd_score: f64,
    pub coverage: usize,
    pub wall_clock_secs: f64,
}

pub struct Trainer {
    pub cfg: TrainerConfig,
    pub learners: Vec<Learner>,
    pub archive: Archive,
    pub bandit: Option<BanditState>,
    pub iteration: usize,
    /// Latest evaluation of each live learner.
    pub latest: Vec<Option<Evaluation>>,
    /// Payload of each learner at its latest archive offer; NaN recovery target.
    pub last_offered: Vec<Option<AgentState>>,
    lambda: Option<f64>,
    control_rng: SimRng,
    aux_rng: SimRng,
    eval_rng: SimRng,
}

impl Trainer {
    pub fn new(cfg: &TrainerConfig) -> Result<Self> {
        let cfg = cfg.resolved()?;
        let learners: Vec<Learner> = (0..cfg.population)
            .map(|i| Learner::new(i, &cfg.env, &cfg.policy, &cfg.ppo, cfg.seed))
            .collect();
        let mut control_rng = stream_rng(cfg.seed, CONTROL_STREAM);
        let mut bandit = match cfg.trainer {
            TrainerKind::Dvd => Some(BanditState::new(BanditKind::Thompson, cfg.lambda_arms.clone())?),
            TrainerKind::DseUcb => Some(BanditState::new(BanditKind::Ucb, cfg.lambda_arms.clone())?),
            _ => None,
        };
        let lambda = bandit.as_mut().map(|b| b.select(&mut control_rng));
        let m = cfg.population;
        Ok(Self {
            archive: Archive::new(&cfg.archive),
            learners,
            bandit,
            iteration: 0,
            latest: vec![None; m],
            last_offered: vec![None; m],
            lambda,
            control_rng,
            aux_rng: stream_rng(cfg.seed, AUX_STREAM),
            eval_rng: stream_rng(cfg.seed, EVAL_STREAM),
            cfg,
        })
    }

    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    pub fn env_steps(&self) -> u64 {
        self.learners.iter().map(|l| l.total_steps).sum()
    }

    /// Evaluation generator. Every evaluation starts from the same state so
    /// fitness comparisons use common random numbers.
    fn eval_rng(&self) -> SimRng {
        self.eval_rng.clone()
    }

    fn is_eval_iteration(&self) -> bool {
        let every = self.cfg.eval_every.unwrap_or(1);
        (self.iteration + 1).is_multiple_of(every) || self.iteration + 1 == self.cfg.iterations()
    }

    fn is_exploit_iteration(&self) -> bool {
        matches!(self.cfg.exploit_every(), Some(k) if (self.iteration + 1).is_multiple_of(k))
    }

    /// Runs one outer iteration and returns its log record.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let stats = self.reward_phase()?;
        let mut reverted = vec![false; self.learners.len()];
        for (i, s) in stats.iter().enumerate() {
            let bad = s.aborted || !self.learners[i].agent.policy.params().iter().all(|x| x.is_finite());
            if bad {
                if let Some(prev) = self.last_offered[i].clone() {
                    self.learners[i].load(prev);
                    reverted[i] = true;
                }
            }
        }

        let evaluated = self.is_eval_iteration();
        let mut exploit = None;
        let mut aux = None;
        let mut selection_fallback = None;
        if evaluated {
            self.evaluate_and_offer()?;
            if let Some(b) = self.bandit.as_mut() {
                let best = self
                    .latest
                    .iter()
                    .flatten()
                    .map(|e| e.fitness)
                    .fold(f64::NEG_INFINITY, f64::max);
                b.observe(best);
                self.lambda = Some(b.select(&mut self.control_rng));
            }
        }
        if self.is_exploit_iteration() && !self.archive.is_empty() {
            match self.cfg.trainer {
                TrainerKind::PpoSingle => {}
                TrainerKind::EdoCs if self.archive.len() >= self.learners.len() => {
                    selection_fallback = Some(self.clustering_reset()?);
                }
                _ => exploit = self.exploit()?,
            }
        }
        if evaluated && self.cfg.trainer == TrainerKind::Pdo && self.cfg.diversity_iters > 0 {
            aux = Some(self.auxiliary_phase()?);
        }

        let qd = self.archive.qd_metrics(self.cfg.env.qd_offset());
        let min_fitness = self.archive.entries().iter().map(|s| s.fitness).reduce(f64::min);
        let learners = self
            .learners
            .iter()
            .zip(&stats)
            .zip(&reverted)
            .map(|((l, s), r)| {
                let latest = self.latest[l.id].as_ref();
                LearnerRecord {
                    id: l.id,
                    fitness: latest.map(|e| e.fitness),
                    bd: latest.and_then(|e| e.bd.clone()),
                    episode_return: l.last_episode_return(),
                    policy_loss: s.policy_loss,
                    value_loss: s.value_loss,
                    entropy: s.entropy,
                    approx_kl: s.approx_kl,
                    aborted: s.aborted,
                    reverted: *r,
                }
            })
            .collect();
        let record = IterationRecord {
            iteration: self.iteration,
            env_steps: self.env_steps(),
            evaluated,
            learners,
            archive: ArchiveRecord::new(qd, min_fitness),
            exploit,
            aux,
            lambda: self.lambda,
            selection_fallback,
        };
        self.iteration += 1;
        Ok(record)
    }

    fn reward_phase(&mut self) -> Result<Vec<PpoStats>> {
        let cfg = &self.cfg;
        match cfg.trainer {
            TrainerKind::Dvd | TrainerKind::DseUcb => self.joint_phase(),
            _ => {
                let run = |l: &mut Learner| l.reward_phase(&cfg.ppo).map(|s| s.ppo);
                if cfg.deterministic {
                    self.learners.iter_mut().map(run).collect()
                } else {
                    self.learners.par_iter_mut().map(run).collect()
                }
            }
        }
    }

    /// Joint reward-and-diversity update of the live population.
    fn joint_phase(&mut self) -> Result<Vec<PpoStats>> {
        let ppo = self.cfg.ppo.clone();
        let batches: Vec<PpoBatch> = if self.cfg.deterministic {
            self.learners.iter_mut().map(|l| l.collect(&ppo)).collect::<Result<_>>()?
        } else {
            self.learners.par_iter_mut().map(|l| l.collect(&ppo)).collect::<Result<_>>()?
        };
        let probe = sample_probe(&self.learners, self.cfg.probe_states, &mut self.control_rng)?;
        let probes: Vec<Vec<Vec<f64>>> = self.learners.iter().map(|l| normalized(&probe, &l.agent)).collect();
        let kernel = KernelConfig {
            // DvD compares deterministic behaviour; DSE compares full action distributions.
            deterministic: self.cfg.trainer == TrainerKind::Dvd,
            ..self.cfg.kernel()
        };
        let lambda = self.lambda.unwrap_or(0.0);
        let scale = {
            let members: Vec<ProbedPolicy<'_>> = self
                .learners
                .iter()
                .zip(&probes)
                .map(|(l, s)| ProbedPolicy::new(&l.agent.policy, s))
                .collect();
            auxiliary_objective(&members, &kernel, self.cfg.beta, None)?.scale
        };
        let div = DiversityTerm {
            kernel: &kernel,
            beta: self.cfg.beta,
            probes: &probes,
            scale: Some(scale),
        };
        let mut agents: Vec<AgentState> = self.learners.iter().map(|l| l.agent.clone()).collect();
        let mut rngs: Vec<SimRng> = self.learners.iter().map(|l| l.rng.clone()).collect();
        let stats = dvd_update(&mut agents, &batches, &div, lambda, &ppo, &mut rngs)?;
        for ((l, a), r) in self.learners.iter_mut().zip(agents).zip(rngs) {
            l.agent = a;
            l.rng = r;
        }
        Ok(stats)
    }

    fn evaluate_and_offer(&mut self) -> Result<()> {
        let episodes = self.cfg.eval_episodes;
        let rng = self.eval_rng();
        let evals: Vec<Evaluation> = if self.cfg.deterministic {
            self.learners
                .iter()
                .map(|l| l.evaluate(episodes, &mut rng.clone()))
                .collect::<Result<_>>()?
        } else {
            // Environments are Send but not Sync, hence the mutable iterator.
            self.learners
                .par_iter_mut()
                .map(|l| l.evaluate(episodes, &mut rng.clone()))
                .collect::<Result<_>>()?
        };
        for (l, e) in self.learners.iter().zip(evals) {
            let snap = AgentSnapshot::new(
                l.agent.clone(),
                e.fitness,
                e.bd.clone(),
                Origin::RewardPhase,
                self.iteration,
                l.id,
            );
            self.archive.add(snap)?;
            self.last_offered[l.id] = Some(l.agent.clone());
            self.latest[l.id] = Some(e);
        }
        Ok(())
    }

    /// Index of the live learner with the lowest latest evaluation; ties go
    /// to the lower id. `None` before the first evaluation.
    pub fn worst_learner(&self) -> Option<usize> {
        self.latest
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|e| (i, e.fitness)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
    }

    /// Replaces the worst learner with a uniformly drawn archive snapshot.
    pub(crate) fn exploit(&mut self) -> Result<Option<ExploitRecord>> {
        let Some(worst) = self.worst_learner() else {
            return Ok(None);
        };
        let snap = self.archive.sample_uniform(&mut self.control_rng)?;
        self.learners[worst].load(snap.agent.clone());
        self.latest[worst] = Some(Evaluation {
            fitness: snap.fitness,
            bd: snap.bd.clone(),
            returns: vec![],
        });
        self.last_offered[worst] = Some(snap.agent);
        Ok(Some(ExploitRecord {
            learner: worst,
            source_seq: snap.seq,
            source_fitness: snap.fitness,
        }))
    }

    /// Resets the whole population to one elite per behaviour cluster.
    /// Returns whether clustering fell back to plain top-M.
    fn clustering_reset(&mut self) -> Result<bool> {
        let m = self.learners.len();
        let candidates: Vec<AgentSnapshot> = self.archive.entries().into_iter().cloned().collect();
        let probe = sample_probe(&self.learners, self.cfg.probe_states, &mut self.control_rng)?;
        let embeddings: Vec<Vec<f64>> = candidates
            .iter()
            .map(|c| {
                let mut e = Vec::new();
                for s in &probe.states {
                    e.extend(c.agent.policy.forward(&c.agent.normalizer.normalize_obs(s))?.deterministic_action());
                }
                Ok(e)
            })
            .collect::<Result<_>>()?;
        let (chosen, fallback) = clustering_selection(&candidates, &embeddings, m, &mut self.control_rng)?;
        for (i, snap) in chosen.into_iter().enumerate() {
            self.learners[i].load(snap.agent.clone());
            self.latest[i] = Some(Evaluation {
                fitness: snap.fitness,
                bd: snap.bd,
                returns: vec![],
            });
            self.last_offered[i] = Some(snap.agent);
        }
        Ok(fallback)
    }

    /// Diversifies copies of the archive's top M and offers the results back.
    /// Live learners are not touched.
    pub(crate) fn auxiliary_phase(&mut self) -> Result<AuxRecord> {
        let m = self.learners.len();
        let top = self.archive.top_m(m)?;
        let probe = sample_probe(&self.learners, self.cfg.probe_states, &mut self.aux_rng)?;
        let states: Vec<Vec<Vec<f64>>> = top.snapshots.iter().map(|s| normalized(&probe, &s.agent)).collect();
        let policies = top.snapshots.iter().map(|s| s.agent.policy.clone()).collect();
        let outcome = diversify(policies, &states, &self.cfg.kernel(), &self.cfg.ascent(), &mut self.aux_rng)?;
        let rng = self.eval_rng();
        let mut fitness = Vec::with_capacity(m);
        let (mut inserted, mut replaced) = (0, 0);
        for (snap, policy) in top.snapshots.iter().zip(outcome.policies) {
            let agent = AgentState {
                policy,
                ..snap.agent.clone()
            };
            let e = evaluate_agent(&self.cfg.env, &agent, self.cfg.eval_episodes, &mut rng.clone())?;
            fitness.push(e.fitness);
            if !e.fitness.is_finite() {
                continue;
            }
            let out = self.archive.add(AgentSnapshot::new(
                agent,
                e.fitness,
                e.bd,
                Origin::AuxiliaryPhase,
                self.iteration,
                snap.learner_id,
            ))?;
            match out {
                AddOutcome::Inserted => inserted += 1,
                AddOutcome::Replaced => replaced += 1,
                AddOutcome::Rejected => {}
            }
        }
        Ok(AuxRecord {
            det_before: outcome.det_trace[0],
            det_after: *outcome.det_trace.last().expect("trace has the initial value"),
            jittered: outcome.jittered,
            padded: top.padded,
            fitness,
            inserted,
            replaced,
        })
    }

    pub fn summary(&self, wall_clock_secs: f64) -> RunSummary {
        let qd = self.archive.qd_metrics(self.cfg.env.qd_offset());
        RunSummary {
            trainer: self.cfg.trainer,
            seed: self.cfg.seed,
            iterations: self.iteration,
            env_steps: self.env_steps(),
            max_fitness: (!qd.max_fitness.is_nan()).then_some(qd.max_fitness),
            min_fitness: self.archive.entries().iter().map(|s| s.fitness).reduce(f64::min),
            qd_score: qd.qd_score,
            coverage: qd.coverage,
            wall_clock_secs,
        }
    }
}

/// Paths of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn archive(&self) -> PathBuf {
        self.root.join("archive")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
}

/// Trains to completion. With `out` set, writes the resolved config, the
/// metrics log, the final archive and a summary there.
pub fn train(cfg: &TrainerConfig, out: Option<&Path>) -> Result<(RunSummary, Vec<IterationRecord>)> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg)?;
    let dir = out.map(RunDir::new);
    let mut writer = match &dir {
        Some(d) => {
            std::fs::create_dir_all(&d.root)?;
            std::fs::write(d.config(), serde_json::to_string_pretty(&trainer.cfg)?)?;
            Some(JsonlWriter::create(&d.metrics())?)
        }
        None => None,
    };
    let mut records = Vec::with_capacity(trainer.cfg.iterations());
    for _ in 0..trainer.cfg.iterations() {
        let r = trainer.step()?;
        if let Some(w) = writer.as_mut() {
            w.write(&r)?;
        }
        records.push(r);
    }
    let summary = trainer.summary(start.elapsed().as_secs_f64());
    if let (Some(d), Some(mut w)) = (dir, writer) {
        w.flush()?;
        save_archive(&trainer.archive, &d.archive())?;
        std::fs::write(d.summary(), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok((summary, records))
}

/// Errors if `records` violate archive gating.
pub fn check_gating(records: &[IterationRecord]) -> Result<()> {
    let bad = max_fitness_violations(records);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("archive max fitness dropped at iterations {bad:?}")))
    }
}
